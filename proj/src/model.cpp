#include "evt/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "evt/ops.hpp"
#include "evt/rng.hpp"

namespace evt {

namespace {

constexpr std::int64_t kStemKernel = 4;
constexpr std::int64_t kStemPad = 1;

std::string stem_name(std::size_t i) { return "stem." + std::to_string(i); }
std::string block_name(std::int64_t b) { return "block." + std::to_string(b); }

}  // namespace

std::string to_string(ModelRole role) { return role == ModelRole::student ? "student" : "teacher"; }

ModelRole role_from_string(const std::string& s) {
  if (s == "student") return ModelRole::student;
  if (s == "teacher") return ModelRole::teacher;
  throw ConfigError("unknown model role '" + s + "'");
}

ModelConfig ModelConfig::student() { return ModelConfig{}; }

ModelConfig ModelConfig::teacher() {
  ModelConfig c;
  c.stem_channels = {24, 48};
  c.embed_dim = 128;
  c.num_heads = 4;
  c.num_blocks = 4;
  c.decoder_channels = 48;
  c.role = ModelRole::teacher;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](std::int64_t v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1");
  };
  positive(height, "height");
  positive(width, "width");
  positive(num_classes, "num_classes");
  positive(embed_dim, "embed_dim");
  positive(num_heads, "num_heads");
  if (num_blocks < 0) throw ConfigError("num_blocks must be >= 0");
  positive(mlp_ratio, "mlp_ratio");
  positive(decoder_channels, "decoder_channels");
  positive(patch_size, "patch_size");
  if (num_classes > 255) throw ConfigError("num_classes must be <= 255");
  if (stem_channels.empty()) throw ConfigError("stem_channels must not be empty");
  for (auto c : stem_channels) positive(c, "stem channel");
  if (head_dim < 0) throw ConfigError("head_dim must be >= 0");
  if (head_dim == 0 && embed_dim % num_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  const std::int64_t s = stem_stride();
  if (height % s != 0 || width % s != 0)
    throw ConfigError("input resolution must be divisible by the stem stride " + std::to_string(s));
  if ((height / s) % patch_size != 0 || (width / s) % patch_size != 0)
    throw ConfigError("patch_size must divide the post-stem feature map side");
  for (const auto& [layer, idx] : input_channel_select)
    if (idx.empty()) throw ConfigError("empty input channel selection for " + layer);
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["height"] = height;
  j["width"] = width;
  j["num_classes"] = num_classes;
  j["stem_channels"] = stem_channels;
  j["embed_dim"] = embed_dim;
  j["num_heads"] = num_heads;
  j["head_dim"] = head_dim;
  j["num_blocks"] = num_blocks;
  j["mlp_ratio"] = mlp_ratio;
  j["decoder_channels"] = decoder_channels;
  j["patch_size"] = patch_size;
  j["role"] = to_string(role);
  j["input_channel_select"] = input_channel_select;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j, const ModelConfig& base) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c = base;
  static const std::set<std::string> known{
      "height",     "width",     "num_classes", "stem_channels",    "embed_dim",
      "num_heads",  "head_dim",  "num_blocks",  "mlp_ratio",        "decoder_channels",
      "patch_size", "role",      "input_channel_select", "resolution"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  try {
    auto get = [&](const char* key, std::int64_t& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::int64_t>();
    };
    if (j.contains("resolution")) {
      c.height = c.width = j.at("resolution").get<std::int64_t>();
    }
    get("height", c.height);
    get("width", c.width);
    get("num_classes", c.num_classes);
    get("embed_dim", c.embed_dim);
    get("num_heads", c.num_heads);
    get("head_dim", c.head_dim);
    get("num_blocks", c.num_blocks);
    get("mlp_ratio", c.mlp_ratio);
    get("decoder_channels", c.decoder_channels);
    get("patch_size", c.patch_size);
    if (j.contains("stem_channels")) c.stem_channels = j.at("stem_channels").get<std::vector<std::int64_t>>();
    if (j.contains("role")) c.role = role_from_string(j.at("role").get<std::string>());
    if (j.contains("input_channel_select"))
      c.input_channel_select =
          j.at("input_channel_select").get<std::map<std::string, std::vector<std::int64_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) { return from_json(j, ModelConfig{}); }

// ------------------------------------------------------------------ SegModel

const Tensor& SegModel::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second;
}

Tensor& SegModel::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw IndexError("no parameter named '" + name + "'");
  return it->second;
}

DType SegModel::dtype() const { return params.empty() ? DType::f32 : params.begin()->second.dtype(); }

SegModel SegModel::clone() const {
  SegModel m;
  m.config = config;
  m.head_mask = head_mask;
  m.weight_masks = weight_masks;
  for (const auto& [name, t] : params) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    m.params.emplace(name, c);
  }
  return m;
}

SegModel SegModel::to(DType target) const {
  SegModel m = clone();
  for (auto& [name, t] : m.params) {
    const bool rg = t.requires_grad();
    t = t.to(target);
    t.set_requires_grad(rg);
  }
  return m;
}

void SegModel::set_requires_grad(bool flag) {
  for (auto& [name, t] : params) t.set_requires_grad(flag);
}

void SegModel::zero_grad() {
  for (auto& [name, t] : params) t.zero_grad();
}

void SegModel::apply_masks() {
  for (const auto& [name, keep] : weight_masks) {
    Tensor& t = param(name);
    if (static_cast<std::int64_t>(keep.size()) != t.numel())
      throw DimensionError("mask size mismatch for " + name);
    std::visit(
        [&](auto& v) {
          for (std::size_t i = 0; i < v.size(); ++i)
            if (!keep[i]) v[i] = 0;
        },
        t.mutable_storage());
  }
}

bool SegModel::bit_equal(const SegModel& other) const {
  if (!(config == other.config) || params.size() != other.params.size()) return false;
  for (const auto& [name, t] : params) {
    auto it = other.params.find(name);
    if (it == other.params.end() || !t.bit_equal(it->second)) return false;
  }
  return true;
}

// ------------------------------------------------------------------ building

namespace {

Tensor conv_weight(Rng& rng, std::int64_t cout, std::int64_t cin, std::int64_t k) {
  // He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
  std::vector<double> v(static_cast<std::size_t>(cout * cin * k * k));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_values({cout, cin, k, k}, std::move(v), DType::f32);
}

Tensor linear_weight(Rng& rng, std::int64_t in, std::int64_t out) {
  std::vector<double> v(static_cast<std::size_t>(in * out));
  for (auto& x : v) x = rng.truncated_normal(0.02);
  return Tensor::from_values({in, out}, std::move(v), DType::f32);
}

std::int64_t selected_inputs(const ModelConfig& c, const std::string& layer, std::int64_t full) {
  auto it = c.input_channel_select.find(layer);
  return it == c.input_channel_select.end() ? full : static_cast<std::int64_t>(it->second.size());
}

}  // namespace

SegModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SegModel m;
  m.config = config;
  Rng rng(mix_seed(seed, 0x5e9));
  auto& p = m.params;
  std::int64_t cin = 3;
  for (std::size_t i = 0; i < config.stem_channels.size(); ++i) {
    const std::int64_t cout = config.stem_channels[i];
    const std::string name = stem_name(i);
    p[name + ".w"] = conv_weight(rng, cout, selected_inputs(config, name, cin), kStemKernel);
    p[name + ".b"] = Tensor::zeros({cout});
    cin = cout;
  }
  const std::int64_t stem_out = cin;
  const std::int64_t d = config.embed_dim;
  p["embed.w"] = conv_weight(rng, d, selected_inputs(config, "embed", stem_out), config.patch_size);
  p["embed.b"] = Tensor::zeros({d});
  const std::int64_t a = config.attention_dim();
  const std::int64_t hidden = d * config.mlp_ratio;
  for (std::int64_t b = 0; b < config.num_blocks; ++b) {
    const std::string n = block_name(b);
    p[n + ".ln1.g"] = Tensor::full({d}, 1.0);
    p[n + ".ln1.b"] = Tensor::zeros({d});
    p[n + ".attn.q.w"] = linear_weight(rng, d, a);
    p[n + ".attn.k.w"] = linear_weight(rng, d, a);
    p[n + ".attn.v.w"] = linear_weight(rng, d, a);
    p[n + ".attn.o.w"] = linear_weight(rng, a, d);
    p[n + ".ln2.g"] = Tensor::full({d}, 1.0);
    p[n + ".ln2.b"] = Tensor::zeros({d});
    p[n + ".mlp.0.w"] = linear_weight(rng, d, hidden);
    p[n + ".mlp.0.b"] = Tensor::zeros({hidden});
    p[n + ".mlp.1.w"] = linear_weight(rng, hidden, d);
    p[n + ".mlp.1.b"] = Tensor::zeros({d});
  }
  const std::int64_t dc = config.decoder_channels;
  p["decoder.lat_tok.w"] = conv_weight(rng, dc, selected_inputs(config, "decoder.lat_tok", d), 1);
  p["decoder.lat_tok.b"] = Tensor::zeros({dc});
  p["decoder.lat_stem.w"] =
      conv_weight(rng, dc, selected_inputs(config, "decoder.lat_stem", stem_out), 1);
  p["decoder.lat_stem.b"] = Tensor::zeros({dc});
  p["decoder.fuse.w"] = conv_weight(rng, dc, selected_inputs(config, "decoder.fuse", dc), 3);
  p["decoder.fuse.b"] = Tensor::zeros({dc});
  p["head.w"] = conv_weight(rng, config.num_classes, selected_inputs(config, "head", dc), 1);
  p["head.b"] = Tensor::zeros({config.num_classes});
  return m;
}

// ------------------------------------------------------------------ forward

namespace {

Tensor gather_inputs(const ModelConfig& c, const std::string& layer, const Tensor& x) {
  auto it = c.input_channel_select.find(layer);
  if (it == c.input_channel_select.end()) return x;
  return select_channels(x, it->second);
}

Tensor conv_layer(const SegModel& m, const std::string& layer, const Tensor& x,
                  std::int64_t stride, std::int64_t pad) {
  return conv2d(gather_inputs(m.config, layer, x), m.param(layer + ".w"), m.param(layer + ".b"),
                stride, pad);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_bias(y, b, 1) : y;
}

}  // namespace

ForwardOutput forward(const SegModel& model, const Tensor& image,
                      std::span<const std::int64_t> taps) {
  const auto& c = model.config;
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != c.height || image.dim(3) != c.width)
    throw DimensionError("image shape " + to_string(image.shape()) + " does not match model input 3×" +
                         std::to_string(c.height) + "×" + std::to_string(c.width));
  for (auto t : taps)
    if (t < 0 || t >= c.num_blocks)
      throw IndexError("feature tap " + std::to_string(t) + " out of range for " +
                       std::to_string(c.num_blocks) + " blocks");
  const DType dt = model.dtype();
  Tensor x = image.dtype() == dt ? image : image.to(dt);
  const std::int64_t n = image.dim(0);

  for (std::size_t i = 0; i < c.stem_channels.size(); ++i)
    x = relu(conv_layer(model, stem_name(i), x, 2, kStemPad));
  const Tensor stem_features = x;

  Tensor e = conv_layer(model, "embed", x, c.patch_size, 0);
  const std::int64_t gh = c.grid_height(), gw = c.grid_width(), tokens = gh * gw;
  const std::int64_t d = c.embed_dim;
  Tensor t = reshape(permute(e, {0, 2, 3, 1}), {n * tokens, d});

  ForwardOutput out;
  for (std::int64_t b = 0; b < c.num_blocks; ++b) {
    const std::string bn = block_name(b);
    Tensor h = layer_norm(t, model.param(bn + ".ln1.g"), model.param(bn + ".ln1.b"));
    Tensor q = matmul(h, model.param(bn + ".attn.q.w"));
    Tensor k = matmul(h, model.param(bn + ".attn.k.w"));
    Tensor v = matmul(h, model.param(bn + ".attn.v.w"));
    std::span<const std::uint8_t> keep;
    if (!model.head_mask.empty()) keep = model.head_mask.at(static_cast<std::size_t>(b));
    Tensor att = multi_head_attention(q, k, v, n, tokens, c.num_heads, keep);
    t = add(t, matmul(att, model.param(bn + ".attn.o.w")));
    h = layer_norm(t, model.param(bn + ".ln2.g"), model.param(bn + ".ln2.b"));
    Tensor mlp = gelu(linear(h, model.param(bn + ".mlp.0.w"), model.param(bn + ".mlp.0.b")));
    mlp = linear(mlp, model.param(bn + ".mlp.1.w"), model.param(bn + ".mlp.1.b"));
    t = add(t, mlp);
    if (std::find(taps.begin(), taps.end(), b) != taps.end())
      out.features[b] = reshape(t, {n, tokens, d});
  }

  Tensor token_map = permute(reshape(t, {n, gh, gw, d}), {0, 3, 1, 2});
  Tensor lat_tok = nearest_upsample(conv_layer(model, "decoder.lat_tok", token_map, 1, 0), c.patch_size);
  Tensor lat_stem = conv_layer(model, "decoder.lat_stem", stem_features, 1, 0);
  Tensor fused = relu(add(lat_tok, lat_stem));
  fused = relu(conv_layer(model, "decoder.fuse", fused, 1, 1));
  Tensor logits = conv_layer(model, "head", fused, 1, 0);
  out.logits = nearest_upsample(logits, c.stem_stride());
  return out;
}

Tensor forward_segment(const SegModel& model, const Tensor& image) {
  return forward(model, image).logits;
}

std::map<std::int64_t, Tensor> extract_features(const SegModel& model, const Tensor& image,
                                                std::span<const std::int64_t> taps) {
  return forward(model, image, taps).features;
}

std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
  if (logits.rank() != 4) throw DimensionError("argmax_classes expects N×K×H×W");
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n * hw));
  visit_dtype(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = logits.data<T>();
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t p = 0; p < hw; ++p) {
        std::int64_t best = 0;
        T best_v = v[b * k * hw + p];
        for (std::int64_t c = 1; c < k; ++c) {
          const T x = v[(b * k + c) * hw + p];
          if (x > best_v) {
            best_v = x;
            best = c;
          }
        }
        out[b * hw + p] = static_cast<std::uint8_t>(best);
      }
  });
  return out;
}

// ------------------------------------------------------------------ accounting

std::map<std::string, std::vector<std::uint8_t>> effective_masks(const SegModel& model) {
  auto masks = model.weight_masks;
  const auto& c = model.config;
  if (model.head_mask.empty()) return masks;
  const std::int64_t dh = c.effective_head_dim(), a = c.attention_dim(), d = c.embed_dim;
  auto mask_for = [&](const std::string& name) -> std::vector<std::uint8_t>& {
    auto& m = masks[name];
    if (m.empty()) m.assign(static_cast<std::size_t>(model.param(name).numel()), 1);
    return m;
  };
  for (std::int64_t b = 0; b < c.num_blocks; ++b) {
    const auto& keep = model.head_mask.at(static_cast<std::size_t>(b));
    const std::string bn = block_name(b);
    for (std::int64_t h = 0; h < c.num_heads; ++h) {
      if (keep.at(static_cast<std::size_t>(h))) continue;
      for (const char* proj : {"q", "k", "v"}) {
        auto& m = mask_for(bn + ".attn." + proj + ".w");
        for (std::int64_t r = 0; r < d; ++r)
          for (std::int64_t j = h * dh; j < (h + 1) * dh; ++j) m[r * a + j] = 0;
      }
      auto& mo = mask_for(bn + ".attn.o.w");
      for (std::int64_t r = h * dh; r < (h + 1) * dh; ++r)
        for (std::int64_t j = 0; j < d; ++j) mo[r * d + j] = 0;
    }
  }
  return masks;
}

std::int64_t count_params(const SegModel& model, bool include_masked) {
  std::int64_t total = 0;
  for (const auto& [name, t] : model.params) total += t.numel();
  if (include_masked) return total;
  for (const auto& [name, keep] : effective_masks(model))
    total -= static_cast<std::int64_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
  return total;
}

FlopReport count_flops(const SegModel& model, std::int64_t height, std::int64_t width) {
  const auto& c = model.config;
  if (height != c.height || width != c.width)
    throw DimensionError("count_flops: resolution does not match the model configuration");
  FlopReport r;
  auto conv_macs = [&](const std::string& layer, std::int64_t ho, std::int64_t wo) {
    const Tensor& w = model.param(layer + ".w");
    return w.dim(0) * w.dim(1) * w.dim(2) * w.dim(3) * ho * wo;
  };
  std::int64_t h = height, w = width;
  for (std::size_t i = 0; i < c.stem_channels.size(); ++i) {
    h /= 2;
    w /= 2;
    r.stem += conv_macs(stem_name(i), h, w);
  }
  const std::int64_t stem_h = h, stem_w = w;
  const std::int64_t gh = c.grid_height(), gw = c.grid_width(), tokens = gh * gw;
  r.embed = conv_macs("embed", gh, gw);
  for (std::int64_t b = 0; b < c.num_blocks; ++b) {
    const std::string bn = block_name(b);
    for (const char* proj : {"q", "k", "v", "o"})
      r.attention_proj += tokens * model.param(bn + ".attn." + proj + ".w").numel();
    r.attention_core += 2 * tokens * tokens * c.attention_dim();
    r.mlp += tokens * (model.param(bn + ".mlp.0.w").numel() + model.param(bn + ".mlp.1.w").numel());
  }
  r.decoder = conv_macs("decoder.lat_tok", gh, gw) + conv_macs("decoder.lat_stem", stem_h, stem_w) +
              conv_macs("decoder.fuse", stem_h, stem_w) + conv_macs("head", stem_h, stem_w);
  return r;
}

}  // namespace evt
