#include "evt/prune.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "evt/errors.hpp"
#include "evt/rng.hpp"

namespace evt {

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::unstructured: return "unstructured";
    case Granularity::filter: return "filter";
    case Granularity::channel: return "channel";
    case Granularity::head: return "head";
  }
  return "?";
}

Granularity granularity_from_string(const std::string& s) {
  if (s == "unstructured") return Granularity::unstructured;
  if (s == "filter") return Granularity::filter;
  if (s == "channel") return Granularity::channel;
  if (s == "head") return Granularity::head;
  throw ConfigError("unknown granularity '" + s + "'");
}

std::vector<std::string> PruneSpec::effective_scope() const {
  if (!scope.empty()) return scope;
  switch (granularity) {
    case Granularity::filter:
    case Granularity::channel: return {"stem.*.w"};
    case Granularity::head: return {"block.*.attn.*.w"};
    case Granularity::unstructured: return {"*.w"};
  }
  return {};
}

void PruneSpec::validate() const {
  if (!(sparsity >= 0 && sparsity <= 1)) throw ConfigError("sparsity must be in [0, 1]");
  if (heads_to_keep < 0) throw ConfigError("heads_to_keep must be >= 0");
  if (heads_to_keep > 0 && granularity != Granularity::head)
    throw ConfigError("heads_to_keep applies to head granularity only");
}

nlohmann::json PruneSpec::to_json() const {
  return {{"granularity", to_string(granularity)},
          {"criterion", criterion == PruneCriterion::l2 ? "l2" : "l1"},
          {"sparsity", sparsity},
          {"heads_to_keep", heads_to_keep},
          {"scope", scope}};
}

PruneSpec PruneSpec::from_json(const nlohmann::json& j) { return from_json(j, PruneSpec{}); }

PruneSpec PruneSpec::from_json(const nlohmann::json& j, const PruneSpec& base) {
  if (!j.is_object()) throw ConfigError("prune spec must be an object");
  static const std::set<std::string> known{"granularity", "criterion", "sparsity", "heads_to_keep", "scope"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown prune spec key '" + key + "'");
  PruneSpec s = base;
  try {
    if (j.contains("granularity")) s.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    if (j.contains("criterion")) {
      const auto c = j.at("criterion").get<std::string>();
      if (c == "l2") s.criterion = PruneCriterion::l2;
      else if (c == "l1") s.criterion = PruneCriterion::l1;
      else throw ConfigError("unknown criterion '" + c + "'");
    }
    if (j.contains("sparsity")) s.sparsity = j.at("sparsity").get<double>();
    if (j.contains("heads_to_keep")) s.heads_to_keep = j.at("heads_to_keep").get<std::int64_t>();
    if (j.contains("scope")) s.scope = j.at("scope").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("prune spec: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json PruneMask::to_json() const {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : ledger)
    units.push_back({{"layer", u.layer}, {"unit", u.unit}, {"score", u.score}, {"pruned", u.pruned}});
  return {{"granularity", to_string(granularity)}, {"head_keep", head_keep}, {"units", units},
          {"scope", scope_params}};
}

namespace {

using MaskMap = std::map<std::string, std::vector<std::uint8_t>>;

std::string layer_of(const std::string& weight) { return weight.substr(0, weight.size() - 2); }

bool matches(const std::vector<std::string>& globs, const std::string& name) {
  for (const auto& g : globs)
    if (fnmatch(g.c_str(), name.c_str(), 0) == 0) return true;
  return false;
}

std::vector<std::string> scope_params(const SegModel& model, const PruneSpec& spec) {
  std::vector<std::string> out;
  const auto globs = spec.effective_scope();
  for (const auto& [name, t] : model.params)
    if (matches(globs, name)) out.push_back(name);
  if (out.empty()) throw ContractError("prune scope matches no parameter");
  return out;
}

/// Layers consuming the output channels of a conv layer (filter members).
std::vector<std::string> consumers(const ModelConfig& c, const std::string& layer) {
  const auto n = c.stem_channels.size();
  for (std::size_t i = 0; i < n; ++i)
    if (layer == "stem." + std::to_string(i))
      return i + 1 < n ? std::vector<std::string>{"stem." + std::to_string(i + 1)}
                       : std::vector<std::string>{"embed", "decoder.lat_stem"};
  if (layer == "decoder.fuse") return {"head"};
  return {};
}

/// Input positions of `consumer` that read producer channel `channel`.
std::vector<std::int64_t> consumer_positions(const ModelConfig& c, const std::string& consumer,
                                             std::int64_t channel) {
  auto it = c.input_channel_select.find(consumer);
  if (it == c.input_channel_select.end()) return {channel};
  std::vector<std::int64_t> out;
  for (std::size_t p = 0; p < it->second.size(); ++p)
    if (it->second[p] == channel) out.push_back(static_cast<std::int64_t>(p));
  return out;
}

// Index helpers for a weight viewed as [outer, axis, inner].
struct AxisView {
  std::int64_t outer, dim, inner;
};

AxisView view(const Shape& s, std::size_t axis) {
  AxisView v{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

template <class F>
void for_slice(const Shape& s, std::size_t axis, std::int64_t index, F&& f) {
  const auto v = view(s, axis);
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t i = 0; i < v.inner; ++i) f(static_cast<std::size_t>((o * v.dim + index) * v.inner + i));
}

struct Unit {
  std::int64_t index;
  double score;
  bool already;
};

double norm_of(const std::vector<double>& vals, PruneCriterion c) {
  double acc = 0;
  for (double x : vals) acc += c == PruneCriterion::l2 ? x * x : std::fabs(x);
  return c == PruneCriterion::l2 ? std::sqrt(acc) : acc;
}

bool masked_at(const MaskMap& em, const std::string& name, std::size_t i) {
  auto it = em.find(name);
  return it != em.end() && !it->second[i];
}

struct LayerUnits {
  std::string layer;
  std::vector<Unit> units;
};

std::vector<std::int64_t> parse_blocks(const SegModel& model, const std::vector<std::string>& params) {
  std::set<std::int64_t> blocks;
  for (const auto& name : params) {
    bool ok = false;
    for (std::int64_t b = 0; b < model.config.num_blocks && !ok; ++b)
      for (const char* p : {"q", "k", "v", "o"})
        if (name == "block." + std::to_string(b) + ".attn." + p + ".w") {
          blocks.insert(b);
          ok = true;
        }
    if (!ok) throw ContractError("head granularity does not apply to parameter " + name);
  }
  return {blocks.begin(), blocks.end()};
}

std::vector<LayerUnits> collect_units(const SegModel& model, const PruneSpec& spec) {
  spec.validate();
  const auto params = scope_params(model, spec);
  const auto em = effective_masks(model);
  std::vector<LayerUnits> out;

  if (spec.granularity == Granularity::head) {
    const auto& c = model.config;
    const std::int64_t dh = c.effective_head_dim(), a = c.attention_dim(), d = c.embed_dim;
    for (auto b : parse_blocks(model, params)) {
      const std::string bn = "block." + std::to_string(b);
      LayerUnits lu{bn, {}};
      for (std::int64_t h = 0; h < c.num_heads; ++h) {
        std::vector<double> vals;
        for (const char* p : {"q", "k", "v"}) {
          const auto w = model.param(bn + ".attn." + p + ".w").to_vector();
          for (std::int64_t r = 0; r < d; ++r)
            for (std::int64_t j = h * dh; j < (h + 1) * dh; ++j) vals.push_back(w[r * a + j]);
        }
        const auto wo = model.param(bn + ".attn.o.w").to_vector();
        for (std::int64_t r = h * dh; r < (h + 1) * dh; ++r)
          for (std::int64_t j = 0; j < d; ++j) vals.push_back(wo[r * d + j]);
        const bool already =
            !model.head_mask.empty() && !model.head_mask[static_cast<std::size_t>(b)][static_cast<std::size_t>(h)];
        lu.units.push_back({h, norm_of(vals, spec.criterion), already});
      }
      out.push_back(std::move(lu));
    }
    return out;
  }

  for (const auto& name : params) {
    const Tensor& w = model.param(name);
    const auto vals = w.to_vector();
    LayerUnits lu{name, {}};
    if (spec.granularity == Granularity::unstructured) {
      for (std::size_t i = 0; i < vals.size(); ++i)
        lu.units.push_back({static_cast<std::int64_t>(i), std::fabs(vals[i]), masked_at(em, name, i)});
    } else {
      if (w.rank() != 4 || !name.ends_with(".w"))
        throw ContractError(to_string(spec.granularity) + " granularity applies to conv kernels, not " + name);
      const std::size_t axis = spec.granularity == Granularity::filter ? 0 : 1;
      for (std::int64_t u = 0; u < w.dim(axis); ++u) {
        std::vector<double> slice;
        bool all_masked = true;
        for_slice(w.shape(), axis, u, [&](std::size_t i) {
          slice.push_back(vals[i]);
          all_masked = all_masked && masked_at(em, name, i);
        });
        lu.units.push_back({u, norm_of(slice, spec.criterion), all_masked});
      }
    }
    out.push_back(std::move(lu));
  }
  return out;
}

bool by_score(const Unit& x, const Unit& y) {
  if (x.score != y.score) return x.score < y.score;
  return x.index < y.index;
}

std::vector<std::uint8_t>& ones_for(MaskMap& masks, const SegModel& model, const std::string& name) {
  auto& m = masks[name];
  if (m.empty()) m.assign(static_cast<std::size_t>(model.param(name).numel()), 1);
  return m;
}

}  // namespace

std::vector<UnitScore> score_units(const SegModel& model, const PruneSpec& spec) {
  std::vector<UnitScore> out;
  for (auto& lu : collect_units(model, spec)) {
    std::sort(lu.units.begin(), lu.units.end(), by_score);
    for (const auto& u : lu.units) out.push_back({lu.layer, u.index, u.score, u.already});
  }
  return out;
}

PruneMask select_and_mask(const SegModel& model, const PruneSpec& spec) {
  const auto& c = model.config;
  if (spec.granularity == Granularity::head && spec.heads_to_keep > c.num_heads)
    throw ContractError("heads_to_keep " + std::to_string(spec.heads_to_keep) + " exceeds num_heads " +
                        std::to_string(c.num_heads));
  PruneMask mask;
  mask.granularity = spec.granularity;
  mask.scope_params = scope_params(model, spec);
  auto layers = collect_units(model, spec);
  if (spec.granularity == Granularity::head)
    mask.head_keep.assign(static_cast<std::size_t>(c.num_blocks),
                          std::vector<std::uint8_t>(static_cast<std::size_t>(c.num_heads), 1));

  for (auto& lu : layers) {
    const auto u = static_cast<std::int64_t>(lu.units.size());
    const std::int64_t k = spec.granularity == Granularity::head && spec.heads_to_keep > 0
                               ? c.num_heads - spec.heads_to_keep
                               : static_cast<std::int64_t>(std::floor(spec.sparsity * static_cast<double>(u) + 1e-9));
    if (spec.granularity != Granularity::unstructured && k >= u && u > 0)
      throw ContractError("pruning would remove every unit of " + lu.layer);
    std::vector<Unit> order = lu.units;
    std::stable_sort(order.begin(), order.end(), [](const Unit& x, const Unit& y) {
      if (x.already != y.already) return x.already;
      return by_score(x, y);
    });
    std::set<std::int64_t> pruned;
    for (std::int64_t i = 0; i < k; ++i) pruned.insert(order[static_cast<std::size_t>(i)].index);
    // Existing masks stay in force even when they exceed the target.
    for (const auto& unit : lu.units)
      if (unit.already) pruned.insert(unit.index);
    if (spec.granularity != Granularity::unstructured && static_cast<std::int64_t>(pruned.size()) >= u)
      throw ContractError("pruning would remove every unit of " + lu.layer);

    std::sort(lu.units.begin(), lu.units.end(), by_score);
    for (const auto& unit : lu.units) mask.ledger.push_back({lu.layer, unit.index, unit.score, pruned.count(unit.index) > 0});

    for (auto p : pruned) {
      switch (spec.granularity) {
        case Granularity::unstructured:
          ones_for(mask.masks, model, lu.layer)[static_cast<std::size_t>(p)] = 0;
          break;
        case Granularity::filter: {
          const Tensor& w = model.param(lu.layer);
          auto& m = ones_for(mask.masks, model, lu.layer);
          for_slice(w.shape(), 0, p, [&](std::size_t i) { m[i] = 0; });
          const std::string layer = layer_of(lu.layer);
          if (model.has_param(layer + ".b")) ones_for(mask.masks, model, layer + ".b")[static_cast<std::size_t>(p)] = 0;
          for (const auto& cons : consumers(c, layer)) {
            const Tensor& cw = model.param(cons + ".w");
            auto& cm = ones_for(mask.masks, model, cons + ".w");
            for (auto pos : consumer_positions(c, cons, p)) for_slice(cw.shape(), 1, pos, [&](std::size_t i) { cm[i] = 0; });
          }
          break;
        }
        case Granularity::channel: {
          const Tensor& w = model.param(lu.layer);
          auto& m = ones_for(mask.masks, model, lu.layer);
          for_slice(w.shape(), 1, p, [&](std::size_t i) { m[i] = 0; });
          break;
        }
        case Granularity::head: {
          const std::int64_t b = std::stoll(lu.layer.substr(6));
          mask.head_keep[static_cast<std::size_t>(b)][static_cast<std::size_t>(p)] = 0;
          const std::int64_t dh = c.effective_head_dim(), a = c.attention_dim(), d = c.embed_dim;
          for (const char* proj : {"q", "k", "v"}) {
            auto& m = ones_for(mask.masks, model, lu.layer + ".attn." + proj + ".w");
            for (std::int64_t r = 0; r < d; ++r)
              for (std::int64_t j = p * dh; j < (p + 1) * dh; ++j) m[static_cast<std::size_t>(r * a + j)] = 0;
          }
          auto& mo = ones_for(mask.masks, model, lu.layer + ".attn.o.w");
          for (std::int64_t r = p * dh; r < (p + 1) * dh; ++r)
            for (std::int64_t j = 0; j < d; ++j) mo[static_cast<std::size_t>(r * d + j)] = 0;
          break;
        }
      }
    }
  }
  return mask;
}

SegModel apply_mask(const SegModel& model, const PruneMask& mask) {
  SegModel out = model.clone();
  for (const auto& [name, keep] : mask.masks) {
    auto& m = ones_for(out.weight_masks, out, name);
    if (m.size() != keep.size()) throw DimensionError("mask size does not match parameter " + name);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] && keep[i];
  }
  if (!mask.head_keep.empty()) {
    if (out.head_mask.empty()) out.head_mask = mask.head_keep;
    else
      for (std::size_t b = 0; b < out.head_mask.size(); ++b)
        for (std::size_t h = 0; h < out.head_mask[b].size(); ++h)
          out.head_mask[b][h] = out.head_mask[b][h] && mask.head_keep.at(b).at(h);
  }
  out.apply_masks();
  return out;
}

SegModel prune(const SegModel& model, const PruneSpec& spec) {
  return apply_mask(model, select_and_mask(model, spec));
}

// ------------------------------------------------------------------ materialize

namespace {

/// Keeps `indices` along `axis` of a parameter and of its weight mask.
void gather_param(SegModel& m, const std::string& name, std::size_t axis, const std::vector<std::int64_t>& indices) {
  const Tensor& t = m.param(name);
  Shape shape = t.shape();
  const auto v = view(shape, axis);
  shape[axis] = static_cast<std::int64_t>(indices.size());
  auto gather = [&](const auto& src, auto& dst) {
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::size_t k = 0; k < indices.size(); ++k)
        for (std::int64_t i = 0; i < v.inner; ++i)
          dst.push_back(src[static_cast<std::size_t>((o * v.dim + indices[k]) * v.inner + i)]);
  };
  Tensor out = visit_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = t.data<T>();
    std::vector<double> dst;
    gather(src, dst);
    return Tensor::from_values(shape, std::move(dst), t.dtype());
  });
  m.params[name] = out;
  auto it = m.weight_masks.find(name);
  if (it != m.weight_masks.end()) {
    std::vector<std::uint8_t> dst;
    gather(it->second, dst);
    if (std::all_of(dst.begin(), dst.end(), [](std::uint8_t k) { return k != 0; })) m.weight_masks.erase(it);
    else it->second = std::move(dst);
  }
}

std::map<std::string, std::vector<std::int64_t>> kept_by_layer(const PruneMask& mask) {
  std::map<std::string, std::vector<std::int64_t>> kept;
  std::map<std::string, bool> any_pruned;
  for (const auto& u : mask.ledger) {
    if (!u.pruned) kept[u.layer].push_back(u.unit);
    any_pruned[u.layer] = any_pruned[u.layer] || u.pruned;
  }
  for (auto& [layer, k] : kept) std::sort(k.begin(), k.end());
  for (auto it = kept.begin(); it != kept.end();) {
    if (!any_pruned[it->first]) it = kept.erase(it);
    else ++it;
  }
  return kept;
}

void set_select(ModelConfig& c, const std::string& layer, std::vector<std::int64_t> sel, std::int64_t producer_width) {
  bool identity = static_cast<std::int64_t>(sel.size()) == producer_width;
  for (std::size_t i = 0; identity && i < sel.size(); ++i) identity = sel[i] == static_cast<std::int64_t>(i);
  if (identity) c.input_channel_select.erase(layer);
  else c.input_channel_select[layer] = std::move(sel);
}

std::int64_t producer_width(const ModelConfig& c, const std::string& layer) {
  if (layer == "stem.0") return 3;
  for (std::size_t i = 1; i < c.stem_channels.size(); ++i)
    if (layer == "stem." + std::to_string(i)) return c.stem_channels[i - 1];
  if (layer == "embed" || layer == "decoder.lat_stem") return c.stem_channels.back();
  if (layer == "decoder.lat_tok") return c.embed_dim;
  return c.decoder_channels;  // decoder.fuse, head
}

}  // namespace

SegModel materialize(const SegModel& masked, const PruneMask& mask) {
  if (mask.granularity == Granularity::unstructured)
    throw ContractError("unstructured sparsity cannot be materialized");
  SegModel out = masked.clone();
  auto& c = out.config;
  const auto kept = kept_by_layer(mask);

  if (mask.granularity == Granularity::filter) {
    for (const auto& [weight, keep] : kept) {
      const std::string layer = layer_of(weight);
      std::size_t stem = c.stem_channels.size();
      for (std::size_t i = 0; i < c.stem_channels.size(); ++i)
        if (layer == "stem." + std::to_string(i)) stem = i;
      if (stem == c.stem_channels.size())
        throw ContractError("filter pruning of " + layer + " cannot be materialized");
      gather_param(out, layer + ".w", 0, keep);
      gather_param(out, layer + ".b", 0, keep);
      c.stem_channels[stem] = static_cast<std::int64_t>(keep.size());
      std::map<std::int64_t, std::int64_t> renumber;
      for (std::size_t k = 0; k < keep.size(); ++k) renumber[keep[k]] = static_cast<std::int64_t>(k);
      for (const auto& cons : consumers(masked.config, layer)) {
        auto it = c.input_channel_select.find(cons);
        std::vector<std::int64_t> positions, sel;
        if (it == c.input_channel_select.end()) {
          positions = keep;
          sel.resize(keep.size());
          std::iota(sel.begin(), sel.end(), std::int64_t{0});
        } else {
          for (std::size_t p = 0; p < it->second.size(); ++p)
            if (renumber.count(it->second[p])) {
              positions.push_back(static_cast<std::int64_t>(p));
              sel.push_back(renumber[it->second[p]]);
            }
        }
        gather_param(out, cons + ".w", 1, positions);
        set_select(c, cons, std::move(sel), static_cast<std::int64_t>(keep.size()));
      }
    }
  } else if (mask.granularity == Granularity::channel) {
    for (const auto& [weight, keep] : kept) {
      const std::string layer = layer_of(weight);
      auto it = c.input_channel_select.find(layer);
      std::vector<std::int64_t> sel;
      for (auto p : keep) sel.push_back(it == c.input_channel_select.end() ? p : it->second[static_cast<std::size_t>(p)]);
      gather_param(out, weight, 1, keep);
      set_select(c, layer, std::move(sel), producer_width(c, layer));
    }
  } else {
    if (kept.empty()) {
      out.head_mask.clear();
      return out;
    }
    const std::int64_t dh = c.effective_head_dim(), d = c.embed_dim;
    std::size_t heads = 0;
    for (const auto& [block, keep] : kept) {
      if (heads != 0 && keep.size() != heads)
        throw ContractError("materialized head pruning requires the same head count in every block");
      heads = keep.size();
    }
    if (static_cast<std::int64_t>(kept.size()) != c.num_blocks)
      throw ContractError("materialized head pruning requires every block to be pruned alike");
    for (const auto& [block, keep] : kept) {
      std::vector<std::int64_t> cols;
      for (auto h : keep)
        for (std::int64_t j = h * dh; j < (h + 1) * dh; ++j) cols.push_back(j);
      for (const char* p : {"q", "k", "v"}) gather_param(out, block + ".attn." + p + ".w", 1, cols);
      gather_param(out, block + ".attn.o.w", 0, cols);
    }
    c.num_heads = static_cast<std::int64_t>(heads);
    c.head_dim = (d % c.num_heads == 0 && d / c.num_heads == dh) ? 0 : dh;
    out.head_mask.clear();
  }
  c.validate();
  return out;
}

SparsityReport sparsity_report(const SegModel& model, const PruneMask& mask) {
  SparsityReport r;
  const auto em = effective_masks(model);
  for (const auto& name : mask.scope_params) {
    const std::int64_t total = model.param(name).numel();
    std::int64_t masked = 0;
    if (auto it = em.find(name); it != em.end())
      masked = static_cast<std::int64_t>(std::count(it->second.begin(), it->second.end(), std::uint8_t{0}));
    r.per_layer[name] = static_cast<double>(masked) / static_cast<double>(total);
    r.scope_masked += masked;
    r.scope_total += total;
  }
  r.global = r.scope_total == 0 ? 0.0 : static_cast<double>(r.scope_masked) / static_cast<double>(r.scope_total);
  r.params_kept = count_params(model, false);
  r.params_masked = count_params(model, true) - r.params_kept;
  return r;
}

// ------------------------------------------------------------------ iterative

void IterativeSchedule::validate() const {
  if (!(step_fraction > 0 && step_fraction < 1)) throw ConfigError("step_fraction must be in (0, 1)");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (finetune_iterations < 0) throw ConfigError("finetune_iterations must be >= 0");
}

double IterativeSchedule::cumulative_sparsity(std::int64_t round) const {
  return 1.0 - std::pow(1.0 - step_fraction, static_cast<double>(round));
}

nlohmann::json IterativeSchedule::to_json() const {
  return {{"step_fraction", step_fraction}, {"rounds", rounds}, {"finetune_iterations", finetune_iterations}};
}

IterativeSchedule IterativeSchedule::from_json(const nlohmann::json& j, const IterativeSchedule& base) {
  if (!j.is_object()) throw ConfigError("iterative schedule must be an object");
  for (const auto& [key, value] : j.items())
    if (key != "step_fraction" && key != "rounds" && key != "finetune_iterations")
      throw ConfigError("unknown schedule key '" + key + "'");
  IterativeSchedule s = base;
  try {
    if (j.contains("step_fraction")) s.step_fraction = j.at("step_fraction").get<double>();
    if (j.contains("rounds")) s.rounds = j.at("rounds").get<std::int64_t>();
    if (j.contains("finetune_iterations")) s.finetune_iterations = j.at("finetune_iterations").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("iterative schedule: ") + e.what());
  }
  s.validate();
  return s;
}

IterativeResult iterative_prune(const SegModel& model, const Dataset& train_set, const Dataset& eval,
                                const PruneSpec& spec, const IterativeSchedule& schedule,
                                const TrainConfig& train_config) {
  schedule.validate();
  IterativeResult result;
  result.model = model.clone();
  for (std::int64_t r = 1; r <= schedule.rounds; ++r) {
    PruneSpec step = spec;
    step.heads_to_keep = 0;
    step.sparsity = schedule.cumulative_sparsity(r);
    result.mask = select_and_mask(result.model, step);
    result.model = apply_mask(result.model, result.mask);
    if (schedule.finetune_iterations > 0) {
      TrainConfig tc = train_config;
      tc.iterations = schedule.finetune_iterations;
      tc.seed = mix_seed(train_config.seed, static_cast<std::uint64_t>(r));
      result.model = train(result.model, train_set, tc).model;
    }
    std::int64_t pruned = 0;
    for (const auto& u : result.mask.ledger) pruned += u.pruned;
    result.trace.push_back({r, step.sparsity,
                            static_cast<double>(pruned) / static_cast<double>(result.mask.ledger.size()),
                            evaluate(result.model, eval).mean_iou});
  }
  return result;
}

}  // namespace evt
