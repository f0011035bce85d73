#include "evt/distill.hpp"

#include <cmath>
#include <set>

#include "evt/errors.hpp"
#include "evt/ops.hpp"
#include "evt/rng.hpp"

namespace evt {

std::vector<FeatureTap> DistillSpec::resolved_taps(const ModelConfig& teacher, const ModelConfig& student) const {
  if (feature_taps) return *feature_taps;
  if (teacher.num_blocks < 1 || student.num_blocks < 1) return {};
  std::vector<FeatureTap> taps{{0, 0, FeatureMode::mimic}};
  const FeatureTap late{teacher.num_blocks - 1, student.num_blocks - 1, FeatureMode::generation};
  if (late.teacher_block != 0 || late.student_block != 0) taps.push_back(late);
  return taps;
}

void DistillSpec::validate() const {
  if (!(temperature > 0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  for (double a : {alpha_task, alpha_logit, alpha_feat})
    if (!(a >= 0) || !std::isfinite(a)) throw ConfigError("distillation weights must be finite and >= 0");
}

namespace {

const char* mode_name(FeatureMode m) { return m == FeatureMode::mimic ? "mimic" : "generation"; }

FeatureMode feature_mode(const std::string& s) {
  if (s == "mimic") return FeatureMode::mimic;
  if (s == "generation") return FeatureMode::generation;
  throw ConfigError("unknown feature mode '" + s + "'");
}

}  // namespace

nlohmann::json DistillSpec::to_json() const {
  nlohmann::json j{{"temperature", temperature},
                   {"mode", mode == LogitMode::logit_mse ? "logit_mse" : "logit_kl"},
                   {"alpha_task", alpha_task},
                   {"alpha_logit", alpha_logit},
                   {"alpha_feat", alpha_feat}};
  if (feature_taps) {
    j["feature_taps"] = nlohmann::json::array();
    for (const auto& t : *feature_taps)
      j["feature_taps"].push_back({{"teacher_block", t.teacher_block},
                                   {"student_block", t.student_block},
                                   {"mode", mode_name(t.mode)}});
  }
  return j;
}

DistillSpec DistillSpec::from_json(const nlohmann::json& j) { return from_json(j, DistillSpec{}); }

DistillSpec DistillSpec::from_json(const nlohmann::json& j, const DistillSpec& base) {
  if (!j.is_object()) throw ConfigError("distill spec must be an object");
  static const std::set<std::string> known{"temperature", "mode",        "alpha_task",
                                           "alpha_logit", "alpha_feat", "feature_taps"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown distill spec key '" + key + "'");
  DistillSpec s = base;
  try {
    if (j.contains("temperature")) s.temperature = j.at("temperature").get<double>();
    if (j.contains("mode")) {
      const auto m = j.at("mode").get<std::string>();
      if (m == "logit_mse") s.mode = LogitMode::logit_mse;
      else if (m == "logit_kl") s.mode = LogitMode::logit_kl;
      else throw ConfigError("unknown logit mode '" + m + "'");
    }
    if (j.contains("alpha_task")) s.alpha_task = j.at("alpha_task").get<double>();
    if (j.contains("alpha_logit")) s.alpha_logit = j.at("alpha_logit").get<double>();
    if (j.contains("alpha_feat")) s.alpha_feat = j.at("alpha_feat").get<double>();
    if (j.contains("feature_taps")) {
      std::vector<FeatureTap> taps;
      for (const auto& t : j.at("feature_taps")) {
        for (const auto& [key, value] : t.items())
          if (key != "teacher_block" && key != "student_block" && key != "mode")
            throw ConfigError("unknown feature tap key '" + key + "'");
        taps.push_back({t.at("teacher_block").get<std::int64_t>(), t.at("student_block").get<std::int64_t>(),
                        feature_mode(t.value("mode", std::string("mimic")))});
      }
      s.feature_taps = std::move(taps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("distill spec: ") + e.what());
  }
  s.validate();
  return s;
}

Tensor logit_mse_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape())
    throw DimensionError("logit shapes differ: " + to_string(student_logits.shape()) + " vs " +
                         to_string(teacher_logits.shape()));
  return mse_loss(student_logits, teacher_logits.detach());
}

Tensor logit_kl_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0)) throw ContractError("temperature must be > 0");
  if (student_logits.shape() != teacher_logits.shape())
    throw DimensionError("logit shapes differ: " + to_string(student_logits.shape()) + " vs " +
                         to_string(teacher_logits.shape()));
  if (student_logits.rank() < 2) throw DimensionError("logit_kl_loss expects a class axis at dim 1");
  Tensor log_pt;
  Tensor pt;
  {
    NoGradGuard no_grad;
    const Tensor t = scale(teacher_logits.detach(), 1.0 / temperature);
    log_pt = log_softmax(t, 1);
    pt = softmax(t, 1);
  }
  const Tensor log_ps = log_softmax(scale(student_logits, 1.0 / temperature), 1);
  const double pixels = static_cast<double>(student_logits.numel() / student_logits.dim(1));
  return scale(sum(mul(pt, sub(log_pt, log_ps))), temperature * temperature / pixels);
}

namespace {

std::pair<Tensor, Tensor> feature_rows(const Tensor& s, const Tensor& t) {
  if (s.rank() != 3 || t.rank() != 3) throw DimensionError("features must be N×tokens×width");
  if (s.dim(0) != t.dim(0) || s.dim(1) != t.dim(1))
    throw DimensionError("token grids differ: " + to_string(s.shape()) + " vs " + to_string(t.shape()));
  return {reshape(s, {s.dim(0) * s.dim(1), s.dim(2)}), reshape(t.detach(), {t.dim(0) * t.dim(1), t.dim(2)})};
}

}  // namespace

Tensor feature_mimic_loss(const Tensor& student_feat, const Tensor& teacher_feat, const Tensor& align) {
  auto [s, t] = feature_rows(student_feat, teacher_feat);
  if (align.rank() != 2 || align.dim(0) != s.dim(1) || align.dim(1) != t.dim(1))
    throw DimensionError("align must map student width to teacher width");
  return mse_loss(matmul(s, align), t);
}

Generator Generator::init(std::int64_t in, std::int64_t hidden, std::int64_t out, std::uint64_t seed) {
  Rng rng(seed);
  auto tn = [&](std::int64_t r, std::int64_t c) {
    std::vector<double> v(static_cast<std::size_t>(r * c));
    for (auto& x : v) x = rng.truncated_normal(0.02);
    return Tensor::from_values({r, c}, std::move(v), DType::f32);
  };
  Generator g;
  g.w1 = tn(in, hidden);
  g.b1 = Tensor::zeros({hidden});
  g.w2 = tn(hidden, out);
  g.b2 = Tensor::zeros({out});
  return g;
}

Tensor Generator::apply(const Tensor& rows) const {
  Tensor h = relu(add_bias(matmul(rows, w1), b1, 1));
  return add_bias(matmul(h, w2), b2, 1);
}

Tensor feature_generation_loss(const Tensor& student_feat, const Tensor& teacher_feat, const Generator& g) {
  auto [s, t] = feature_rows(student_feat, teacher_feat);
  if (g.w1.dim(0) != s.dim(1) || g.w2.dim(1) != t.dim(1))
    throw DimensionError("generator must map student width to teacher width");
  return mse_loss(g.apply(s), t);
}

// ------------------------------------------------------------------ objective

DistillObjective::DistillObjective(const SegModel& teacher, const ModelConfig& student, const DistillSpec& spec,
                                   const Dataset& dataset, std::uint64_t seed)
    : teacher_(teacher.clone()), spec_(spec) {
  spec.validate();
  const auto& tc = teacher.config;
  if (tc.height != student.height || tc.width != student.width)
    throw DimensionError("teacher and student resolutions differ");
  if (tc.height != dataset.spec.height || tc.width != dataset.spec.width)
    throw DimensionError("dataset resolution does not match the models");
  if (tc.num_classes != student.num_classes) throw DimensionError("teacher and student class counts differ");
  teacher_.set_requires_grad(false);
  taps_ = spec.resolved_taps(tc, student);
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    const auto& tap = taps_[i];
    if (tap.teacher_block < 0 || tap.teacher_block >= tc.num_blocks)
      throw IndexError("teacher tap " + std::to_string(tap.teacher_block) + " out of range");
    if (tap.student_block < 0 || tap.student_block >= student.num_blocks)
      throw IndexError("student tap " + std::to_string(tap.student_block) + " out of range");
    if (tc.tokens() != student.tokens()) throw DimensionError("teacher and student token grids differ");
    teacher_taps_.push_back(tap.teacher_block);
    student_taps_.push_back(tap.student_block);
    const std::uint64_t s = mix_seed(seed, 0xd157 + i);
    if (tap.mode == FeatureMode::mimic) {
      Rng rng(s);
      std::vector<double> v(static_cast<std::size_t>(student.embed_dim * tc.embed_dim));
      for (auto& x : v) x = rng.truncated_normal(0.02);
      aligns_[i] = Tensor::from_values({student.embed_dim, tc.embed_dim}, std::move(v), DType::f32);
    } else {
      generators_[i] = Generator::init(student.embed_dim, tc.embed_dim, tc.embed_dim, s);
    }
  }
  for (auto& [i, a] : aligns_) a.set_requires_grad(true);
  for (auto& [i, g] : generators_)
    for (Tensor* t : {&g.w1, &g.b1, &g.w2, &g.b2}) t->set_requires_grad(true);
  need_teacher_ = spec.alpha_logit > 0 || (spec.alpha_feat > 0 && !taps_.empty());
}

std::map<std::string, Tensor*> DistillObjective::extra_parameters() {
  std::map<std::string, Tensor*> out;
  if (!(spec_.alpha_feat > 0)) return out;
  for (auto& [i, a] : aligns_) out["align." + std::to_string(i)] = &a;
  for (auto& [i, g] : generators_) {
    const std::string n = "generator." + std::to_string(i);
    out[n + ".w1"] = &g.w1;
    out[n + ".b1"] = &g.b1;
    out[n + ".w2"] = &g.w2;
    out[n + ".b2"] = &g.b2;
  }
  return out;
}

void DistillObjective::fill_cache(std::span<const std::size_t> indices, const Tensor& images) {
  bool missing = false;
  for (auto i : indices) missing = missing || !cache_.count(i);
  if (!missing) return;
  NoGradGuard no_grad;
  const auto out = forward(teacher_, images, teacher_taps_);
  const auto n = static_cast<std::size_t>(indices.size());
  const auto logits = out.logits.to_vector();
  const std::size_t per = logits.size() / n;
  for (std::size_t b = 0; b < n; ++b) {
    if (cache_.count(indices[b])) continue;
    Cached c;
    c.logits.assign(logits.begin() + static_cast<std::ptrdiff_t>(b * per),
                    logits.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    for (const auto& [block, f] : out.features) {
      const auto v = f.to_vector();
      const std::size_t fper = v.size() / n;
      c.features[block].assign(v.begin() + static_cast<std::ptrdiff_t>(b * fper),
                               v.begin() + static_cast<std::ptrdiff_t>((b + 1) * fper));
    }
    cache_[indices[b]] = std::move(c);
  }
}

namespace {

Tensor stack_cached(const std::vector<const std::vector<double>*>& rows, Shape shape, DType dtype) {
  std::vector<double> v;
  for (const auto* r : rows) v.insert(v.end(), r->begin(), r->end());
  shape.insert(shape.begin(), static_cast<std::int64_t>(rows.size()));
  return Tensor::from_values(shape, std::move(v), dtype);
}

Tensor weighted(const Tensor& term, double alpha) { return alpha == 1.0 ? term : scale(term, alpha); }

Tensor accumulate(const Tensor& total, const Tensor& term) { return total.defined() ? add(total, term) : term; }

}  // namespace

Tensor DistillObjective::loss(const SegModel& model, const Tensor& images, std::span<const std::uint8_t> masks,
                              std::span<const std::size_t> indices) {
  const DType dt = model.dtype();
  for (auto& [i, a] : aligns_)
    if (a.dtype() != dt) a = a.to(dt).set_requires_grad(true);
  for (auto& [i, g] : generators_)
    for (Tensor* t : {&g.w1, &g.b1, &g.w2, &g.b2})
      if (t->dtype() != dt) *t = t->to(dt).set_requires_grad(true);

  const bool use_feat = spec_.alpha_feat > 0 && !taps_.empty();
  const auto out = forward(model, images, use_feat ? std::span<const std::int64_t>(student_taps_)
                                                   : std::span<const std::int64_t>());
  Tensor total;
  if (spec_.alpha_task > 0) total = weighted(cross_entropy(out.logits, masks), spec_.alpha_task);
  if (!need_teacher_) {
    if (!total.defined()) total = scale(sum(out.logits), 0.0);
    return total;
  }
  if (indices.size() != static_cast<std::size_t>(images.dim(0)))
    throw ContractError("distillation needs the dataset index of every batch image");
  fill_cache(indices, images);
  std::vector<const std::vector<double>*> rows;
  for (auto i : indices) rows.push_back(&cache_.at(i).logits);
  const Shape logit_shape(out.logits.shape().begin() + 1, out.logits.shape().end());

  if (spec_.alpha_logit > 0) {
    const Tensor t = stack_cached(rows, logit_shape, dt);
    const Tensor term = spec_.mode == LogitMode::logit_mse ? logit_mse_loss(out.logits, t)
                                                           : logit_kl_loss(out.logits, t, spec_.temperature);
    total = accumulate(total, weighted(term, spec_.alpha_logit));
  }
  if (use_feat) {
    for (std::size_t i = 0; i < taps_.size(); ++i) {
      const auto& tap = taps_[i];
      std::vector<const std::vector<double>*> frows;
      for (auto idx : indices) frows.push_back(&cache_.at(idx).features.at(tap.teacher_block));
      const Tensor tf = stack_cached(frows, {teacher_.config.tokens(), teacher_.config.embed_dim}, dt);
      const Tensor& sf = out.features.at(tap.student_block);
      const Tensor term = tap.mode == FeatureMode::mimic ? feature_mimic_loss(sf, tf, aligns_.at(i))
                                                         : feature_generation_loss(sf, tf, generators_.at(i));
      total = accumulate(total, weighted(term, spec_.alpha_feat));
    }
  }
  return total;
}

TrainReport distill_train(const SegModel& student, const SegModel& teacher, const Dataset& dataset,
                          const DistillSpec& spec, const TrainConfig& config) {
  DistillObjective objective(teacher, student.config, spec, dataset, config.seed);
  return train(student, dataset, config, objective);
}

}  // namespace evt
