#include "evt/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "evt/ops.hpp"
#include "evt/rng.hpp"

namespace evt {

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam eps must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"iterations", iterations},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd_momentum"},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"momentum", momentum},
          {"seed", seed},
          {"loss", loss == LossKind::cross_entropy ? "cross_entropy" : "distill"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  static const std::set<std::string> known{"iterations", "batch_size", "learning_rate", "optimizer",
                                           "beta1",      "beta2",      "adam_eps",      "momentum",
                                           "seed",       "loss"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown train config key '" + key + "'");
  TrainConfig c = base;
  try {
    if (j.contains("iterations")) c.iterations = j.at("iterations").get<std::int64_t>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::int64_t>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("beta1")) c.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) c.beta2 = j.at("beta2").get<double>();
    if (j.contains("adam_eps")) c.adam_eps = j.at("adam_eps").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("optimizer")) {
      const auto s = j.at("optimizer").get<std::string>();
      if (s == "adam") c.optimizer = OptimizerKind::adam;
      else if (s == "sgd_momentum") c.optimizer = OptimizerKind::sgd_momentum;
      else throw ConfigError("unknown optimizer '" + s + "'");
    }
    if (j.contains("loss")) {
      const auto s = j.at("loss").get<std::string>();
      if (s == "cross_entropy") c.loss = LossKind::cross_entropy;
      else if (s == "distill") c.loss = LossKind::distill;
      else throw ConfigError("unknown loss '" + s + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

Tensor CrossEntropyObjective::loss(const SegModel& model, const Tensor& images,
                                   std::span<const std::uint8_t> masks, std::span<const std::size_t>) {
  return cross_entropy(forward_segment(model, images), masks);
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : n_(dataset_size), batch_(batch_size), seed_(seed) {
  if (n_ == 0) throw ContractError("cannot sample batches from an empty dataset");
  refill();
}

void BatchSampler::refill() {
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(mix_seed(seed_, epoch_++));
  for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> batch;
  batch.reserve(batch_);
  while (batch.size() < batch_) {
    if (cursor_ == n_) refill();
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

void Optimizer::step(const std::map<std::string, Tensor*>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, tensor] : params) {
    if (!tensor->has_grad()) continue;
    auto& st = state_[name];
    const auto n = static_cast<std::size_t>(tensor->numel());
    if (st.m.empty()) st.m.assign(n, 0.0);
    if (config_.optimizer == OptimizerKind::adam && st.v.empty()) st.v.assign(n, 0.0);
    visit_dtype(tensor->dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = tensor->mutable_data<T>();
      auto g = tensor->grad_data<T>();
      if (config_.optimizer == OptimizerKind::adam) {
        for (std::size_t i = 0; i < n; ++i) {
          const double gi = g[i];
          st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * gi;
          st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * gi * gi;
          const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
          w[i] = static_cast<T>(w[i] - config_.learning_rate * mhat / (std::sqrt(vhat) + config_.adam_eps));
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          st.m[i] = config_.momentum * st.m[i] + static_cast<double>(g[i]);
          w[i] = static_cast<T>(w[i] - config_.learning_rate * st.m[i]);
        }
      }
    });
  }
}

namespace {

bool all_finite(const Tensor& t) {
  return std::visit(
      [](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x)) return false;
        return true;
      },
      t.storage());
}

void zero_masked_grads(std::map<std::string, Tensor*>& params,
                       const std::map<std::string, std::vector<std::uint8_t>>& masks) {
  for (const auto& [name, keep] : masks) {
    auto it = params.find(name);
    if (it == params.end() || !it->second->has_grad()) continue;
    Tensor& t = *it->second;
    auto& g = t.node().grad;
    std::visit(
        [&](auto& v) {
          for (std::size_t i = 0; i < v.size(); ++i)
            if (!keep[i]) v[i] = 0;
        },
        g);
  }
}

}  // namespace

TrainReport train(const SegModel& initial, const Dataset& dataset, const TrainConfig& config) {
  CrossEntropyObjective ce;
  return train(initial, dataset, config, ce);
}

TrainReport train(const SegModel& initial, const Dataset& dataset, const TrainConfig& config,
                  Objective& objective) {
  config.validate();
  if (dataset.empty()) throw ContractError("train requires a non-empty dataset");
  if (dataset.spec.height != initial.config.height || dataset.spec.width != initial.config.width)
    throw DimensionError("dataset resolution does not match the model");
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.seed = config.seed;
  report.model = initial.clone();
  SegModel& model = report.model;
  model.set_requires_grad(true);
  model.apply_masks();
  const auto masks = effective_masks(model);

  std::map<std::string, Tensor*> params;
  for (auto& [name, t] : model.params) params[name] = &t;
  for (auto& [name, t] : objective.extra_parameters()) params["aux." + name] = t;

  Optimizer optimizer(config);
  BatchSampler sampler(dataset.size(), static_cast<std::size_t>(config.batch_size), config.seed);
  report.loss_trace.reserve(static_cast<std::size_t>(config.iterations));
  for (std::int64_t it = 0; it < config.iterations; ++it) {
    const auto batch = sampler.next();
    const Tensor images = dataset.images(batch);
    const auto targets = dataset.masks(batch);
    for (auto& [name, t] : params) t->zero_grad();
    Tensor loss = objective.loss(model, images, targets, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::string culprit = "<none: parameters finite>";
      for (const auto& [name, t] : params)
        if (!all_finite(*t)) {
          culprit = name;
          break;
        }
      throw NumericError("non-finite loss at iteration " + std::to_string(it) +
                         " (offending parameter: " + culprit + ")");
    }
    loss.backward();
    zero_masked_grads(params, masks);
    optimizer.step(params);
    model.apply_masks();
    report.loss_trace.push_back(value);
  }
  for (auto& [name, t] : params) t->zero_grad();
  model.set_requires_grad(false);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

EvalReport evaluate(const SegModel& model, const Dataset& dataset, std::int64_t batch_size) {
  if (dataset.empty()) throw ContractError("evaluate requires a non-empty dataset");
  if (batch_size < 1) throw ContractError("evaluate requires batch_size >= 1");
  NoGradGuard no_grad;
  std::vector<std::uint8_t> pred, gt;
  for (std::size_t begin = 0; begin < dataset.size(); begin += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> batch;
    for (std::size_t i = begin; i < std::min(dataset.size(), begin + static_cast<std::size_t>(batch_size)); ++i)
      batch.push_back(i);
    const auto p = argmax_classes(forward_segment(model, dataset.images(batch)));
    const auto g = dataset.masks(batch);
    pred.insert(pred.end(), p.begin(), p.end());
    gt.insert(gt.end(), g.begin(), g.end());
  }
  return evaluate_predictions(pred, gt, dataset.pixels_per_image(), model.config.num_classes);
}

}  // namespace evt
