#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "evt/metrics.hpp"
#include "evt/model.hpp"
#include "evt/synth.hpp"

namespace evt {

enum class OptimizerKind { adam, sgd_momentum };
enum class LossKind { cross_entropy, distill };

struct TrainConfig {
  std::int64_t iterations = 2000;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.9;  // sgd_momentum only
  std::uint64_t seed = 0;
  LossKind loss = LossKind::cross_entropy;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  std::vector<double> loss_trace;
  SegModel model;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
};

/// Loss minimized by train(). Implementations may own extra trainable
/// tensors that are optimized together with the model. `indices` are the
/// dataset positions of the batch, usable as a cache key.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual Tensor loss(const SegModel& model, const Tensor& images, std::span<const std::uint8_t> masks,
                      std::span<const std::size_t> indices) = 0;
  virtual std::map<std::string, Tensor*> extra_parameters() { return {}; }
};

/// Pixel-wise cross-entropy averaged over pixels.
class CrossEntropyObjective final : public Objective {
 public:
  Tensor loss(const SegModel& model, const Tensor& images, std::span<const std::uint8_t> masks,
              std::span<const std::size_t> indices) override;
};

/// Deterministic mini-batch order: consecutive slices of per-epoch
/// permutations, each drawn from (seed, epoch).
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void refill();
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}
  /// Applies one update to every tensor that holds a gradient.
  void step(const std::map<std::string, Tensor*>& params);

 private:
  struct State {
    std::vector<double> m, v;
  };
  TrainConfig config_;
  std::map<std::string, State> state_;
  std::int64_t t_ = 0;
};

/// Trains a copy of `initial`. Weight masks of the model are enforced after
/// every optimizer step and masked entries receive zero gradient.
TrainReport train(const SegModel& initial, const Dataset& dataset, const TrainConfig& config);
TrainReport train(const SegModel& initial, const Dataset& dataset, const TrainConfig& config,
                  Objective& objective);

/// Frozen-model evaluation in batches of `batch_size` images.
EvalReport evaluate(const SegModel& model, const Dataset& dataset, std::int64_t batch_size = 16);

}  // namespace evt
