#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "evt/model.hpp"
#include "evt/synth.hpp"
#include "evt/train.hpp"

namespace evt {

enum class LogitMode { logit_mse, logit_kl };
enum class FeatureMode { mimic, generation };

struct FeatureTap {
  std::int64_t teacher_block = 0;
  std::int64_t student_block = 0;
  FeatureMode mode = FeatureMode::mimic;
  bool operator==(const FeatureTap&) const = default;
};

struct DistillSpec {
  double temperature = 1.0;  // logit_kl only
  LogitMode mode = LogitMode::logit_mse;
  /// Unset selects the default pair: mimic on the first blocks and
  /// generation on the last blocks of teacher and student.
  std::optional<std::vector<FeatureTap>> feature_taps;
  double alpha_task = 1.0;
  double alpha_logit = 1.0;
  double alpha_feat = 0.1;

  std::vector<FeatureTap> resolved_taps(const ModelConfig& teacher, const ModelConfig& student) const;
  void validate() const;
  nlohmann::json to_json() const;
  static DistillSpec from_json(const nlohmann::json& j, const DistillSpec& base);
  static DistillSpec from_json(const nlohmann::json& j);
};

/// Mean squared difference over all elements.
Tensor logit_mse_loss(const Tensor& student_logits, const Tensor& teacher_logits);

/// T² · mean over pixels of KL(softmax(t/T) ‖ softmax(s/T)) along the class
/// axis of N×K×H×W logits. The teacher side is treated as a constant.
Tensor logit_kl_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

/// MSE between student_feat·align and teacher_feat, both N×T×d.
Tensor feature_mimic_loss(const Tensor& student_feat, const Tensor& teacher_feat, const Tensor& align);

/// Two-layer ReLU transform from student width to teacher width.
struct Generator {
  Tensor w1, b1, w2, b2;
  static Generator init(std::int64_t in, std::int64_t hidden, std::int64_t out, std::uint64_t seed);
  Tensor apply(const Tensor& rows) const;
};

Tensor feature_generation_loss(const Tensor& student_feat, const Tensor& teacher_feat, const Generator& g);

/// α_task·CE + α_logit·logit loss + α_feat·Σ feature losses. Terms with a
/// zero weight are not evaluated. Teacher outputs are cached per dataset
/// sample; the teacher itself is never modified.
class DistillObjective final : public Objective {
 public:
  DistillObjective(const SegModel& teacher, const ModelConfig& student, const DistillSpec& spec,
                   const Dataset& dataset, std::uint64_t seed);
  Tensor loss(const SegModel& model, const Tensor& images, std::span<const std::uint8_t> masks,
              std::span<const std::size_t> indices) override;
  std::map<std::string, Tensor*> extra_parameters() override;

 private:
  struct Cached {
    std::vector<double> logits;
    std::map<std::int64_t, std::vector<double>> features;
  };
  void fill_cache(std::span<const std::size_t> indices, const Tensor& images);

  SegModel teacher_;
  DistillSpec spec_;
  std::vector<FeatureTap> taps_;
  std::vector<std::int64_t> teacher_taps_, student_taps_;
  std::map<std::size_t, Tensor> aligns_;
  std::map<std::size_t, Generator> generators_;
  std::map<std::size_t, Cached> cache_;
  bool need_teacher_ = false;
};

TrainReport distill_train(const SegModel& student, const SegModel& teacher, const Dataset& dataset,
                          const DistillSpec& spec, const TrainConfig& config);

}  // namespace evt
