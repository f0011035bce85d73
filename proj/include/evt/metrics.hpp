#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace evt {

struct SegModel;
struct Dataset;

/// counts(g, p) = pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes);

  std::int64_t num_classes() const { return k_; }
  std::int64_t at(std::int64_t gt, std::int64_t pred) const { return counts_[gt * k_ + pred]; }
  std::int64_t total() const;
  std::int64_t tp(std::int64_t c) const { return at(c, c); }
  std::int64_t fp(std::int64_t c) const;  // column c minus TP
  std::int64_t fn(std::int64_t c) const;  // row c minus TP

  /// Throws DimensionError on size mismatch and DataError on ids >= K.
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::int64_t k_;
  std::vector<std::int64_t> counts_;
};

ConfusionMatrix accumulate_confusion(std::span<const std::uint8_t> pred,
                                     std::span<const std::uint8_t> gt, std::int64_t num_classes);

/// How a class absent from both prediction and ground truth enters the
/// per-image mean (its IoU is 0/0).
enum class AbsentClassPolicy {
  exclude,  // mean over classes present in gt ∪ pred (default)
  zero,     // mean over all K classes, absent classes count as 0
};

/// Per-image IoU: mean over classes of TP/(TP+FP+FN).
double image_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                 std::int64_t num_classes, AbsentClassPolicy policy = AbsentClassPolicy::exclude);
double image_iou(const ConfusionMatrix& cm, AbsentClassPolicy policy = AbsentClassPolicy::exclude);

/// Arithmetic mean of per-image IoUs; throws ContractError when empty.
double mean_iou(std::span<const double> per_image);

/// trace / total; throws ContractError for an empty matrix.
double pixel_accuracy(const ConfusionMatrix& cm);

/// mean_iou / mean_execution_seconds (= mean_iou × FPS). Time must be > 0.
double score(double mean_iou, double mean_execution_seconds);

struct EvalReport {
  std::int64_t n = 0;
  std::vector<double> per_image_iou;
  double mean_iou = 0;
  double pixel_accuracy = 0;
  /// Dataset-level IoU per class; negative for classes never seen.
  std::vector<double> per_class_iou;
  ConfusionMatrix confusion{1};
};

/// Builds a report from per-image prediction/ground-truth pairs, each of
/// pixels_per_image entries laid out back to back.
EvalReport evaluate_predictions(std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> gt, std::int64_t pixels_per_image,
                                std::int64_t num_classes);

struct BenchReport {
  std::int64_t warmup_runs = 0;
  std::int64_t timed_runs = 0;
  std::int64_t images_per_run = 0;
  std::vector<double> run_seconds;  // wall clock per pass over the dataset
  double mean_time = 0;             // seconds per image
  double std_time = 0;              // across runs, per image
  bool std_defined = false;         // false when timed_runs == 1
  double fps = 0;
  double score = 0;                 // filled by attach_score
};

/// Times forward passes one image at a time on a steady clock. Each run is
/// one pass over the dataset; warmup runs are discarded.
BenchReport bench_latency(const SegModel& model, const Dataset& dataset, std::int64_t warmup,
                          std::int64_t runs);

void attach_score(BenchReport& bench, const EvalReport& eval);

}  // namespace evt
