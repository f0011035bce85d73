#include "evt/metrics.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "evt/errors.hpp"
#include "evt/model.hpp"
#include "evt/synth.hpp"

namespace evt {

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes) : k_(num_classes) {
  if (num_classes < 1) throw ContractError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::fp(std::int64_t c) const {
  std::int64_t col = 0;
  for (std::int64_t g = 0; g < k_; ++g) col += at(g, c);
  return col - tp(c);
}

std::int64_t ConfusionMatrix::fn(std::int64_t c) const {
  std::int64_t row = 0;
  for (std::int64_t p = 0; p < k_; ++p) row += at(c, p);
  return row - tp(c);
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw DimensionError("prediction and ground-truth sizes differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= k_ || gt[i] >= k_)
      throw DataError("class id " + std::to_string(std::max(pred[i], gt[i])) + " out of range for K=" +
                      std::to_string(k_));
    ++counts_[gt[i] * k_ + pred[i]];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw DimensionError("confusion matrices have different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix accumulate_confusion(std::span<const std::uint8_t> pred,
                                     std::span<const std::uint8_t> gt, std::int64_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt);
  return cm;
}

double image_iou(const ConfusionMatrix& cm, AbsentClassPolicy policy) {
  double acc = 0;
  std::int64_t classes = 0;
  for (std::int64_t c = 0; c < cm.num_classes(); ++c) {
    const std::int64_t denom = cm.tp(c) + cm.fp(c) + cm.fn(c);
    if (denom == 0) {
      if (policy == AbsentClassPolicy::zero) ++classes;
      continue;
    }
    acc += static_cast<double>(cm.tp(c)) / static_cast<double>(denom);
    ++classes;
  }
  if (classes == 0) throw ContractError("image_iou of an empty image");
  return acc / static_cast<double>(classes);
}

double image_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                 std::int64_t num_classes, AbsentClassPolicy policy) {
  return image_iou(accumulate_confusion(pred, gt, num_classes), policy);
}

double mean_iou(std::span<const double> per_image) {
  if (per_image.empty()) throw ContractError("mean_iou requires at least one image");
  double acc = 0;
  for (double v : per_image) acc += v;
  return acc / static_cast<double>(per_image.size());
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) throw ContractError("pixel_accuracy of an empty confusion matrix");
  std::int64_t diag = 0;
  for (std::int64_t c = 0; c < cm.num_classes(); ++c) diag += cm.tp(c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double score(double mean_iou, double mean_execution_seconds) {
  if (!(mean_execution_seconds > 0)) throw ContractError("execution time must be positive");
  return mean_iou / mean_execution_seconds;
}

EvalReport evaluate_predictions(std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> gt, std::int64_t pixels_per_image,
                                std::int64_t num_classes) {
  if (pred.size() != gt.size()) throw DimensionError("prediction and ground-truth sizes differ");
  if (pixels_per_image < 1 || pred.size() % static_cast<std::size_t>(pixels_per_image) != 0)
    throw DimensionError("pixel count is not a multiple of the image size");
  EvalReport r;
  r.n = static_cast<std::int64_t>(pred.size()) / pixels_per_image;
  if (r.n == 0) throw ContractError("evaluation requires at least one image");
  r.confusion = ConfusionMatrix(num_classes);
  const auto ppi = static_cast<std::size_t>(pixels_per_image);
  for (std::int64_t i = 0; i < r.n; ++i) {
    const auto off = static_cast<std::size_t>(i) * ppi;
    ConfusionMatrix cm = accumulate_confusion(pred.subspan(off, ppi), gt.subspan(off, ppi), num_classes);
    r.per_image_iou.push_back(image_iou(cm));
    r.confusion += cm;
  }
  r.mean_iou = mean_iou(r.per_image_iou);
  r.pixel_accuracy = pixel_accuracy(r.confusion);
  for (std::int64_t c = 0; c < num_classes; ++c) {
    const std::int64_t denom = r.confusion.tp(c) + r.confusion.fp(c) + r.confusion.fn(c);
    r.per_class_iou.push_back(denom == 0 ? -1.0
                                         : static_cast<double>(r.confusion.tp(c)) / static_cast<double>(denom));
  }
  return r;
}

BenchReport bench_latency(const SegModel& model, const Dataset& dataset, std::int64_t warmup,
                          std::int64_t runs) {
  if (runs < 1) throw ContractError("bench_latency requires runs >= 1");
  if (dataset.empty()) throw ContractError("bench_latency requires a non-empty dataset");
  BenchReport r;
  r.warmup_runs = warmup;
  r.timed_runs = runs;
  r.images_per_run = static_cast<std::int64_t>(dataset.size());
  NoGradGuard no_grad;
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::size_t which[] = {i};
    images.push_back(dataset.images(which));
  }
  using clock = std::chrono::steady_clock;
  for (std::int64_t run = 0; run < warmup + runs; ++run) {
    const auto start = clock::now();
    for (const auto& img : images) (void)forward_segment(model, img);
    const double secs = std::chrono::duration<double>(clock::now() - start).count();
    if (run >= warmup) r.run_seconds.push_back(secs);
  }
  std::vector<double> per_image;
  for (double s : r.run_seconds) per_image.push_back(s / static_cast<double>(r.images_per_run));
  r.mean_time = std::accumulate(per_image.begin(), per_image.end(), 0.0) / static_cast<double>(runs);
  r.std_defined = runs > 1;
  if (r.std_defined) {
    double ss = 0;
    for (double t : per_image) ss += (t - r.mean_time) * (t - r.mean_time);
    r.std_time = std::sqrt(ss / static_cast<double>(runs - 1));
  }
  r.fps = 1.0 / r.mean_time;
  return r;
}

void attach_score(BenchReport& bench, const EvalReport& eval) {
  bench.score = score(eval.mean_iou, bench.mean_time);
}

}  // namespace evt
