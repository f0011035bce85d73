#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "evt/csv.hpp"
#include "evt/distill.hpp"
#include "evt/model.hpp"
#include "evt/prune.hpp"
#include "evt/quant.hpp"
#include "evt/synth.hpp"
#include "evt/train.hpp"

namespace evt {

struct BenchSettings {
  std::int64_t warmup = 1;
  std::int64_t runs = 3;
  std::int64_t images = 8;  // leading eval images timed per run
};

struct SweepSettings {
  std::vector<Granularity> granularities{Granularity::unstructured, Granularity::filter};
  std::vector<double> sparsities{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  bool finetune = false;
  bool iterative = false;  // run the prune.schedule instead of one-shot points
};

struct HeadPruneSettings {
  std::vector<std::int64_t> head_counts{4, 2};
  std::int64_t finetune_iterations = 100;
};

/// JSON experiment description. Every section is optional; unknown keys are
/// rejected before any computation starts.
///
/// {
///   "seed": 0, "output": "out",
///   "model": {...ModelConfig}, "teacher": {...ModelConfig},
///   "data": {...SceneSpec, "train_samples": 64, "eval_samples": 64},
///   "train": {...TrainConfig}, "teacher_train": {...TrainConfig},
///   "distill": {...DistillSpec},
///   "prune": {...PruneSpec, "finetune_iterations": 200, "schedule": {...}},
///   "quant": {...QuantSpec},
///   "bench": {"warmup": 1, "runs": 3, "images": 8},
///   "sweep": {"granularities": [...], "sparsities": [...], "finetune": false, "iterative": false},
///   "headprune": {"head_counts": [4, 2], "finetune_iterations": 100}
/// }
///
/// Stage seeds derive from the global seed; train.seed is not consulted.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output = "out";
  ModelConfig student = ModelConfig::student();
  ModelConfig teacher = ModelConfig::teacher();
  SceneSpec data;
  std::int64_t train_samples = 64;
  std::int64_t eval_samples = 64;
  TrainConfig train;
  std::optional<TrainConfig> teacher_train;
  std::optional<DistillSpec> distill;
  std::optional<PruneSpec> prune;
  std::int64_t prune_finetune_iterations = 200;
  std::optional<IterativeSchedule> schedule;
  std::optional<QuantSpec> quant;
  BenchSettings bench;
  SweepSettings sweep;
  HeadPruneSettings headprune;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void validate() const;
};

/// Seed of a pipeline stage, derived from the global seed.
enum class Stage : std::uint64_t {
  teacher_init = 1,
  teacher_train,
  student_init,
  student_train,
  prune_finetune,
  headprune_finetune,
};
std::uint64_t stage_seed(const ExperimentConfig& config, Stage stage);

/// A failed pipeline stage; what() names the stage.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage " + stage + " failed: " + what), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Columns: model,sparsity,mode,miou,acc,params,flops,fps,score.
CsvTable results_table();

struct Splits {
  Dataset train, eval;
};
Splits make_splits(const ExperimentConfig& config);

/// Teacher → distill → prune → quantize → evaluate. Writes checkpoints and
/// results.csv under `out` and returns the table.
CsvTable cmd_pipeline(const ExperimentConfig& config, const std::filesystem::path& out);

/// One row per (variant, sparsity) or per (variant, round) when iterative.
/// `trained` replaces in-run training of the student when given.
CsvTable cmd_sweep_prune(const ExperimentConfig& config, const std::filesystem::path& out,
                         const SegModel* trained = nullptr);

/// Columns: heads,miou,params_theoretical,params_materialized,fps.
CsvTable cmd_headprune_table(const ExperimentConfig& config, const std::filesystem::path& out,
                             const SegModel* trained = nullptr);

CsvTable cmd_bench(const ExperimentConfig& config, const SegModel& model, const std::filesystem::path& out);

void cmd_plot(const std::filesystem::path& csv, const std::filesystem::path& svg);

/// Student training; writes student.ckpt and train.csv (iteration,loss).
CsvTable cmd_train(const ExperimentConfig& config, const std::filesystem::path& out);

/// Distills into a fresh student from `teacher` (trained in-run when null).
CsvTable cmd_distill(const ExperimentConfig& config, const std::filesystem::path& out,
                     const SegModel* teacher = nullptr);

/// Writes quantized.ckpt and quant.csv (layer,max_abs,mean_abs,scale).
CsvTable cmd_quantize(const ExperimentConfig& config, const SegModel& model, const std::filesystem::path& out);

/// Columns: model,n,miou,acc,params,flops.
CsvTable cmd_eval(const ExperimentConfig& config, const SegModel& model, const std::filesystem::path& out);

}  // namespace evt
