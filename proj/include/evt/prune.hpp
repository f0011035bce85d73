#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "evt/model.hpp"
#include "evt/synth.hpp"
#include "evt/train.hpp"

namespace evt {

enum class Granularity { unstructured, filter, channel, head };
enum class PruneCriterion { l2, l1 };

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

/// Units per granularity:
///   unstructured  one weight element
///   filter        one output-channel slice of a conv kernel
///   channel       one input-channel slice of a conv kernel
///   head          head j of a block: q/k/v columns and o rows it owns
struct PruneSpec {
  Granularity granularity = Granularity::filter;
  PruneCriterion criterion = PruneCriterion::l2;
  /// Fraction of units removed per layer (per block for heads).
  double sparsity = 0;
  /// Head granularity only; when > 0 it overrides sparsity.
  std::int64_t heads_to_keep = 0;
  /// Parameter-name globs; empty selects the granularity default
  /// (stem.*.w for filter/channel, block.*.attn.*.w for head, *.w otherwise).
  std::vector<std::string> scope;

  std::vector<std::string> effective_scope() const;
  void validate() const;
  nlohmann::json to_json() const;
  static PruneSpec from_json(const nlohmann::json& j, const PruneSpec& base);
  static PruneSpec from_json(const nlohmann::json& j);
};

struct UnitScore {
  std::string layer;  // weight name, or "block.{b}" for heads
  std::int64_t unit = 0;
  double score = 0;
  bool pruned = false;
};

struct PruneMask {
  Granularity granularity = Granularity::filter;
  /// Keep flags per parameter (1 = kept), covering every member of every
  /// pruned unit including consumer slices and biases.
  std::map<std::string, std::vector<std::uint8_t>> masks;
  /// Per block head keep flags; empty unless granularity == head.
  std::vector<std::vector<std::uint8_t>> head_keep;
  /// All scored units grouped by layer, ascending by (score, unit) per layer.
  std::vector<UnitScore> ledger;
  /// Parameters matched by the spec scope.
  std::vector<std::string> scope_params;

  nlohmann::json to_json() const;
};

/// Units of every in-scope layer sorted ascending by score, ties by index.
/// Throws ContractError when the scope matches nothing or holds parameters
/// the granularity does not apply to.
std::vector<UnitScore> score_units(const SegModel& model, const PruneSpec& spec);

/// Prunes floor(sparsity·units + 1e-9) units per layer, or num_heads -
/// heads_to_keep heads per block. Units already fully masked in `model` are
/// taken first so repeated calls never resurrect weights.
PruneMask select_and_mask(const SegModel& model, const PruneSpec& spec);

/// Copy of `model` with the mask merged in and masked weights zeroed.
SegModel apply_mask(const SegModel& model, const PruneMask& mask);

/// select_and_mask followed by apply_mask.
SegModel prune(const SegModel& model, const PruneSpec& spec);

/// Removes pruned filters, channels or heads, rewiring consumers. Filter
/// pruning is materializable for stem.* only.
SegModel materialize(const SegModel& masked, const PruneMask& mask);

struct SparsityReport {
  double global = 0;  // masked / total over in-scope parameters
  std::map<std::string, double> per_layer;
  std::int64_t scope_masked = 0;
  std::int64_t scope_total = 0;
  /// Whole-model counts, equal to the count_params difference between modes.
  std::int64_t params_masked = 0;
  std::int64_t params_kept = 0;
};

SparsityReport sparsity_report(const SegModel& model, const PruneMask& mask);

struct IterativeSchedule {
  double step_fraction = 0.2;
  std::int64_t rounds = 3;
  std::int64_t finetune_iterations = 200;

  void validate() const;
  /// 1 - (1 - p)^r.
  double cumulative_sparsity(std::int64_t round) const;
  nlohmann::json to_json() const;
  static IterativeSchedule from_json(const nlohmann::json& j, const IterativeSchedule& base);
};

struct IterativeRound {
  std::int64_t round = 0;
  double target_sparsity = 0;
  double unit_sparsity = 0;  // realized pruned units / all units in scope
  double miou = 0;
};

struct IterativeResult {
  SegModel model;
  PruneMask mask;  // final cumulative mask
  std::vector<IterativeRound> trace;
};

/// R rounds of pruning to the cumulative target followed by F finetune
/// iterations each (seed mixed with the round index). mIoU is measured on
/// `eval` after each round.
IterativeResult iterative_prune(const SegModel& model, const Dataset& train_set, const Dataset& eval,
                                const PruneSpec& spec, const IterativeSchedule& schedule,
                                const TrainConfig& train_config);

}  // namespace evt
