#include <gtest/gtest.h>

#include "evt/prune.hpp"
#include "test_util.hpp"

using namespace evt;
using testutil::random_tensor;
using testutil::tiny_config;

namespace {

Tensor image_batch(const ModelConfig& c, std::int64_t n, std::uint64_t seed) {
  return random_tensor({n, 3, c.height, c.width}, seed, DType::f32, 0, 1);
}

// Largest output gap between two models over ten random inputs.
double max_output_gap(const SegModel& a, const SegModel& b) {
  double worst = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = image_batch(a.config, 1, 100 + s);
    worst = std::max(worst, testutil::max_abs_diff(forward_segment(a, x), forward_segment(b, x)));
  }
  return worst;
}

// Gives head h of block 0 an L2 norm of norms[h] through a single q entry.
SegModel model_with_head_norms(const std::vector<double>& norms) {
  auto m = build_model(tiny_config(), 0);
  const std::int64_t dh = m.config.effective_head_dim();
  for (const char* p : {"q", "k", "v", "o"}) {
    auto w = m.param(std::string("block.0.attn.") + p + ".w").mutable_data<float>();
    std::fill(w.begin(), w.end(), 0.f);
  }
  auto q = m.param("block.0.attn.q.w").mutable_data<float>();
  for (std::size_t h = 0; h < norms.size(); ++h) q[static_cast<std::int64_t>(h) * dh] = static_cast<float>(norms[h]);
  return m;
}

PruneSpec filter_spec(double sparsity, std::vector<std::string> scope = {}) {
  PruneSpec s;
  s.granularity = Granularity::filter;
  s.sparsity = sparsity;
  s.scope = std::move(scope);
  return s;
}

}  // namespace

TEST(ScoreUnits, FilterNormsSortedAscending) {
  auto c = tiny_config();
  c.stem_channels = {4, 8};
  auto m = build_model(c, 0);
  auto w = m.param("stem.0.w").mutable_data<float>();
  std::fill(w.begin(), w.end(), 0.f);
  const std::int64_t per_filter = 3 * 4 * 4;
  const double norms[] = {1.0, 0.1, 0.5, 0.2};
  for (int f = 0; f < 4; ++f) {
    // Split the norm over two entries: sqrt(a² + a²) = norm.
    w[f * per_filter] = static_cast<float>(norms[f] / std::sqrt(2.0));
    w[f * per_filter + 5] = static_cast<float>(norms[f] / std::sqrt(2.0));
  }
  const auto ledger = score_units(m, filter_spec(0, {"stem.0.w"}));
  ASSERT_EQ(ledger.size(), 4u);
  const std::int64_t order[] = {1, 3, 2, 0};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(ledger[i].unit, order[i]);
    EXPECT_NEAR(ledger[i].score, norms[order[i]], 1e-6);
    EXPECT_EQ(ledger[i].layer, "stem.0.w");
  }
}

TEST(ScoreUnits, L1Criterion) {
  auto c = tiny_config();
  c.stem_channels = {2, 8};
  auto m = build_model(c, 0);
  auto w = m.param("stem.0.w").mutable_data<float>();
  std::fill(w.begin(), w.end(), 0.f);
  w[0] = 3;
  w[1] = -4;
  w[48] = 6;
  auto spec = filter_spec(0, {"stem.0.w"});
  spec.criterion = PruneCriterion::l1;
  const auto l1 = score_units(m, spec);
  EXPECT_EQ(l1[0].unit, 1);
  EXPECT_NEAR(l1[1].score, 7.0, 1e-12);
  spec.criterion = PruneCriterion::l2;
  EXPECT_EQ(score_units(m, spec)[0].unit, 0);
  EXPECT_NEAR(score_units(m, spec)[0].score, 5.0, 1e-12);
}

TEST(ScoreUnits, ZeroWeightsAndTies) {
  const auto m = model_with_head_norms({0, 0, 0, 0});
  PruneSpec spec;
  spec.granularity = Granularity::head;
  spec.heads_to_keep = 2;
  spec.scope = {"block.0.attn.*.w"};
  const auto ledger = score_units(m, spec);
  ASSERT_EQ(ledger.size(), 4u);
  for (int h = 0; h < 4; ++h) {
    EXPECT_EQ(ledger[h].unit, h);
    EXPECT_EQ(ledger[h].score, 0.0);
  }
}

TEST(ScoreUnits, GranularityScopeMismatch) {
  const auto m = build_model(tiny_config(), 0);
  PruneSpec spec;
  spec.granularity = Granularity::head;
  spec.heads_to_keep = 2;
  spec.scope = {"stem.*.w"};
  EXPECT_THROW(score_units(m, spec), ContractError);
  EXPECT_THROW(score_units(m, filter_spec(0.5, {"block.0.attn.q.w"})), ContractError);
  EXPECT_THROW(score_units(m, filter_spec(0.5, {"nothing.*"})), ContractError);
}

TEST(SelectAndMask, SparsityZeroIsIdentity) {
  const auto m = build_model(tiny_config(), 1);
  for (auto g : {Granularity::unstructured, Granularity::filter, Granularity::channel}) {
    PruneSpec spec;
    spec.granularity = g;
    const auto p = prune(m, spec);
    EXPECT_TRUE(p.bit_equal(m)) << to_string(g);
    const auto ev = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::eval);
    EXPECT_EQ(evaluate(p, ev).per_image_iou, evaluate(m, ev).per_image_iou);
  }
}

TEST(SelectAndMask, UnstructuredMagnitudeOracle) {
  SegModel m;
  m.config = tiny_config();
  m.params["fc.w"] = Tensor::from_values({4}, {0.1, -0.5, 0.3, -0.2});
  PruneSpec spec;
  spec.granularity = Granularity::unstructured;
  spec.sparsity = 0.5;
  const auto p = prune(m, spec);
  const auto v = p.param("fc.w").to_vector();
  EXPECT_EQ(v[0], 0.0);
  EXPECT_FLOAT_EQ(v[1], -0.5f);
  EXPECT_FLOAT_EQ(v[2], 0.3f);
  EXPECT_EQ(v[3], 0.0);
}

TEST(SelectAndMask, HeadsByNorm) {
  const auto m = model_with_head_norms({2.0, 0.3, 1.5, 0.1});
  PruneSpec spec;
  spec.granularity = Granularity::head;
  spec.heads_to_keep = 2;
  const auto mask = select_and_mask(m, spec);
  ASSERT_EQ(mask.head_keep.size(), 1u);
  EXPECT_EQ(mask.head_keep[0], (std::vector<std::uint8_t>{1, 0, 1, 0}));
  const auto p = apply_mask(m, mask);
  EXPECT_EQ(p.head_mask, mask.head_keep);
  const auto q = p.param("block.0.attn.q.w").to_vector();
  const std::int64_t d = 16, dh = 4;
  for (std::int64_t r = 0; r < d; ++r)
    for (std::int64_t j = 0; j < d; ++j)
      if ((j / dh) % 2 == 1) EXPECT_EQ(q[r * d + j], 0.0);
  EXPECT_EQ(q[0], static_cast<double>(2.0f));
}

TEST(SelectAndMask, FullStructuredSparsityThrows) {
  EXPECT_THROW(select_and_mask(build_model(tiny_config(), 0), filter_spec(1.0)), ContractError);
}

TEST(SelectAndMask, FloorOfUnitCount) {
  const auto m = build_model(tiny_config(), 2);
  // 8 filters: floor(0.3·8) = 2 per layer.
  const auto mask = select_and_mask(m, filter_spec(0.3, {"stem.0.w"}));
  int pruned = 0;
  for (const auto& u : mask.ledger) pruned += u.pruned;
  EXPECT_EQ(pruned, 2);
}

TEST(PruneSpec, Validation) {
  EXPECT_THROW(filter_spec(-0.1).validate(), ConfigError);
  EXPECT_THROW(filter_spec(1.1).validate(), ConfigError);
  EXPECT_THROW(PruneSpec::from_json(nlohmann::json{{"sparsty", 0.5}}), ConfigError);
  const auto s = PruneSpec::from_json(nlohmann::json{{"granularity", "channel"}, {"sparsity", 0.25}});
  EXPECT_EQ(s.granularity, Granularity::channel);
  EXPECT_EQ(PruneSpec::from_json(s.to_json()).sparsity, 0.25);
}

TEST(Materialize, IdentityMaskKeepsArchitecture) {
  const auto m = build_model(tiny_config(), 3);
  const auto mask = select_and_mask(m, filter_spec(0));
  const auto mat = materialize(apply_mask(m, mask), mask);
  EXPECT_EQ(mat.config, m.config);
  EXPECT_LE(max_output_gap(m, mat), 1e-6);
}

TEST(Materialize, TwoOfFourHeadsAtWidth64) {
  const auto c = ModelConfig::student();
  const auto m = build_model(c, 4);
  PruneSpec spec;
  spec.granularity = Granularity::head;
  spec.heads_to_keep = 2;
  const auto mask = select_and_mask(m, spec);
  const auto masked = apply_mask(m, mask);
  const auto mat = materialize(masked, mask);
  EXPECT_EQ(mat.config.num_heads, 2);
  EXPECT_EQ(mat.config.effective_head_dim(), 16);
  EXPECT_EQ(count_params(m, true) - count_params(mat, true), c.num_blocks * 8192);
  EXPECT_EQ(count_params(masked, false), count_params(mat, true));
  EXPECT_EQ(mat.param("block.0.attn.q.w").shape(), (Shape{64, 32}));
  EXPECT_EQ(mat.param("block.0.attn.o.w").shape(), (Shape{32, 64}));
  EXPECT_LE(max_output_gap(masked, mat), 1e-6);
}

TEST(Materialize, StemFiltersEightToFour) {
  const auto m = build_model(tiny_config(), 5);
  const auto mask = select_and_mask(m, filter_spec(0.5, {"stem.0.w"}));
  const auto masked = apply_mask(m, mask);
  const auto mat = materialize(masked, mask);
  EXPECT_EQ(mat.param("stem.0.w").shape()[0], 4);
  EXPECT_EQ(mat.param("stem.1.w").shape()[1], 4);
  EXPECT_EQ(count_params(masked, false), count_params(mat, true));
  EXPECT_LE(max_output_gap(masked, mat), 1e-6);
}

TEST(Materialize, DefaultFilterScope) {
  const auto m = build_model(tiny_config(), 6);
  const auto mask = select_and_mask(m, filter_spec(0.25));
  const auto masked = apply_mask(m, mask);
  const auto mat = materialize(masked, mask);
  EXPECT_EQ(mat.config.stem_channels, (std::vector<std::int64_t>{6, 6}));
  EXPECT_EQ(count_params(masked, false), count_params(mat, true));
  EXPECT_LE(max_output_gap(masked, mat), 1e-6);
}

TEST(Materialize, DecoderFiltersStayMasked) {
  const auto m = build_model(tiny_config(), 6);
  const auto mask = select_and_mask(m, filter_spec(0.25, {"decoder.fuse.w"}));
  EXPECT_THROW(materialize(apply_mask(m, mask), mask), ContractError);
}

TEST(Materialize, Channels) {
  const auto m = build_model(tiny_config(), 7);
  PruneSpec spec;
  spec.granularity = Granularity::channel;
  spec.sparsity = 0.5;
  spec.scope = {"stem.1.w"};
  const auto mask = select_and_mask(m, spec);
  const auto masked = apply_mask(m, mask);
  const auto mat = materialize(masked, mask);
  EXPECT_EQ(count_params(masked, false), count_params(mat, true));
  EXPECT_LE(max_output_gap(masked, mat), 1e-6);
}

TEST(Materialize, UnstructuredThrows) {
  const auto m = build_model(tiny_config(), 0);
  PruneSpec spec;
  spec.granularity = Granularity::unstructured;
  spec.sparsity = 0.5;
  const auto mask = select_and_mask(m, spec);
  EXPECT_THROW(materialize(apply_mask(m, mask), mask), ContractError);
}

TEST(SparsityReport, IdentityIsZero) {
  const auto m = build_model(tiny_config(), 0);
  const auto mask = select_and_mask(m, filter_spec(0));
  const auto r = sparsity_report(apply_mask(m, mask), mask);
  EXPECT_EQ(r.global, 0.0);
  EXPECT_EQ(r.params_masked, 0);
}

TEST(SparsityReport, HalfOfEachLayer) {
  const auto m = build_model(tiny_config(), 0);
  PruneSpec spec;
  spec.granularity = Granularity::unstructured;
  spec.sparsity = 0.5;
  spec.scope = {"stem.*.w"};
  const auto mask = select_and_mask(m, spec);
  const auto masked = apply_mask(m, mask);
  const auto r = sparsity_report(masked, mask);
  ASSERT_EQ(r.per_layer.size(), 2u);
  for (const auto& [name, s] : r.per_layer) EXPECT_EQ(s, 0.5) << name;
  EXPECT_EQ(r.global, 0.5);
  EXPECT_EQ(r.params_masked, count_params(masked, true) - count_params(masked, false));
  EXPECT_EQ(r.params_kept, count_params(masked, false));
}

TEST(SparsityReport, AccountingIdentityForFilters) {
  const auto m = build_model(tiny_config(), 0);
  const auto mask = select_and_mask(m, filter_spec(0.5));
  const auto masked = apply_mask(m, mask);
  const auto r = sparsity_report(masked, mask);
  // Filter masks also cover biases and consumer slices, so stem.1 loses half
  // its filters and half the input slices of the survivors.
  EXPECT_EQ(r.params_masked, count_params(masked, true) - count_params(masked, false));
  EXPECT_EQ(r.per_layer.at("stem.0.w"), 0.5);
  EXPECT_EQ(r.per_layer.at("stem.1.w"), 0.75);
}

TEST(Schedule, CumulativeSparsity) {
  IterativeSchedule s;
  s.step_fraction = 0.2;
  s.rounds = 3;
  EXPECT_NEAR(s.cumulative_sparsity(3), 0.488, 1e-12);
  EXPECT_EQ(s.cumulative_sparsity(0), 0.0);
  s.step_fraction = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.step_fraction = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s.step_fraction = 0.5;
  s.rounds = 0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(IterativePrune, SingleRoundWithoutFinetuneIsOneShot) {
  const auto m = build_model(tiny_config(), 8);
  const auto tr = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::train);
  const auto ev = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::eval);
  IterativeSchedule s;
  s.step_fraction = 0.3;
  s.rounds = 1;
  s.finetune_iterations = 0;
  const auto r = iterative_prune(m, tr, ev, filter_spec(0), s, TrainConfig{});
  EXPECT_TRUE(r.model.bit_equal(prune(m, filter_spec(0.3))));
  ASSERT_EQ(r.trace.size(), 1u);
}

TEST(IterativePrune, TraceIncreasesAndMasksOnlyGrow) {
  const auto m = build_model(tiny_config(), 9);
  const auto tr = generate_split(SceneSpec{.height = 32, .width = 32}, 8, SplitRole::train);
  const auto ev = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::eval);
  IterativeSchedule s;
  s.step_fraction = 0.25;
  s.rounds = 3;
  s.finetune_iterations = 3;
  TrainConfig tc;
  tc.batch_size = 4;
  const auto r = iterative_prune(m, tr, ev, filter_spec(0), s, tc);
  ASSERT_EQ(r.trace.size(), 3u);
  for (std::size_t i = 1; i < r.trace.size(); ++i) {
    EXPECT_GT(r.trace[i].target_sparsity, r.trace[i - 1].target_sparsity);
    EXPECT_GE(r.trace[i].unit_sparsity, r.trace[i - 1].unit_sparsity);
  }

  // A later, larger target keeps every unit pruned before.
  const auto first = prune(m, filter_spec(0.25));
  const auto second = select_and_mask(first, filter_spec(0.5));
  for (const auto& [name, keep] : first.weight_masks) {
    const auto& later = second.masks.at(name);
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) ASSERT_FALSE(later[i]) << name << "[" << i << "]";
  }
}
