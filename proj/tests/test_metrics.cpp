#include <gtest/gtest.h>

#include "evt/metrics.hpp"
#include "evt/model.hpp"
#include "evt/rng.hpp"
#include "evt/synth.hpp"

using namespace evt;

namespace {

const std::vector<std::uint8_t> kPred{0, 1, 1, 1}, kGt{0, 0, 1, 1};

// Per-class counting straight from the raw pixels, without a confusion matrix.
double brute_iou(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g, int k) {
  double s = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      inter += p[i] == c && g[i] == c;
      uni += p[i] == c || g[i] == c;
    }
    if (uni == 0) continue;
    s += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return s / present;
}

}  // namespace

TEST(Confusion, PerfectIsDiagonal) {
  const auto cm = accumulate_confusion(kGt, kGt, 2);
  EXPECT_EQ(cm.at(0, 1), 0);
  EXPECT_EQ(cm.at(1, 0), 0);
  EXPECT_EQ(cm.at(0, 0) + cm.at(1, 1), 4);
}

TEST(Confusion, HandEnumeration) {
  const auto cm = accumulate_confusion(kPred, kGt, 2);
  EXPECT_EQ(cm.at(0, 0), 1);
  EXPECT_EQ(cm.at(0, 1), 1);
  EXPECT_EQ(cm.at(1, 0), 0);
  EXPECT_EQ(cm.at(1, 1), 2);
  EXPECT_EQ(cm.fp(1), 1);
  EXPECT_EQ(cm.fn(0), 1);
}

TEST(Confusion, ClassIdOutOfRangeThrows) {
  const std::vector<std::uint8_t> bad{0, 2, 1, 1};
  EXPECT_THROW(accumulate_confusion(bad, kGt, 2), DataError);
}

TEST(Confusion, Additive) {
  const std::vector<std::uint8_t> p2{1, 1, 0, 0}, g2{1, 0, 0, 1};
  auto a = accumulate_confusion(kPred, kGt, 2);
  a += accumulate_confusion(p2, g2, 2);
  std::vector<std::uint8_t> p = kPred, g = kGt;
  p.insert(p.end(), p2.begin(), p2.end());
  g.insert(g.end(), g2.begin(), g2.end());
  EXPECT_EQ(a, accumulate_confusion(p, g, 2));
}

TEST(ImageIou, Perfect) { EXPECT_EQ(image_iou(kGt, kGt, 2), 1.0); }

TEST(ImageIou, HandComputed) { EXPECT_NEAR(image_iou(kPred, kGt, 2), (0.5 + 2.0 / 3.0) / 2, 1e-15); }

TEST(ImageIou, Disjoint) {
  const std::vector<std::uint8_t> zeros(4, 0), ones(4, 1);
  EXPECT_EQ(image_iou(zeros, ones, 2), 0.0);
}

TEST(ImageIou, AbsentClassPolicies) {
  // Only classes 0 and 1 appear; with K=4 the zero policy averages over four.
  EXPECT_NEAR(image_iou(kPred, kGt, 4, AbsentClassPolicy::zero), (0.5 + 2.0 / 3.0) / 4, 1e-15);
}

TEST(ImageIou, PermutationEquivariant) {
  Rng rng(5);
  std::vector<std::uint8_t> p(64), g(64);
  for (auto& v : p) v = static_cast<std::uint8_t>(rng.below(5));
  for (auto& v : g) v = static_cast<std::uint8_t>(rng.below(5));
  const std::uint8_t perm[] = {3, 0, 4, 1, 2};
  auto pp = p, gg = g;
  for (auto& v : pp) v = perm[v];
  for (auto& v : gg) v = perm[v];
  EXPECT_NEAR(image_iou(p, g, 5), image_iou(pp, gg, 5), 1e-15);
}

TEST(MeanIou, Basics) {
  const std::vector<double> same{0.3, 0.3, 0.3}, two{1.0, 0.5};
  EXPECT_DOUBLE_EQ(mean_iou(same), 0.3);
  EXPECT_EQ(mean_iou(two), 0.75);
  EXPECT_THROW(mean_iou(std::vector<double>{}), ContractError);
}

TEST(MeanIou, MatchesBruteForce) {
  Rng rng(11);
  const int k = 14, px = 16 * 16;
  for (int t = 0; t < 20; ++t) {
    std::vector<std::uint8_t> p(px), g(px);
    for (auto& v : p) v = static_cast<std::uint8_t>(rng.below(k));
    for (auto& v : g) v = static_cast<std::uint8_t>(rng.below(k));
    EXPECT_EQ(image_iou(p, g, k), brute_iou(p, g, k));
  }
}

TEST(MeanIou, ConcatenationIsWeightedMean) {
  Rng rng(12);
  auto make = [&](int n) {
    std::vector<std::uint8_t> p(static_cast<std::size_t>(n) * 16), g(p.size());
    for (auto& v : p) v = static_cast<std::uint8_t>(rng.below(3));
    for (auto& v : g) v = static_cast<std::uint8_t>(rng.below(3));
    return std::pair{p, g};
  };
  const auto [p1, g1] = make(3);
  const auto [p2, g2] = make(5);
  auto p = p1, g = g1;
  p.insert(p.end(), p2.begin(), p2.end());
  g.insert(g.end(), g2.begin(), g2.end());
  const auto a = evaluate_predictions(p1, g1, 16, 3), b = evaluate_predictions(p2, g2, 16, 3);
  const auto all = evaluate_predictions(p, g, 16, 3);
  EXPECT_NEAR(all.mean_iou, (3 * a.mean_iou + 5 * b.mean_iou) / 8, 1e-14);
  EXPECT_EQ(all.n, 8);
}

TEST(PixelAccuracy, Cases) {
  EXPECT_EQ(pixel_accuracy(accumulate_confusion(kGt, kGt, 2)), 1.0);
  EXPECT_EQ(pixel_accuracy(accumulate_confusion(kPred, kGt, 2)), 0.75);
  const std::vector<std::uint8_t> a{0, 1}, b{1, 0};
  EXPECT_EQ(pixel_accuracy(accumulate_confusion(a, b, 2)), 0.0);
  EXPECT_THROW(pixel_accuracy(ConfusionMatrix(2)), ContractError);
}

TEST(Score, TableTwoArithmetic) {
  EXPECT_NEAR(score(0.5200, 1 / 6.02), 3.130, 5e-3);
  EXPECT_NEAR(score(0.5365, 1 / 3.11), 1.668, 5e-3);
  EXPECT_NEAR(score(0.6056, 1 / 4.49), 2.719, 5e-3);
  EXPECT_THROW(score(0.5, 0.0), ContractError);
}

TEST(Bench, SingleRunFlagsUndefinedStd) {
  const auto model = build_model(ModelConfig::student(), 1);
  const auto data = generate_split(SceneSpec{}, 2, SplitRole::eval);
  const auto r = bench_latency(model, data, 0, 1);
  EXPECT_FALSE(r.std_defined);
  EXPECT_EQ(r.std_time, 0.0);
  EXPECT_NEAR(r.fps * r.mean_time, 1.0, 1e-9);
  EXPECT_THROW(bench_latency(model, data, 0, 0), ContractError);
}

TEST(Bench, DoubledResolutionIsSlower) {
  ModelConfig big = ModelConfig::student();
  big.height = big.width = 128;
  SceneSpec small_spec, big_spec;
  big_spec.height = big_spec.width = 128;
  const auto a = bench_latency(build_model(ModelConfig::student(), 1), generate_split(small_spec, 4, SplitRole::eval), 1, 3);
  const auto b = bench_latency(build_model(big, 1), generate_split(big_spec, 4, SplitRole::eval), 1, 3);
  EXPECT_GT(b.mean_time, a.mean_time);
}

TEST(Bench, RepeatableWithinTwentyPercent) {
  const auto model = build_model(ModelConfig::student(), 1);
  const auto data = generate_split(SceneSpec{}, 8, SplitRole::eval);
  (void)bench_latency(model, data, 1, 1);
  const auto a = bench_latency(model, data, 1, 5), b = bench_latency(model, data, 1, 5);
  EXPECT_NEAR(b.fps / a.fps, 1.0, 0.2);
}

TEST(Bench, ScoreAttachesMiouOverTime) {
  const auto model = build_model(ModelConfig::student(), 1);
  const auto data = generate_split(SceneSpec{}, 2, SplitRole::eval);
  auto r = bench_latency(model, data, 0, 2);
  EvalReport e;
  e.mean_iou = 0.5;
  attach_score(r, e);
  EXPECT_NEAR(r.score, 0.5 * r.fps, 1e-9 * r.score);
}
