#include <gtest/gtest.h>
#include <immintrin.h>

#include <bit>
#include <cmath>
#include <cstring>

#include "evt/quant.hpp"
#include "evt/rng.hpp"
#include "evt/train.hpp"
#include "test_util.hpp"

using namespace evt;

namespace {

// Hardware round-to-nearest-even float -> binary16 conversion (F16C).
std::uint16_t f16c_bits(float x) { return static_cast<std::uint16_t>(_cvtss_sh(x, _MM_FROUND_TO_NEAREST_INT)); }

float f16c_value(std::uint16_t h) { return _cvtsh_ss(h); }

Tensor vec(std::vector<double> v, DType dt = DType::f64) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor::from_values({n}, std::move(v), dt);
}

}  // namespace

TEST(Fp16, ExactValues) {
  EXPECT_EQ(round_to_half(0.5), 0.5);
  EXPECT_EQ(round_to_half(0.1), 0.0999755859375);
  EXPECT_EQ(round_to_half(70000.0), 65504.0);
  EXPECT_EQ(round_to_half(-70000.0), -65504.0);
  EXPECT_EQ(half_bits(1.0), 0x3C00);
  EXPECT_EQ(half_bits(65504.0), 0x7BFF);
  EXPECT_EQ(half_bits(std::ldexp(1.0, -24)), 0x0001);  // smallest subnormal
  EXPECT_EQ(half_bits(std::ldexp(1.0, -25)), 0x0000);  // tie to even rounds down
  EXPECT_EQ(half_bits(std::ldexp(3.0, -26)), 0x0001);  // above the tie
}

TEST(Fp16, MatchesHardwareOnRandomSweep) {
  Rng rng(2024);
  int checked = 0;
  for (int i = 0; i < 100000; ++i) {
    float x;
    switch (i % 4) {
      case 0: {  // arbitrary finite float bit patterns inside the half range
        std::uint32_t u = static_cast<std::uint32_t>(rng.next());
        std::memcpy(&x, &u, 4);
        if (!std::isfinite(x) || std::abs(x) > 65504.f) x = static_cast<float>(rng.uniform(-65504, 65504));
        break;
      }
      case 1:  // subnormal range of binary16
        x = static_cast<float>(rng.uniform(-1, 1) * std::ldexp(1.0, -14));
        break;
      case 2:  // halfway points between adjacent halves
      {
        const auto h = static_cast<std::uint16_t>(rng.below(0x7BFF));
        x = (f16c_value(h) + f16c_value(static_cast<std::uint16_t>(h + 1))) / 2;
        break;
      }
      default:
        x = static_cast<float>(rng.uniform(-4, 4));
    }
    ASSERT_EQ(half_bits(x), f16c_bits(x)) << "x=" << x;
    ASSERT_EQ(round_to_half(x), static_cast<double>(f16c_value(f16c_bits(x))));
    ++checked;
  }
  EXPECT_EQ(checked, 100000);
}

TEST(Fp16, TensorQuantizationAndIdempotence) {
  const auto q = quantize_fp16(vec({0.1, 0.5, 70000, -1e-9}, DType::f32));
  EXPECT_EQ(q.dtype(), DType::f32);
  const auto v = q.to_vector();
  EXPECT_EQ(v[0], 0.0999755859375);
  EXPECT_EQ(v[2], 65504.0);
  EXPECT_TRUE(quantize_fp16(q).bit_equal(q));
}

TEST(Int8, Calibration) {
  EXPECT_NEAR(calibrate_int8(vec({0.2, -1.0, 0.5})), 1.0 / 127, 1e-15);
  EXPECT_EQ(calibrate_int8(vec({0, 0, 0})), std::numeric_limits<double>::min());
  const double s = calibrate_int8(vec({0.2, -1.0, 0.5})), s3 = calibrate_int8(vec({0.6, -3.0, 1.5}));
  EXPECT_NEAR(s3, 3 * s, 1e-15);
  const std::vector<Tensor> stream{vec({0.1}), vec({-2.0}), vec({1.0})};
  EXPECT_NEAR(calibrate_int8(stream), 2.0 / 127, 1e-15);
}

TEST(Int8, QuantizeDequantize) {
  const double s = 1.0 / 127;
  const auto q = quantize_int8(vec({0.0, 0.5, 2.0, -2.0}), s);
  EXPECT_EQ(q, (std::vector<std::int8_t>{0, 64, 127, -127}));
  const auto d = dequantize(q, s, {4}, DType::f64).to_vector();
  EXPECT_EQ(d[0], 0.0);
  EXPECT_NEAR(d[1], 64.0 / 127, 1e-15);
  EXPECT_NEAR(d[2], 1.0, 1e-15);
}

TEST(Int8, RoundHalfEven) {
  // 63.5 and 64.5 both land on the even neighbour.
  EXPECT_EQ(quantize_int8(vec({63.5, 64.5, -0.5}), 1.0), (std::vector<std::int8_t>{64, 64, 0}));
}

TEST(Int8, ErrorBoundInRange) {
  const auto x = testutil::random_tensor({1000}, 3);
  const double s = calibrate_int8(x);
  const auto q = quantize_int8(x, s);
  const auto d = dequantize(q, s, {1000}, DType::f64).to_vector();
  const auto xv = x.to_vector();
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_LE(std::abs(d[i] - xv[i]), s / 2 * (1 + 1e-12));
}

TEST(QuantizeModel, Int8NeedsCalibration) {
  QuantSpec spec;
  spec.mode = QuantMode::int8;
  EXPECT_THROW(quantize_model(build_model(testutil::tiny_config(), 0), spec), ContractError);
}

TEST(QuantizeModel, Fp16FixedPointAndIdempotence) {
  const auto c = testutil::tiny_config();
  const auto q1 = quantize_model(build_model(c, 1), QuantSpec{}).model;
  const auto q2 = quantize_model(q1, QuantSpec{});
  EXPECT_TRUE(q2.model.bit_equal(q1));
  for (const auto& [name, e] : q2.report.layers) EXPECT_EQ(e.max_abs, 0.0) << name;
  const auto x = testutil::random_tensor({1, 3, c.height, c.width}, 2, DType::f32, 0, 1);
  EXPECT_TRUE(forward_segment(q1, x).bit_equal(forward_segment(q2.model, x)));
}

TEST(QuantizeModel, Int8WeightsOnlyAndIdempotent) {
  const auto c = testutil::tiny_config();
  const auto m = build_model(c, 1);
  const auto calib = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::train);
  QuantSpec spec;
  spec.mode = QuantMode::int8;
  const auto q = quantize_model(m, spec, &calib);
  EXPECT_TRUE(q.model.param("head.b").bit_equal(m.param("head.b")));
  EXPECT_TRUE(q.model.param("block.0.ln1.g").bit_equal(m.param("block.0.ln1.g")));
  EXPECT_FALSE(q.model.param("head.w").bit_equal(m.param("head.w")));
  EXPECT_EQ(q.encoding.at("head.w").kind, TensorEncoding::Kind::int8);
  for (const auto& [name, e] : q.report.layers) EXPECT_LE(e.max_abs, e.scale / 2 * (1 + 1e-6)) << name;
  const auto again = quantize_model(q.model, spec, &calib);
  EXPECT_TRUE(again.model.bit_equal(q.model));
  EXPECT_FALSE(q.report.activation_absmax.empty());
}

TEST(QuantizeModel, EvalIndependentOfBatchSize) {
  const auto c = testutil::tiny_config();
  const auto q = quantize_model(build_model(c, 1), QuantSpec{}).model;
  const auto data = generate_split(SceneSpec{.height = 32, .width = 32}, 6, SplitRole::eval);
  EXPECT_EQ(evaluate(q, data, 1).per_image_iou, evaluate(q, data, 4).per_image_iou);
}
