#include <gtest/gtest.h>

#include <cmath>

#include "evt/gradcheck.hpp"
#include "evt/kernels.hpp"
#include "evt/ops.hpp"
#include "test_util.hpp"

using namespace evt;
using evt::testutil::random_tensor;

namespace {

Tensor m(const Shape& s, std::vector<double> v) { return Tensor::from_values(s, std::move(v)); }

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 0) {
  const auto got = t.to_vector();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, Identity) {
  expect_values(matmul(m({2, 2}, {1, 0, 0, 1}), m({2, 1}, {5, 6})), {5, 6});
}

TEST(Matmul, HandComputed) {
  const auto c = matmul(m({2, 2}, {1, 2, 3, 4}), m({2, 1}, {5, 6}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_values(c, {17, 39});
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(m({2, 3}, {1, 2, 3, 4, 5, 6}), m({2, 3}, {1, 2, 3, 4, 5, 6})), DimensionError);
}

TEST(Conv2d, ScalarKernel) {
  const auto y = conv2d(m({1, 1, 2, 2}, {1, 2, 3, 4}), m({1, 1, 1, 1}, {2}), Tensor{}, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  expect_values(y, {2, 4, 6, 8});
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  const auto y = conv2d(random_tensor({2, 3, 5, 5}, 1), Tensor::zeros({4, 3, 3, 3}, DType::f64), Tensor{}, 1, 1);
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, KernelLargerThanInputThrows) {
  EXPECT_THROW(conv2d(m({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor::zeros({1, 1, 3, 3}, DType::f64), Tensor{}, 1, 0),
               DimensionError);
}

TEST(Conv2d, NonIntegerOutputThrows) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 5, 5}, DType::f64), Tensor::zeros({1, 1, 2, 2}, DType::f64), Tensor{}, 2, 0),
               DimensionError);
}

TEST(Conv2d, MatchesDirectLoop) {
  const auto x = random_tensor({2, 3, 7, 6}, 2), w = random_tensor({4, 3, 3, 2}, 3), b = random_tensor({4}, 4);
  const std::int64_t s = 2, p = 1, ho = (7 + 2 - 3) / 2 + 1, wo = (6 + 2 - 2) / 2 + 1;
  const auto y = conv2d(x, w, b, s, p).to_vector();
  const auto xv = x.to_vector(), wv = w.to_vector(), bv = b.to_vector();
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t o = 0; o < 4; ++o)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          double acc = bv[o];
          for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t u = 0; u < 3; ++u)
              for (std::int64_t v = 0; v < 2; ++v) {
                const auto r = i * s - p + u, q = j * s - p + v;
                if (r < 0 || r >= 7 || q < 0 || q >= 6) continue;
                acc += xv[((n * 3 + c) * 7 + r) * 6 + q] * wv[((o * 3 + c) * 3 + u) * 2 + v];
              }
          EXPECT_NEAR(y[((n * 4 + o) * ho + i) * wo + j], acc, 1e-12);
        }
}

TEST(Softmax, Uniform) { expect_values(softmax(m({2}, {0, 0}), 0), {0.5, 0.5}); }

TEST(Softmax, ClosedForm) { expect_values(softmax(m({2}, {std::log(1.0), std::log(3.0)}), 0), {0.25, 0.75}, 1e-15); }

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto y = softmax(m({2}, {1000, 0}), 0).to_vector();
  EXPECT_TRUE(std::isfinite(y[0]) && std::isfinite(y[1]));
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_LT(y[1], 1e-300);
}

TEST(Softmax, SumsToOneAlongAxis) {
  const auto y = softmax(random_tensor({3, 5, 4}, 5, DType::f64, -30, 30), 1).to_vector();
  for (int a = 0; a < 3; ++a)
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int k = 0; k < 5; ++k) s += y[(a * 5 + k) * 4 + c];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Elementwise, Relu) { expect_values(relu(m({2}, {-1, 2})), {0, 2}); }

TEST(Elementwise, LayerNormOfConstantIsZero) {
  const auto y = layer_norm(Tensor::full({2, 4}, 3.0, DType::f64), Tensor::full({4}, 1.0, DType::f64),
                            Tensor::zeros({4}, DType::f64));
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, NearestUpsampleReplicatesBlocks) {
  const auto y = nearest_upsample(m({1, 1, 2, 2}, {1, 2, 3, 4}), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  expect_values(y, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST(Elementwise, GeluTanhConstants) {
  const double x = 0.7;
  const double want = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
  EXPECT_NEAR(gelu(m({1}, {x})).item(), want, 1e-15);
}

TEST(Elementwise, ShapeMismatchThrows) {
  EXPECT_THROW(add(m({2}, {1, 2}), m({3}, {1, 2, 3})), DimensionError);
  expect_values(add(m({2}, {1, 2}), m({1}, {10})), {11, 12});
}

TEST(Backward, SumGivesOnes) {
  auto x = random_tensor({2, 3}, 6);
  x.set_requires_grad(true);
  sum(x).backward();
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareAtThree) {
  auto x = m({1}, {3});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad().item(), 6.0);
}

TEST(Backward, MseAgainstDetachedCopyIsZero) {
  auto x = random_tensor({4}, 7);
  x.set_requires_grad(true);
  mse_loss(x, x.detach()).backward();
  for (double g : x.grad().to_vector()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarThrows) {
  auto x = random_tensor({2}, 8);
  x.set_requires_grad(true);
  EXPECT_THROW(scale(x, 2).backward(), ContractError);
}

TEST(Tape, TopologicalOrder) {
  auto a = random_tensor({2, 2}, 9), b = random_tensor({2, 2}, 10);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  const auto loss = sum(mul(add(a, b), matmul(a, b)));
  const auto tape = build_tape(loss);
  ASSERT_FALSE(tape.empty());
  EXPECT_EQ(tape.back(), &loss.node());
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (const auto& p : tape[i]->parents) {
      const auto it = std::find(tape.begin(), tape.end(), p.get());
      if (it != tape.end()) EXPECT_LT(static_cast<std::size_t>(it - tape.begin()), i);
    }
}

TEST(GradCheck, LinearIsExact) {
  const auto w = random_tensor({6}, 11);
  EXPECT_LE(finite_diff_check([&](const Tensor& x) { return sum(mul(x, w)); }, random_tensor({6}, 12)), 1e-10);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  const std::vector<std::uint8_t> t{0, 3, 1, 2};
  const auto f = [&](const Tensor& x) { return cross_entropy(reshape(x, {1, 4, 2, 2}), t); };
  EXPECT_LT(finite_diff_check(f, random_tensor({4, 4}, 13)), 1e-4);
}

TEST(GradCheck, ConvRelu) {
  const auto w = random_tensor({2, 2, 3, 3}, 14), b = random_tensor({2}, 15);
  const auto f = [&](const Tensor& x) { return sum(relu(conv2d(x, w, b, 1, 1))); };
  EXPECT_LT(finite_diff_check(f, random_tensor({1, 2, 4, 4}, 16)), 1e-4);
}

TEST(Kernels, OmpMatchesSerialBitForBit) {
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const std::int64_t mm = 37, n = 29, k = 41;
      const auto a = random_tensor({mm * k}, 17, DType::f32).to_vector();
      const auto b = random_tensor({k * n}, 18, DType::f32).to_vector();
      std::vector<float> af(a.begin(), a.end()), bf(b.begin(), b.end());
      std::vector<float> c1(static_cast<std::size_t>(mm * n), 1.f), c2 = c1;
      const auto lda = ta ? mm : k, ldb = tb ? k : n;
      kernels::serial::gemm(ta, tb, mm, n, k, af.data(), lda, bf.data(), ldb, true, c1.data(), n);
      kernels::omp::gemm(ta, tb, mm, n, k, af.data(), lda, bf.data(), ldb, true, c2.data(), n);
      EXPECT_EQ(c1, c2) << "trans_a=" << ta << " trans_b=" << tb;
    }
}

TEST(Kernels, Im2colAndCol2imMatchSerial) {
  const std::int64_t c = 3, h = 9, w = 8, kh = 4, kw = 3, s = 2, p = 1;
  const std::int64_t ho = (h + 2 * p - kh) / s + 1, wo = (w + 2 * p - kw) / s + 1;
  const auto xv = random_tensor({c * h * w}, 19).to_vector();
  std::vector<double> cols1(static_cast<std::size_t>(c * kh * kw * ho * wo)), cols2 = cols1;
  kernels::serial::im2col(xv.data(), c, h, w, kh, kw, s, p, ho, wo, cols1.data());
  kernels::omp::im2col(xv.data(), c, h, w, kh, kw, s, p, ho, wo, cols2.data());
  EXPECT_EQ(cols1, cols2);
  std::vector<double> x1(xv.size(), 0.0), x2 = x1;
  kernels::serial::col2im_add(cols1.data(), c, h, w, kh, kw, s, p, ho, wo, x1.data());
  kernels::omp::col2im_add(cols1.data(), c, h, w, kh, kw, s, p, ho, wo, x2.data());
  EXPECT_EQ(x1, x2);
}

TEST(Kernels, BackendSwitchGivesIdenticalModelOutput) {
  const auto model = build_model(testutil::tiny_config(), 3);
  const auto x = random_tensor({2, 3, 32, 32}, 20, DType::f32, 0, 1);
  NoGradGuard ng;
  Tensor a, b;
  {
    kernels::BackendGuard g(kernels::Backend::serial);
    a = forward_segment(model, x);
  }
  {
    kernels::BackendGuard g(kernels::Backend::omp);
    b = forward_segment(model, x);
  }
  EXPECT_TRUE(a.bit_equal(b));
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  const auto w = random_tensor({5, 3, 3, 3}, 21, DType::f32);
  const auto x = random_tensor({2, 3, 8, 8}, 22, DType::f32);
  EXPECT_TRUE(conv2d(x, w, Tensor{}, 1, 1).bit_equal(conv2d(x, w, Tensor{}, 1, 1)));
}
