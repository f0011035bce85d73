// Serial reference kernels against the OpenMP kernels, plus one end-to-end
// student forward per backend.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "evt/kernels.hpp"
#include "evt/model.hpp"
#include "evt/synth.hpp"
#include "evt/tensor.hpp"

namespace k = evt::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(gen);
  return v;
}

template <bool Omp>
void BM_gemm(benchmark::State& state) {
  const auto n = state.range(0);
  const auto a = random_vec(static_cast<std::size_t>(n * n), 1), b = random_vec(static_cast<std::size_t>(n * n), 2);
  std::vector<float> c(static_cast<std::size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Omp)
      k::omp::gemm(false, false, n, n, n, a.data(), n, b.data(), n, false, c.data(), n);
    else
      k::serial::gemm(false, false, n, n, n, a.data(), n, b.data(), n, false, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

// Stem-like convolution input: C channels of 64×64, 4×4 kernel, stride 2.
template <bool Omp>
void BM_im2col(benchmark::State& state) {
  const std::int64_t ch = state.range(0), h = 64, w = 64, kh = 4, kw = 4, s = 2, p = 1;
  const std::int64_t ho = (h + 2 * p - kh) / s + 1, wo = (w + 2 * p - kw) / s + 1;
  const auto x = random_vec(static_cast<std::size_t>(ch * h * w), 3);
  std::vector<float> cols(static_cast<std::size_t>(ch * kh * kw * ho * wo));
  for (auto _ : state) {
    if constexpr (Omp)
      k::omp::im2col(x.data(), ch, h, w, kh, kw, s, p, ho, wo, cols.data());
    else
      k::serial::im2col(x.data(), ch, h, w, kh, kw, s, p, ho, wo, cols.data());
    benchmark::DoNotOptimize(cols.data());
  }
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(cols.size() * sizeof(float)));
}

template <k::Backend B>
void BM_student_forward(benchmark::State& state) {
  const auto model = evt::build_model(evt::ModelConfig::student(), 0);
  const auto data = evt::generate_split(evt::SceneSpec{}, 1, evt::SplitRole::eval);
  const std::size_t which[] = {0};
  const auto image = data.images(which);
  evt::NoGradGuard no_grad;
  k::BackendGuard guard(B);
  for (auto _ : state) benchmark::DoNotOptimize(evt::forward_segment(model, image));
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<true>)->Name("gemm/omp")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_im2col<false>)->Name("im2col/serial")->Arg(3)->Arg(16);
BENCHMARK(BM_im2col<true>)->Name("im2col/omp")->Arg(3)->Arg(16);
BENCHMARK(BM_student_forward<k::Backend::serial>)->Name("student_forward/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_student_forward<k::Backend::omp>)->Name("student_forward/omp")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
