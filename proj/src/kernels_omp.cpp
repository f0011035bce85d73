#include <omp.h>

#include <algorithm>
#include <vector>

#include "evt/kernels.hpp"

namespace evt::kernels::omp {

namespace {

constexpr std::int64_t kRowBlock = 4;
constexpr std::int64_t kColTile = 512;

// Row-major, no transposes. Rows are processed four at a time so each loaded
// row of B feeds four rows of C; every C element still sums over p in order.
template <class T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, std::int64_t lda,
             const T* b, std::int64_t ldb, bool accumulate, T* c, std::int64_t ldc) {
  const std::int64_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  const bool parallel = m * n * k > 32768;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t rb = 0; rb < row_blocks; ++rb) {
    const std::int64_t i0 = rb * kRowBlock;
    const std::int64_t rows = std::min(kRowBlock, m - i0);
    if (!accumulate)
      for (std::int64_t r = 0; r < rows; ++r) std::fill_n(c + (i0 + r) * ldc, n, T(0));
    for (std::int64_t j0 = 0; j0 < n; j0 += kColTile) {
      const std::int64_t cols = std::min(kColTile, n - j0);
      if (rows == kRowBlock) {
        T* c0 = c + (i0 + 0) * ldc + j0;
        T* c1 = c + (i0 + 1) * ldc + j0;
        T* c2 = c + (i0 + 2) * ldc + j0;
        T* c3 = c + (i0 + 3) * ldc + j0;
        const T* a0 = a + (i0 + 0) * lda;
        const T* a1 = a + (i0 + 1) * lda;
        const T* a2 = a + (i0 + 2) * lda;
        const T* a3 = a + (i0 + 3) * lda;
        for (std::int64_t p = 0; p < k; ++p) {
          const T* brow = b + p * ldb + j0;
          const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
#pragma omp simd
          for (std::int64_t j = 0; j < cols; ++j) {
            const T bj = brow[j];
            c0[j] += v0 * bj;
            c1[j] += v1 * bj;
            c2[j] += v2 * bj;
            c3[j] += v3 * bj;
          }
        }
      } else {
        for (std::int64_t r = 0; r < rows; ++r) {
          T* crow = c + (i0 + r) * ldc + j0;
          const T* arow = a + (i0 + r) * lda;
          for (std::int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * ldb + j0;
            const T v = arow[p];
#pragma omp simd
            for (std::int64_t j = 0; j < cols; ++j) crow[j] += v * brow[j];
          }
        }
      }
    }
  }
}

template <class T>
std::vector<T> transpose_copy(const T* src, std::int64_t rows, std::int64_t cols,
                              std::int64_t ld) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * ld + j];
  return out;
}

template <class T>
void gemm_impl(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
               const T* a, std::int64_t lda, const T* b, std::int64_t ldb, bool accumulate, T* c,
               std::int64_t ldc) {
  if (m == 0 || n == 0) return;
  std::vector<T> a_packed, b_packed;
  if (trans_a) {
    // stored as K×M
    a_packed = transpose_copy(a, k, m, lda);
    a = a_packed.data();
    lda = k;
  }
  if (trans_b) {
    // stored as N×K
    b_packed = transpose_copy(b, n, k, ldb);
    b = b_packed.data();
    ldb = n;
  }
  gemm_nn(m, n, k, a, lda, b, ldb, accumulate, c, ldc);
}

template <class T>
void im2col_impl(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                 std::int64_t ho, std::int64_t wo, T* cols) {
  const std::int64_t rows = channels * kh * kw;
#pragma omp parallel for schedule(static) if (rows * ho * wo > 65536)
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::int64_t c = row / (kh * kw);
    const std::int64_t ki = (row / kw) % kh;
    const std::int64_t kj = row % kw;
    T* dst = cols + row * ho * wo;
    const T* plane = x + c * h * w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const std::int64_t iy = oy * stride - pad + ki;
      T* drow = dst + oy * wo;
      if (iy < 0 || iy >= h) {
        std::fill_n(drow, wo, T(0));
        continue;
      }
      const T* srow = plane + iy * w;
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const std::int64_t ix = ox * stride - pad + kj;
        drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
      }
    }
  }
}

// Parallel over channels: a channel's input plane only receives contributions
// from its own kh·kw rows, visited in the same order as the serial kernel.
template <class T>
void col2im_impl(const T* cols, std::int64_t channels, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                 std::int64_t ho, std::int64_t wo, T* x) {
#pragma omp parallel for schedule(static) if (channels * kh * kw * ho * wo > 65536)
  for (std::int64_t c = 0; c < channels; ++c) {
    T* plane = x + c * h * w;
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* src = cols + ((c * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          T* xrow = plane + iy * w;
          const T* srow = src + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) xrow[ix] += srow[ox];
          }
        }
      }
  }
}

}  // namespace

#define EVT_OMP_DEFS(T)                                                                        \
  void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,      \
            std::int64_t lda, const T* b, std::int64_t ldb, bool acc, T* c, std::int64_t ldc) { \
    gemm_impl(ta, tb, m, n, k, a, lda, b, ldb, acc, c, ldc);                                   \
  }                                                                                            \
  void im2col(const T* x, std::int64_t ch, std::int64_t h, std::int64_t w, std::int64_t kh,    \
              std::int64_t kw, std::int64_t s, std::int64_t p, std::int64_t ho, std::int64_t wo, \
              T* cols) {                                                                       \
    im2col_impl(x, ch, h, w, kh, kw, s, p, ho, wo, cols);                                      \
  }                                                                                            \
  void col2im_add(const T* cols, std::int64_t ch, std::int64_t h, std::int64_t w,              \
                  std::int64_t kh, std::int64_t kw, std::int64_t s, std::int64_t p,            \
                  std::int64_t ho, std::int64_t wo, T* x) {                                    \
    col2im_impl(cols, ch, h, w, kh, kw, s, p, ho, wo, x);                                      \
  }

EVT_OMP_DEFS(float)
EVT_OMP_DEFS(double)

#undef EVT_OMP_DEFS

}  // namespace evt::kernels::omp
