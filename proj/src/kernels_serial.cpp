#include "evt/kernels.hpp"

namespace evt::kernels {

namespace {
thread_local Backend g_backend = Backend::omp;
}

Backend backend() noexcept { return g_backend; }
void set_backend(Backend b) noexcept { g_backend = b; }

namespace serial {

namespace {

template <class T>
void gemm_impl(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
               const T* a, std::int64_t lda, const T* b, std::int64_t ldb, bool accumulate, T* c,
               std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * ldc + j] : T(0);
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = acc;
    }
  }
}

template <class T>
void im2col_impl(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                 std::int64_t ho, std::int64_t wo, T* cols) {
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const std::int64_t row = (c * kh + ki) * kw + kj;
        for (std::int64_t oy = 0; oy < ho; ++oy)
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t iy = oy * stride - pad + ki;
            const std::int64_t ix = ox * stride - pad + kj;
            const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
            cols[row * ho * wo + oy * wo + ox] = inside ? x[(c * h + iy) * w + ix] : T(0);
          }
      }
}

template <class T>
void col2im_impl(const T* cols, std::int64_t channels, std::int64_t h, std::int64_t w,
                 std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                 std::int64_t ho, std::int64_t wo, T* x) {
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const std::int64_t row = (c * kh + ki) * kw + kj;
        for (std::int64_t oy = 0; oy < ho; ++oy)
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t iy = oy * stride - pad + ki;
            const std::int64_t ix = ox * stride - pad + kj;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              x[(c * h + iy) * w + ix] += cols[row * ho * wo + oy * wo + ox];
          }
      }
}

}  // namespace

#define EVT_SERIAL_DEFS(T)                                                                     \
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

EVT_SERIAL_DEFS(float)
EVT_SERIAL_DEFS(double)

#undef EVT_SERIAL_DEFS

}  // namespace serial
}  // namespace evt::kernels
