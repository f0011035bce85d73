#pragma once

// Dense compute kernels behind the tensor ops.
//
// Two implementations share one signature set:
//   serial::  straightforward loops, the reference used by tests
//   omp::     cache-friendly loop order, OpenMP-parallel over output rows
//
// The OpenMP kernels partition work by output element only, so every output
// value is produced by a single thread with a fixed summation order and the
// result is bit-identical for any thread count.

#include <cstdint>

namespace evt::kernels {

enum class Backend { serial, omp };

/// Backend used by the tensor ops on the calling thread (default: omp).
Backend backend() noexcept;
void set_backend(Backend b) noexcept;

/// Scoped backend override, restores the previous backend on destruction.
class BackendGuard {
 public:
  explicit BackendGuard(Backend b) : prev_(backend()) { set_backend(b); }
  ~BackendGuard() { set_backend(prev_); }
  BackendGuard(const BackendGuard&) = delete;
  BackendGuard& operator=(const BackendGuard&) = delete;

 private:
  Backend prev_;
};

// C[M×N] = op(A)·op(B) + (accumulate ? C : 0), row-major with leading dims.
// op(A) is M×K, op(B) is K×N.
#define EVT_KERNEL_DECLS(T)                                                                  \
  void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,      \
            const T* a, std::int64_t lda, const T* b, std::int64_t ldb, bool accumulate, T* c, \
            std::int64_t ldc);                                                               \
  void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w,             \
              std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,        \
              std::int64_t ho, std::int64_t wo, T* cols);                                    \
  void col2im_add(const T* cols, std::int64_t channels, std::int64_t h, std::int64_t w,      \
                  std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,    \
                  std::int64_t ho, std::int64_t wo, T* x);

namespace serial {
EVT_KERNEL_DECLS(float)
EVT_KERNEL_DECLS(double)
}  // namespace serial

namespace omp {
EVT_KERNEL_DECLS(float)
EVT_KERNEL_DECLS(double)
}  // namespace omp

#undef EVT_KERNEL_DECLS

// Dispatch on backend().
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, bool accumulate, T* c, std::int64_t ldc) {
  if (backend() == Backend::serial)
    serial::gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, accumulate, c, ldc);
  else
    omp::gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, accumulate, c, ldc);
}

template <class T>
void im2col(const T* x, std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho,
            std::int64_t wo, T* cols) {
  if (backend() == Backend::serial)
    serial::im2col(x, channels, h, w, kh, kw, stride, pad, ho, wo, cols);
  else
    omp::im2col(x, channels, h, w, kh, kw, stride, pad, ho, wo, cols);
}

template <class T>
void col2im_add(const T* cols, std::int64_t channels, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t ho, std::int64_t wo, T* x) {
  if (backend() == Backend::serial)
    serial::col2im_add(cols, channels, h, w, kh, kw, stride, pad, ho, wo, x);
  else
    omp::col2im_add(cols, channels, h, w, kh, kw, stride, pad, ho, wo, x);
}

}  // namespace evt::kernels
