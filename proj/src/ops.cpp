#include "evt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evt/kernels.hpp"

namespace evt {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(op) + ": dtype mismatch (" + to_string(a.dtype()) + " vs " +
                        to_string(b.dtype()) + ")");
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void attach(Tensor& out, std::initializer_list<const Tensor*> inputs,
            std::function<void(detail::Node&)> fn) {
  auto& node = out.node();
  node.requires_grad = true;
  for (const Tensor* t : inputs)
    if (t->defined()) node.parents.push_back(t->node_ptr());
  node.backward_fn = std::move(fn);
}

template <class T>
const std::vector<T>& grad_of(detail::Node& self) {
  return std::get<std::vector<T>>(self.grad);
}

std::int64_t normalize_axis(std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw IndexError("axis out of range for rank " + std::to_string(rank));
  return axis;
}

struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::int64_t axis) {
  AxisSplit s;
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---------------------------------------------------------------- binary ops

enum class BinaryKind { add, sub, mul };

template <class T>
Tensor binary_impl(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw DimensionError("elementwise op shape mismatch: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  Tensor out = Tensor::zeros(shape, a.dtype());
  auto av = a.data<T>();
  auto bv = b.data<T>();
  auto ov = out.mutable_data<T>();
  const std::size_t n = ov.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    ov[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
  }
  if (should_record({&a, &b})) {
    NodePtr an = a.node_ptr(), bn = b.node_ptr();
    attach(out, {&a, &b}, [an, bn, a_scalar, b_scalar, kind](detail::Node& self) {
      const auto& g = grad_of<T>(self);
      const std::size_t n = g.size();
      if (an->requires_grad) {
        auto& ga = an->grad_buffer<T>();
        const auto& bvals = bn->values<T>();
        for (std::size_t i = 0; i < n; ++i) {
          const T d = kind == BinaryKind::mul ? g[i] * bvals[b_scalar ? 0 : i] : g[i];
          ga[a_scalar ? 0 : i] += d;
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer<T>();
        const auto& avals = an->values<T>();
        for (std::size_t i = 0; i < n; ++i) {
          const T d = kind == BinaryKind::add   ? g[i]
                      : kind == BinaryKind::sub ? -g[i]
                                                : g[i] * avals[a_scalar ? 0 : i];
          gb[b_scalar ? 0 : i] += d;
        }
      }
    });
  }
  return out;
}

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  require_same_dtype(a, b, name);
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return binary_impl<T>(a, b, kind);
  });
}

// ---------------------------------------------------------------- unary ops

template <class T, class Fwd, class Deriv>
Tensor unary_impl(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto xv = x.data<T>();
  auto ov = out.mutable_data<T>();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  if (should_record({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {&x}, [xn, deriv](detail::Node& self) {
      const auto& g = grad_of<T>(self);
      const auto& xs = xn->values<T>();
      auto& gx = xn->grad_buffer<T>();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------- softmax

template <class T>
Tensor softmax_impl(const Tensor& x, std::int64_t axis, bool log_space) {
  const auto s = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto xv = x.data<T>();
  auto ov = out.mutable_data<T>();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.len; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      T total = 0;
      for (std::int64_t j = 0; j < s.len; ++j) total += std::exp(xv[base + j * s.inner] - mx);
      if (log_space) {
        const T lse = std::log(total);
        for (std::int64_t j = 0; j < s.len; ++j)
          ov[base + j * s.inner] = xv[base + j * s.inner] - mx - lse;
      } else {
        for (std::int64_t j = 0; j < s.len; ++j)
          ov[base + j * s.inner] = std::exp(xv[base + j * s.inner] - mx) / total;
      }
    }
  if (should_record({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {&x}, [xn, s, log_space](detail::Node& self) {
      const auto& g = grad_of<T>(self);
      const auto& y = self.values<T>();
      auto& gx = xn->grad_buffer<T>();
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.len * s.inner + in;
          T dot = 0;
          if (log_space) {
            for (std::int64_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner];
            for (std::int64_t j = 0; j < s.len; ++j) {
              const std::int64_t idx = base + j * s.inner;
              gx[idx] += g[idx] - std::exp(y[idx]) * dot;
            }
          } else {
            for (std::int64_t j = 0; j < s.len; ++j)
              dot += g[base + j * s.inner] * y[base + j * s.inner];
            for (std::int64_t j = 0; j < s.len; ++j) {
              const std::int64_t idx = base + j * s.inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T f = static_cast<T>(factor);
    return unary_impl<T>(x, [f](T v) { return v * f; }, [f](T) { return f; });
  });
}

Tensor relu(const Tensor& x) {
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary_impl<T>(
        // NaN passes through so that non-finite values reach the loss.
        x, [](T v) { return v > T(0) || std::isnan(v) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
  });
}

Tensor gelu(const Tensor& x) {
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T c = static_cast<T>(kGeluSqrt2OverPi);
    const T k = static_cast<T>(kGeluCubic);
    return unary_impl<T>(
        x,
        [c, k](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
        [c, k](T v) {
          const T t = std::tanh(c * (v + k * v * v * v));
          return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
        });
  });
}

Tensor sum(const Tensor& x) {
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    double acc = 0;
    for (T v : x.data<T>()) acc += v;
    Tensor out = Tensor::scalar(acc, x.dtype());
    if (should_record({&x})) {
      NodePtr xn = x.node_ptr();
      attach(out, {&x}, [xn](detail::Node& self) {
        const T g = grad_of<T>(self)[0];
        for (auto& v : xn->grad_buffer<T>()) v += g;
      });
    }
    return out;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  Tensor out = Tensor::zeros(shape, x.dtype());
  out.mutable_storage() = x.storage();
  if (should_record({&x})) {
    NodePtr xn = x.node_ptr();
    attach(out, {&x}, [xn](detail::Node& self) {
      visit_dtype(self.dtype, [&](auto tag) {
        using T = decltype(tag);
        const auto& g = grad_of<T>(self);
        auto& gx = xn->grad_buffer<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims) {
  const auto& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (dims.size() != rank) throw DimensionError("permute: wrong number of dims");
  std::vector<bool> seen(rank, false);
  for (auto d : dims) {
    if (d < 0 || d >= static_cast<std::int64_t>(rank) || seen[d])
      throw DimensionError("permute: invalid permutation");
    seen[d] = true;
  }
  Shape out_shape(rank);
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[dims[i]];

  // Source flat index for every destination element.
  const std::int64_t n = x.numel();
  auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::vector<std::int64_t> counter(rank, 0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += counter[d] * in_strides[dims[d]];
    (*src)[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) break;
      counter[d] = 0;
    }
  }
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    auto xv = x.data<T>();
    auto ov = out.mutable_data<T>();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[(*src)[i]];
    if (should_record({&x})) {
      NodePtr xn = x.node_ptr();
      attach(out, {&x}, [xn, src](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        auto& gx = xn->grad_buffer<T>();
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
      });
    }
    return out;
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor");
  return permute(x, {1, 0});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects rank-2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  require_same_dtype(a, b, "matmul");
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    kernels::gemm<T>(false, false, m, n, k, a.data<T>().data(), k, b.data<T>().data(), n, false,
                     out.mutable_data<T>().data(), n);
    if (should_record({&a, &b})) {
      NodePtr an = a.node_ptr(), bn = b.node_ptr();
      attach(out, {&a, &b}, [an, bn, m, n, k](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        if (an->requires_grad)
          kernels::gemm<T>(false, true, m, k, n, g.data(), n, bn->values<T>().data(), n, true,
                           an->grad_buffer<T>().data(), k);
        if (bn->requires_grad)
          kernels::gemm<T>(true, false, k, n, m, an->values<T>().data(), k, g.data(), n, true,
                           bn->grad_buffer<T>().data(), n);
      });
    }
    return out;
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw DimensionError("conv2d expects N×C×H×W input and Cout×Cin×kh×kw weight");
  require_same_dtype(x, weight, "conv2d");
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin)
    throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                         std::to_string(weight.dim(1)));
  const std::int64_t span_h = h + 2 * padding - kh, span_w = w + 2 * padding - kw;
  if (span_h < 0 || span_w < 0) throw DimensionError("conv2d: kernel larger than padded input");
  if (span_h % stride != 0 || span_w % stride != 0)
    throw DimensionError("conv2d: non-integer output size for input " + to_string(x.shape()));
  if (bias.defined()) {
    require_same_dtype(x, bias, "conv2d");
    if (bias.shape() != Shape{cout}) throw DimensionError("conv2d: bias must have Cout elements");
  }
  const std::int64_t ho = span_h / stride + 1, wo = span_w / stride + 1;
  const std::int64_t ckk = cin * kh * kw, hw = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros({n, cout, ho, wo}, x.dtype());
    auto xv = x.data<T>();
    auto wv = weight.data<T>();
    auto ov = out.mutable_data<T>();
    auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : static_cast<std::size_t>(n * ckk * hw));
    for (std::int64_t b = 0; b < n; ++b) {
      const T* src = xv.data() + b * cin * h * w;
      if (!pointwise) {
        T* c = cols->data() + b * ckk * hw;
        kernels::im2col<T>(src, cin, h, w, kh, kw, stride, padding, ho, wo, c);
        src = c;
      }
      kernels::gemm<T>(false, false, cout, hw, ckk, wv.data(), ckk, src, hw, false,
                       ov.data() + b * cout * hw, hw);
    }
    if (bias.defined()) {
      auto bv = bias.data<T>();
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t c = 0; c < cout; ++c) {
          T* row = ov.data() + (b * cout + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) row[i] += bv[c];
        }
    }
    if (should_record({&x, &weight, &bias})) {
      NodePtr xn = x.node_ptr(), wn = weight.node_ptr();
      NodePtr bn = bias.defined() ? bias.node_ptr() : nullptr;
      attach(out, {&x, &weight, &bias},
             [=](detail::Node& self) {
               const auto& g = grad_of<T>(self);
               if (wn->requires_grad) {
                 auto& gw = wn->grad_buffer<T>();
                 for (std::int64_t b = 0; b < n; ++b) {
                   const T* src = pointwise ? xn->values<T>().data() + b * cin * h * w
                                            : cols->data() + b * ckk * hw;
                   kernels::gemm<T>(false, true, cout, ckk, hw, g.data() + b * cout * hw, hw, src,
                                    hw, true, gw.data(), ckk);
                 }
               }
               if (bn && bn->requires_grad) {
                 auto& gb = bn->grad_buffer<T>();
                 for (std::int64_t b = 0; b < n; ++b)
                   for (std::int64_t c = 0; c < cout; ++c) {
                     const T* row = g.data() + (b * cout + c) * hw;
                     T acc = 0;
                     for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
                     gb[c] += acc;
                   }
               }
               if (xn->requires_grad) {
                 auto& gx = xn->grad_buffer<T>();
                 const T* wd = wn->values<T>().data();
                 std::vector<T> dcols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
                 for (std::int64_t b = 0; b < n; ++b) {
                   T* gxb = gx.data() + b * cin * h * w;
                   if (pointwise) {
                     kernels::gemm<T>(true, false, ckk, hw, cout, wd, ckk,
                                      g.data() + b * cout * hw, hw, true, gxb, hw);
                   } else {
                     kernels::gemm<T>(true, false, ckk, hw, cout, wd, ckk,
                                      g.data() + b * cout * hw, hw, false, dcols.data(), hw);
                     kernels::col2im_add<T>(dcols.data(), cin, h, w, kh, kw, stride, padding, ho,
                                            wo, gxb);
                   }
                 }
               }
             });
    }
    return out;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias, std::int64_t axis) {
  require_same_dtype(x, bias, "add_bias");
  axis = normalize_axis(axis, x.rank());
  const auto s = split_at(x.shape(), axis);
  if (bias.numel() != s.len)
    throw DimensionError("add_bias: bias has " + std::to_string(bias.numel()) +
                         " elements, axis has " + std::to_string(s.len));
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    auto xv = x.data<T>();
    auto bv = bias.data<T>();
    auto ov = out.mutable_data<T>();
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t j = 0; j < s.len; ++j) {
        const std::int64_t base = (o * s.len + j) * s.inner;
        for (std::int64_t i = 0; i < s.inner; ++i) ov[base + i] = xv[base + i] + bv[j];
      }
    if (should_record({&x, &bias})) {
      NodePtr xn = x.node_ptr(), bn = bias.node_ptr();
      attach(out, {&x, &bias}, [xn, bn, s](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer<T>();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer<T>();
          for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t j = 0; j < s.len; ++j) {
              const std::int64_t base = (o * s.len + j) * s.inner;
              T acc = 0;
              for (std::int64_t i = 0; i < s.inner; ++i) acc += g[base + i];
              gb[j] += acc;
            }
        }
      });
    }
    return out;
  });
}

Tensor select_channels(const Tensor& x, std::span<const std::int64_t> channels) {
  if (x.rank() < 2) throw DimensionError("select_channels expects rank >= 2");
  const std::int64_t c_in = x.dim(1);
  for (auto c : channels)
    if (c < 0 || c >= c_in) throw IndexError("select_channels: channel " + std::to_string(c) + " out of range");
  if (channels.empty()) throw DimensionError("select_channels: empty selection");
  const auto s = split_at(x.shape(), 1);
  Shape out_shape = x.shape();
  out_shape[1] = static_cast<std::int64_t>(channels.size());
  auto idx = std::make_shared<std::vector<std::int64_t>>(channels.begin(), channels.end());
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    auto xv = x.data<T>();
    auto ov = out.mutable_data<T>();
    const std::int64_t c_out = out_shape[1];
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t j = 0; j < c_out; ++j)
        std::copy_n(xv.data() + (o * c_in + (*idx)[j]) * s.inner, s.inner,
                    ov.data() + (o * c_out + j) * s.inner);
    if (should_record({&x})) {
      NodePtr xn = x.node_ptr();
      attach(out, {&x}, [xn, idx, s, c_in, c_out](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        auto& gx = xn->grad_buffer<T>();
        for (std::int64_t o = 0; o < s.outer; ++o)
          for (std::int64_t j = 0; j < c_out; ++j) {
            T* dst = gx.data() + (o * c_in + (*idx)[j]) * s.inner;
            const T* src = g.data() + (o * c_out + j) * s.inner;
            for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
          }
      });
    }
    return out;
  });
}

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.rank());
  return visit_dtype(x.dtype(), [&](auto tag) { return softmax_impl<decltype(tag)>(x, axis, false); });
}

Tensor log_softmax(const Tensor& x, std::int64_t axis) {
  axis = normalize_axis(axis, x.rank());
  return visit_dtype(x.dtype(), [&](auto tag) { return softmax_impl<decltype(tag)>(x, axis, true); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_same_dtype(x, gain, "layer_norm");
  require_same_dtype(x, bias, "layer_norm");
  const std::int64_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: gain/bias must match the last dimension");
  const std::int64_t rows = x.numel() / d;
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    auto xv = x.data<T>();
    auto gv = gain.data<T>();
    auto bv = bias.data<T>();
    auto ov = out.mutable_data<T>();
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T eps = static_cast<T>(kLayerNormEps);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = xv.data() + r * d;
      T mu = 0;
      for (std::int64_t i = 0; i < d; ++i) mu += xr[i];
      mu /= static_cast<T>(d);
      T var = 0;
      for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
      var /= static_cast<T>(d);
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::int64_t i = 0; i < d; ++i) {
        const T xh = (xr[i] - mu) * rs;
        (*xhat)[r * d + i] = xh;
        ov[r * d + i] = xh * gv[i] + bv[i];
      }
    }
    if (should_record({&x, &gain, &bias})) {
      NodePtr xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
      attach(out, {&x, &gain, &bias}, [=](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer<T>();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
        if (gn->requires_grad) {
          auto& gg = gn->grad_buffer<T>();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * (*xhat)[r * d + i];
        }
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer<T>();
          const auto& gain_v = gn->values<T>();
          for (std::int64_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::int64_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * gain_v[i];
              m1 += dxh;
              m2 += dxh * (*xhat)[r * d + i];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::int64_t i = 0; i < d; ++i) {
              const T dxh = g[r * d + i] * gain_v[i];
              gx[r * d + i] += (*rstd)[r] * (dxh - m1 - (*xhat)[r * d + i] * m2);
            }
          }
        }
      });
    }
    return out;
  });
}

Tensor nearest_upsample(const Tensor& x, std::int64_t factor) {
  if (x.rank() != 4) throw DimensionError("nearest_upsample expects N×C×H×W");
  if (factor < 1) throw DimensionError("nearest_upsample: factor must be >= 1");
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  return visit_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Tensor out = Tensor::zeros({x.dim(0), x.dim(1), oh, ow}, x.dtype());
    auto xv = x.data<T>();
    auto ov = out.mutable_data<T>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx)
          ov[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
    if (should_record({&x})) {
      NodePtr xn = x.node_ptr();
      attach(out, {&x}, [=](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        auto& gx = xn->grad_buffer<T>();
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t xx = 0; xx < ow; ++xx)
              gx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
      });
    }
    return out;
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mse_loss");
  if (a.shape() != b.shape())
    throw DimensionError("mse_loss shape mismatch: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  return visit_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto av = a.data<T>();
    auto bv = b.data<T>();
    double acc = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double diff = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
      acc += diff * diff;
    }
    const double count = static_cast<double>(av.size());
    Tensor out = Tensor::scalar(acc / count, a.dtype());
    if (should_record({&a, &b})) {
      NodePtr an = a.node_ptr(), bn = b.node_ptr();
      attach(out, {&a, &b}, [an, bn, count](detail::Node& self) {
        const T g = grad_of<T>(self)[0];
        const T f = static_cast<T>(2.0 / count) * g;
        const auto& avals = an->values<T>();
        const auto& bvals = bn->values<T>();
        if (an->requires_grad) {
          auto& ga = an->grad_buffer<T>();
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += f * (avals[i] - bvals[i]);
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer<T>();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= f * (avals[i] - bvals[i]);
        }
      });
    }
    return out;
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> targets) {
  if (logits.rank() != 4) throw DimensionError("cross_entropy expects N×K×H×W logits");
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(targets.size()) != n * hw)
    throw DimensionError("cross_entropy: target count does not match logits");
  for (auto t : targets)
    if (t >= k) throw DataError("cross_entropy: class id " + std::to_string(t) + " >= " + std::to_string(k));
  return visit_dtype(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = logits.data<T>();
    double total = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* base = xv.data() + b * k * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        T mx = base[p];
        for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, base[c * hw + p]);
        T s = 0;
        for (std::int64_t c = 0; c < k; ++c) s += std::exp(base[c * hw + p] - mx);
        const T target_logit = base[targets[b * hw + p] * hw + p];
        total += static_cast<double>(mx + std::log(s) - target_logit);
      }
    }
    const double pixels = static_cast<double>(n * hw);
    Tensor out = Tensor::scalar(total / pixels, logits.dtype());
    if (should_record({&logits})) {
      NodePtr xn = logits.node_ptr();
      auto tgt = std::make_shared<std::vector<std::uint8_t>>(targets.begin(), targets.end());
      attach(out, {&logits}, [xn, tgt, n, k, hw, pixels](detail::Node& self) {
        const T g = grad_of<T>(self)[0] / static_cast<T>(pixels);
        const auto& xs = xn->values<T>();
        auto& gx = xn->grad_buffer<T>();
        for (std::int64_t b = 0; b < n; ++b) {
          const T* base = xs.data() + b * k * hw;
          T* gbase = gx.data() + b * k * hw;
          for (std::int64_t p = 0; p < hw; ++p) {
            T mx = base[p];
            for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, base[c * hw + p]);
            T s = 0;
            for (std::int64_t c = 0; c < k; ++c) s += std::exp(base[c * hw + p] - mx);
            const std::int64_t t = (*tgt)[b * hw + p];
            for (std::int64_t c = 0; c < k; ++c) {
              const T prob = std::exp(base[c * hw + p] - mx) / s;
              gbase[c * hw + p] += g * (prob - (c == t ? T(1) : T(0)));
            }
          }
        }
      });
    }
    return out;
  });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::int64_t batch, std::int64_t tokens, std::int64_t heads,
                            std::span<const std::uint8_t> keep_heads) {
  require_same_dtype(q, k, "attention");
  require_same_dtype(q, v, "attention");
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("attention: q, k, v must be equal rank-2 shapes");
  if (q.dim(0) != batch * tokens) throw DimensionError("attention: rows != batch·tokens");
  const std::int64_t width = q.dim(1);
  if (heads < 1 || width % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (!keep_heads.empty() && static_cast<std::int64_t>(keep_heads.size()) != heads)
    throw DimensionError("attention: head mask length != heads");
  const std::int64_t dh = width / heads;
  auto keep = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(heads), 1);
  if (!keep_heads.empty()) std::copy(keep_heads.begin(), keep_heads.end(), keep->begin());

  return visit_dtype(q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor out = Tensor::zeros(q.shape(), q.dtype());
    auto qv = q.data<T>();
    auto kv = k.data<T>();
    auto vv = v.data<T>();
    auto ov = out.mutable_data<T>();
    const std::int64_t tt = tokens * tokens;
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch * heads * tt));
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t hd = 0; hd < heads; ++hd) {
        if (!(*keep)[hd]) continue;
        const std::int64_t off = b * tokens * width + hd * dh;
        T* p = probs->data() + (b * heads + hd) * tt;
        kernels::gemm<T>(false, true, tokens, tokens, dh, qv.data() + off, width, kv.data() + off,
                         width, false, p, tokens);
        for (std::int64_t i = 0; i < tokens; ++i) {
          T* row = p + i * tokens;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::int64_t j = 0; j < tokens; ++j) {
            row[j] *= inv_sqrt;
            mx = std::max(mx, row[j]);
          }
          T s = 0;
          for (std::int64_t j = 0; j < tokens; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
          }
          for (std::int64_t j = 0; j < tokens; ++j) row[j] /= s;
        }
        kernels::gemm<T>(false, false, tokens, dh, tokens, p, tokens, vv.data() + off, width, false,
                         ov.data() + off, width);
      }
    if (should_record({&q, &k, &v})) {
      NodePtr qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
      attach(out, {&q, &k, &v}, [=](detail::Node& self) {
        const auto& g = grad_of<T>(self);
        const auto& qs = qn->values<T>();
        const auto& ks = kn->values<T>();
        const auto& vs = vn->values<T>();
        std::vector<T> dp(static_cast<std::size_t>(tt));
        // Materialize all three gradient buffers so the gemms can accumulate.
        T* gq = qn->requires_grad ? qn->grad_buffer<T>().data() : nullptr;
        T* gk = kn->requires_grad ? kn->grad_buffer<T>().data() : nullptr;
        T* gv = vn->requires_grad ? vn->grad_buffer<T>().data() : nullptr;
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t hd = 0; hd < heads; ++hd) {
            if (!(*keep)[hd]) continue;
            const std::int64_t off = b * tokens * width + hd * dh;
            const T* p = probs->data() + (b * heads + hd) * tt;
            if (gv)
              kernels::gemm<T>(true, false, tokens, dh, tokens, p, tokens, g.data() + off, width,
                               true, gv + off, width);
            if (!gq && !gk) continue;
            kernels::gemm<T>(false, true, tokens, tokens, dh, g.data() + off, width,
                             vs.data() + off, width, false, dp.data(), tokens);
            for (std::int64_t i = 0; i < tokens; ++i) {
              T dot = 0;
              for (std::int64_t j = 0; j < tokens; ++j) dot += dp[i * tokens + j] * p[i * tokens + j];
              for (std::int64_t j = 0; j < tokens; ++j)
                dp[i * tokens + j] = p[i * tokens + j] * (dp[i * tokens + j] - dot) * inv_sqrt;
            }
            if (gq)
              kernels::gemm<T>(false, false, tokens, dh, tokens, dp.data(), tokens,
                               ks.data() + off, width, true, gq + off, width);
            if (gk)
              kernels::gemm<T>(true, false, tokens, dh, tokens, dp.data(), tokens,
                               qs.data() + off, width, true, gk + off, width);
          }
      });
    }
    return out;
  });
}

}  // namespace evt
