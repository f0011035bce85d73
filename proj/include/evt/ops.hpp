#pragma once

#include <cstdint>
#include <span>

#include "evt/tensor.hpp"

namespace evt {

inline constexpr double kLayerNormEps = 1e-5;

// GELU, tanh approximation:
//   0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

// Binary elementwise ops accept operands of identical shape, or a
// single-element operand that is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
/// out.shape[i] = x.shape[dims[i]].
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims);
/// Rank-2 transpose.
Tensor transpose(const Tensor& x);

/// x[m×k] · y[k×n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation. x: N×Cin×H×W, weight: Cout×Cin×kh×kw, bias: Cout or
/// undefined. (H + 2·padding − kh) must be a non-negative multiple of stride.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
              std::int64_t padding);

/// Adds bias[c] to every element whose index along `axis` is c.
Tensor add_bias(const Tensor& x, const Tensor& bias, std::int64_t axis);

/// Gathers channels (axis 1) of an N×C×… tensor in the given order.
Tensor select_channels(const Tensor& x, std::span<const std::int64_t> channels);

Tensor softmax(const Tensor& x, std::int64_t axis);
Tensor log_softmax(const Tensor& x, std::int64_t axis);

/// Normalizes over the last axis, then applies gain and bias (both of size
/// equal to the last dimension). eps = kLayerNormEps.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Block replication of the two trailing axes of an N×C×H×W tensor.
Tensor nearest_upsample(const Tensor& x, std::int64_t factor);

/// mean((a − b)²) over all elements.
Tensor mse_loss(const Tensor& a, const Tensor& b);

/// Pixel-wise cross-entropy for logits N×K×H×W and class ids (N·H·W,
/// row-major), averaged over pixels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> targets);

/// Scaled dot-product attention over `heads` heads.
///
/// q, k, v: (batch·tokens)×(heads·head_dim). Head j reads and writes columns
/// [j·head_dim, (j+1)·head_dim). Heads with keep_heads[j] == 0 produce zeros;
/// an empty keep_heads keeps every head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::int64_t batch, std::int64_t tokens, std::int64_t heads,
                            std::span<const std::uint8_t> keep_heads = {});

}  // namespace evt
