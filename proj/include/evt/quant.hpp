#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "evt/model.hpp"
#include "evt/synth.hpp"

namespace evt {

/// Largest finite binary16 value.
inline constexpr double kHalfMax = 65504.0;

/// IEEE-754 binary16 bits of x, rounded to nearest even (subnormals kept).
/// Magnitudes above 65504 saturate to ±65504; NaN maps to a quiet NaN.
std::uint16_t half_bits(double x);
double half_to_double(std::uint16_t bits);
/// x rounded onto the binary16 grid.
double round_to_half(double x);

/// Same shape and dtype, every value replaced by its binary16 image.
Tensor quantize_fp16(const Tensor& x);

/// Symmetric per-tensor scale max|x| / 127. All-zero input falls back to
/// the smallest positive normal double.
double calibrate_int8(std::span<const Tensor> stream);
double calibrate_int8(const Tensor& x);

/// q = clamp(round_half_even(x / s), -127, 127).
std::vector<std::int8_t> quantize_int8(const Tensor& x, double scale);
/// q·s as a tensor of the given shape and dtype.
Tensor dequantize(std::span<const std::int8_t> q, double scale, const Shape& shape,
                  DType dtype = DType::f32);

enum class QuantMode { fp16, int8 };

struct QuantSpec {
  QuantMode mode = QuantMode::fp16;
  /// int8: images drawn from the calibration set for the activation report.
  std::int64_t calibration_images = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static QuantSpec from_json(const nlohmann::json& j, const QuantSpec& base);
  static QuantSpec from_json(const nlohmann::json& j);
};

/// How a parameter is laid out on disk; float tensors keep their dtype.
struct TensorEncoding {
  enum class Kind { native, fp16, int8 } kind = Kind::native;
  double scale = 0;  // int8 only
};

struct LayerQuantError {
  double max_abs = 0;
  double mean_abs = 0;
  double scale = 0;  // int8 only
};

struct QuantReport {
  QuantMode mode = QuantMode::fp16;
  std::map<std::string, LayerQuantError> layers;
  /// Absolute activation maxima per block observed on the calibration set
  /// (int8 only; activations themselves are not quantized).
  std::map<std::int64_t, double> activation_absmax;
  /// Mean |logit_q - logit_float| over the calibration images (int8 only).
  double calibration_logit_drift = 0;
};

struct QuantizedModel {
  SegModel model;  // dequantized values, computed in the original dtype
  std::map<std::string, TensorEncoding> encoding;
  QuantReport report;
};

/// Simulated post-training quantization. fp16 maps every parameter onto the
/// binary16 grid. int8 quantizes conv and linear weights with per-tensor
/// symmetric scales and keeps biases and normalization parameters in float.
/// int8 requires a calibration set (ContractError otherwise).
QuantizedModel quantize_model(const SegModel& model, const QuantSpec& spec,
                              const Dataset* calibration = nullptr);

}  // namespace evt
