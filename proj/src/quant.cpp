#include "evt/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "evt/errors.hpp"

namespace evt {

std::uint16_t half_bits(double x) {
  if (std::isnan(x)) return 0x7e00;
  const std::uint16_t sign = std::signbit(x) ? 0x8000 : 0;
  const double a = std::fabs(x);
  if (a >= kHalfMax) return sign | 0x7bff;
  if (a < 0x1p-14) {
    // Subnormal range: integer multiples of 2^-24. A result of 1024 is the
    // smallest normal, whose encoding happens to be the same integer.
    return sign | static_cast<std::uint16_t>(std::nearbyint(a * 0x1p24));
  }
  int ex = 0;
  std::frexp(a, &ex);
  int e = ex - 1;  // a in [2^e, 2^(e+1))
  double q = std::nearbyint(std::ldexp(a, 10 - e));
  if (q == 2048.0) {
    q = 1024.0;
    ++e;
  }
  if (e > 15) return sign | 0x7bff;
  return sign | static_cast<std::uint16_t>((e + 15) << 10) | static_cast<std::uint16_t>(q - 1024.0);
}

double half_to_double(std::uint16_t bits) {
  const double sign = (bits & 0x8000) ? -1.0 : 1.0;
  const int exp = (bits >> 10) & 0x1f;
  const int man = bits & 0x3ff;
  if (exp == 0) return sign * std::ldexp(man, -24);
  if (exp == 31) return man ? std::numeric_limits<double>::quiet_NaN() : sign * HUGE_VAL;
  return sign * std::ldexp(1024 + man, exp - 25);
}

double round_to_half(double x) { return half_to_double(half_bits(x)); }

Tensor quantize_fp16(const Tensor& x) {
  Tensor out = x.detach();
  std::visit(
      [](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        for (auto& e : v) e = static_cast<T>(round_to_half(e));
      },
      out.mutable_storage());
  return out;
}

namespace {

double absmax(const Tensor& x) {
  return std::visit(
      [](const auto& v) {
        double m = 0;
        for (auto e : v) m = std::max(m, std::fabs(static_cast<double>(e)));
        return m;
      },
      x.storage());
}

// Nudges s upward until re-calibrating on the dequantized extreme value
// (127·s stored in dtype) reproduces s, which makes quantization idempotent.
double settle_scale(double s, DType dtype) {
  const auto recal = [dtype](double c) {
    return visit_dtype(dtype, [c](auto tag) {
      using T = decltype(tag);
      return static_cast<double>(static_cast<T>(127.0 * c)) / 127.0;
    });
  };
  double c = s;
  for (int i = 0; i < 64; ++i) {
    if (recal(c) == c) return c;
    c = std::nextafter(c, HUGE_VAL);
  }
  return s;
}

}  // namespace

double calibrate_int8(std::span<const Tensor> stream) {
  if (stream.empty()) throw ContractError("calibrate_int8 requires a non-empty stream");
  double m = 0;
  for (const auto& t : stream) m = std::max(m, absmax(t));
  if (m == 0) return std::numeric_limits<double>::min();
  return settle_scale(m / 127.0, stream.front().dtype());
}

double calibrate_int8(const Tensor& x) { return calibrate_int8(std::span<const Tensor>(&x, 1)); }

std::vector<std::int8_t> quantize_int8(const Tensor& x, double scale) {
  if (!(scale > 0)) throw ContractError("int8 scale must be positive");
  return std::visit(
      [scale](const auto& v) {
        std::vector<std::int8_t> q(v.size());
        for (std::size_t i = 0; i < v.size(); ++i)
          q[i] = static_cast<std::int8_t>(std::clamp(std::nearbyint(static_cast<double>(v[i]) / scale), -127.0, 127.0));
        return q;
      },
      x.storage());
}

Tensor dequantize(std::span<const std::int8_t> q, double scale, const Shape& shape, DType dtype) {
  if (numel_of(shape) != static_cast<std::int64_t>(q.size()))
    throw DimensionError("dequantize: payload size does not match shape " + to_string(shape));
  Tensor out = Tensor::zeros(shape, dtype);
  visit_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = out.mutable_data<T>();
    for (std::size_t i = 0; i < q.size(); ++i) d[i] = static_cast<T>(q[i] * scale);
  });
  return out;
}

void QuantSpec::validate() const {
  if (calibration_images < 1) throw ConfigError("calibration_images must be >= 1");
}

nlohmann::json QuantSpec::to_json() const {
  return {{"mode", mode == QuantMode::fp16 ? "fp16" : "int8"}, {"calibration_images", calibration_images}};
}

QuantSpec QuantSpec::from_json(const nlohmann::json& j) { return from_json(j, QuantSpec{}); }

QuantSpec QuantSpec::from_json(const nlohmann::json& j, const QuantSpec& base) {
  if (!j.is_object()) throw ConfigError("quant config must be an object");
  for (const auto& [key, value] : j.items())
    if (key != "mode" && key != "calibration_images") throw ConfigError("unknown quant config key '" + key + "'");
  QuantSpec s = base;
  try {
    if (j.contains("mode")) {
      const auto m = j.at("mode").get<std::string>();
      if (m == "fp16") s.mode = QuantMode::fp16;
      else if (m == "int8") s.mode = QuantMode::int8;
      else throw ConfigError("unknown quant mode '" + m + "'");
    }
    if (j.contains("calibration_images")) s.calibration_images = j.at("calibration_images").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("quant config: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

bool is_weight(const std::string& name) { return name.size() > 2 && name.ends_with(".w"); }

LayerQuantError compare(const Tensor& a, const Tensor& b) {
  LayerQuantError e;
  std::visit(
      [&](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b.storage());
        double acc = 0;
        for (std::size_t i = 0; i < va.size(); ++i) {
          const double d = std::fabs(static_cast<double>(va[i]) - static_cast<double>(vb[i]));
          e.max_abs = std::max(e.max_abs, d);
          acc += d;
        }
        e.mean_abs = va.empty() ? 0 : acc / static_cast<double>(va.size());
      },
      a.storage());
  return e;
}

}  // namespace

QuantizedModel quantize_model(const SegModel& model, const QuantSpec& spec, const Dataset* calibration) {
  spec.validate();
  if (spec.mode == QuantMode::int8 && (calibration == nullptr || calibration->empty()))
    throw ContractError("int8 quantization requires a calibration set");
  QuantizedModel out;
  out.model = model.clone();
  out.report.mode = spec.mode;
  for (auto& [name, t] : out.model.params) {
    const Tensor& original = model.param(name);
    if (spec.mode == QuantMode::fp16) {
      t = quantize_fp16(original);
      out.encoding[name] = {TensorEncoding::Kind::fp16, 0};
      out.report.layers[name] = compare(original, t);
    } else if (is_weight(name)) {
      const double s = calibrate_int8(original);
      t = dequantize(quantize_int8(original, s), s, original.shape(), original.dtype());
      out.encoding[name] = {TensorEncoding::Kind::int8, s};
      auto err = compare(original, t);
      err.scale = s;
      out.report.layers[name] = err;
    }
  }

  if (spec.mode == QuantMode::int8) {
    NoGradGuard no_grad;
    const auto n = std::min<std::size_t>(calibration->size(), static_cast<std::size_t>(spec.calibration_images));
    std::vector<std::size_t> which(n);
    std::iota(which.begin(), which.end(), std::size_t{0});
    const Tensor images = calibration->images(which);
    std::vector<std::int64_t> taps(static_cast<std::size_t>(model.config.num_blocks));
    std::iota(taps.begin(), taps.end(), std::int64_t{0});
    const auto ref = forward(model, images, taps);
    const auto quant = forward(out.model, images, taps);
    for (const auto& [b, f] : ref.features) out.report.activation_absmax[b] = absmax(f);
    out.report.calibration_logit_drift = compare(ref.logits, quant.logits).mean_abs;
  }
  return out;
}

}  // namespace evt
