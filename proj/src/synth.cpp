#include "evt/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "evt/rng.hpp"

namespace evt {

namespace {

struct Rgb {
  double r, g, b;
};

// Class 0 is the background. Foreground colors are spread so that neighbouring
// ids are not similar.
constexpr std::array<Rgb, 14> kPalette{{
    {0.45, 0.42, 0.38},  // background
    {0.90, 0.90, 0.95},  {0.80, 0.25, 0.20}, {0.25, 0.55, 0.85}, {0.20, 0.70, 0.30},
    {0.95, 0.75, 0.15},  {0.60, 0.30, 0.70}, {0.10, 0.30, 0.45}, {0.95, 0.50, 0.60},
    {0.55, 0.75, 0.75},  {0.35, 0.20, 0.10}, {0.85, 0.45, 0.05}, {0.15, 0.15, 0.15},
    {0.70, 0.85, 0.40},
}};

Rgb class_color(std::int64_t c) {
  if (c < static_cast<std::int64_t>(kPalette.size())) return kPalette[static_cast<std::size_t>(c)];
  const double hue = std::fmod(static_cast<double>(c) * 0.618033988749895, 1.0) * 6.0;
  const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
  const int sector = static_cast<int>(hue);
  const std::array<Rgb, 6> sectors{{{1, x, 0}, {x, 1, 0}, {0, 1, x}, {0, x, 1}, {x, 0, 1}, {1, 0, x}}};
  const Rgb s = sectors[static_cast<std::size_t>(sector % 6)];
  return {0.15 + 0.7 * s.r, 0.15 + 0.7 * s.g, 0.15 + 0.7 * s.b};
}

// Oriented stripes, stable per class.
double class_texture(std::int64_t c, double y, double x) {
  const double angle = 0.7 * static_cast<double>(c);
  const double freq = 0.25 + 0.08 * static_cast<double>(c % 5);
  const double u = x * std::cos(angle) + y * std::sin(angle);
  return 0.08 * std::sin(2.0 * std::numbers::pi * freq * u);
}

struct Blob {
  int kind;  // 0 ellipse, 1 rectangle, 2 triangle
  double cy, cx, a, b, angle;
  std::array<double, 6> tri;  // vertices (y, x)
  std::int64_t cls;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * std::cos(angle) + dy * std::sin(angle);
    const double v = -dx * std::sin(angle) + dy * std::cos(angle);
    switch (kind) {
      case 0:
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      case 1:
        return std::abs(u) <= a && std::abs(v) <= b;
      default: {
        auto edge = [&](int i, int j) {
          return (tri[2 * j + 1] - tri[2 * i + 1]) * (y - tri[2 * i]) -
                 (tri[2 * j] - tri[2 * i]) * (x - tri[2 * i + 1]);
        };
        const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
  }
};

std::int64_t draw_class(Rng& rng, const std::vector<double>& cumulative) {
  const double u = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return 1 + std::min<std::int64_t>(it - cumulative.begin(), static_cast<std::int64_t>(cumulative.size()) - 1);
}

}  // namespace

void SceneSpec::validate() const {
  if (height < 16 || width < 16) throw ConfigError("scene resolution must be >= 16");
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (min_shapes < 0 || max_shapes < min_shapes) throw ConfigError("invalid shapes_per_image range");
  if (!(class_frequency_skew >= 0.0) || !std::isfinite(class_frequency_skew))
    throw ConfigError("class_frequency_skew must be a finite non-negative number");
}

nlohmann::json SceneSpec::to_json() const {
  return {{"height", height},
          {"width", width},
          {"num_classes", num_classes},
          {"min_shapes", min_shapes},
          {"max_shapes", max_shapes},
          {"class_frequency_skew", class_frequency_skew},
          {"seed", seed}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) { return from_json(j, SceneSpec{}); }

SceneSpec SceneSpec::from_json(const nlohmann::json& j, const SceneSpec& base) {
  if (!j.is_object()) throw ConfigError("data config must be an object");
  static const std::set<std::string> known{"height",     "width",      "resolution",
                                           "num_classes", "min_shapes", "max_shapes",
                                           "class_frequency_skew", "seed"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown data config key '" + key + "'");
  SceneSpec s = base;
  try {
    if (j.contains("resolution")) s.height = s.width = j.at("resolution").get<std::int64_t>();
    if (j.contains("height")) s.height = j.at("height").get<std::int64_t>();
    if (j.contains("width")) s.width = j.at("width").get<std::int64_t>();
    if (j.contains("num_classes")) s.num_classes = j.at("num_classes").get<std::int64_t>();
    if (j.contains("min_shapes")) s.min_shapes = j.at("min_shapes").get<std::int64_t>();
    if (j.contains("max_shapes")) s.max_shapes = j.at("max_shapes").get<std::int64_t>();
    if (j.contains("class_frequency_skew")) s.class_frequency_skew = j.at("class_frequency_skew").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  return s;
}

Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, index));
  const std::int64_t h = spec.height, w = spec.width;
  const double side = static_cast<double>(std::min(h, w));

  std::vector<double> cumulative;
  double acc = 0;
  for (std::int64_t c = 1; c < spec.num_classes; ++c) {
    acc += 1.0 / std::pow(static_cast<double>(c), spec.class_frequency_skew);
    cumulative.push_back(acc);
  }

  const std::int64_t count = rng.range(spec.min_shapes, spec.max_shapes);
  std::vector<Blob> shapes;
  for (std::int64_t s = 0; s < count; ++s) {
    Blob sh{};
    sh.kind = static_cast<int>(rng.below(3));
    sh.cls = draw_class(rng, cumulative);
    sh.cy = rng.uniform(0.0, static_cast<double>(h));
    sh.cx = rng.uniform(0.0, static_cast<double>(w));
    sh.a = rng.uniform(0.08, 0.2) * side;
    sh.b = sh.a * rng.uniform(0.5, 1.0);
    sh.angle = rng.uniform(0.0, std::numbers::pi);
    for (int v = 0; v < 3; ++v) {
      const double t = sh.angle + v * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.4, 0.4);
      const double r = sh.a * rng.uniform(0.9, 1.4);
      sh.tri[2 * v] = sh.cy + r * std::sin(t);
      sh.tri[2 * v + 1] = sh.cx + r * std::cos(t);
    }
    shapes.push_back(sh);
  }

  // Low-frequency background shading with a per-image phase.
  const double phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double brightness = rng.uniform(-0.05, 0.05);

  Sample out;
  out.index = index;
  out.image.resize(static_cast<std::size_t>(3 * h * w));
  out.mask.assign(static_cast<std::size_t>(h * w), 0);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
      std::int64_t cls = 0;
      for (const auto& sh : shapes)
        if (sh.contains(py, px)) cls = sh.cls;
      out.mask[y * w + x] = static_cast<std::uint8_t>(cls);
      const Rgb base = class_color(cls);
      double shade = brightness;
      if (cls == 0)
        shade += 0.08 * std::sin(6.0 * py / side + phase_y) * std::cos(5.0 * px / side + phase_x);
      else
        shade += class_texture(cls, py, px);
      const double channel[3] = {base.r, base.g, base.b};
      for (int c = 0; c < 3; ++c) {
        const double v = channel[c] + shade + 0.04 * rng.normal();
        out.image[(c * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

Dataset generate_split(const SceneSpec& spec, std::int64_t n, SplitRole role) {
  if (n < 1) throw ContractError("generate_split requires n >= 1");
  spec.validate();
  Dataset d;
  d.spec = spec;
  const std::uint64_t offset = role == SplitRole::train ? 0 : kEvalIndexOffset;
  d.samples.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    d.samples.push_back(generate_sample(spec, offset + static_cast<std::uint64_t>(i)));
  return d;
}

Tensor Dataset::images(std::span<const std::size_t> which) const {
  const std::int64_t per = 3 * spec.height * spec.width;
  std::vector<float> buf(static_cast<std::size_t>(per) * which.size());
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto& img = samples.at(which[i]).image;
    std::copy(img.begin(), img.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor::from_floats({static_cast<std::int64_t>(which.size()), 3, spec.height, spec.width},
                             std::move(buf));
}

std::vector<std::uint8_t> Dataset::masks(std::span<const std::size_t> which) const {
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(pixels_per_image()) * which.size());
  for (auto i : which) {
    const auto& m = samples.at(i).mask;
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

Dataset Dataset::subset(std::size_t begin, std::size_t end) const {
  Dataset d;
  d.spec = spec;
  d.samples.assign(samples.begin() + static_cast<std::ptrdiff_t>(begin),
                   samples.begin() + static_cast<std::ptrdiff_t>(std::min(end, samples.size())));
  return d;
}

std::vector<std::int64_t> class_histogram(const Dataset& dataset) {
  std::vector<std::int64_t> hist(static_cast<std::size_t>(dataset.spec.num_classes), 0);
  for (const auto& s : dataset.samples)
    for (auto c : s.mask) ++hist.at(c);
  return hist;
}

void export_sample_pnm(const Sample& sample, const SceneSpec& spec,
                       const std::filesystem::path& stem) {
  const std::int64_t h = spec.height, w = spec.width;
  auto ppm_path = stem;
  ppm_path += ".ppm";
  std::ofstream ppm(ppm_path, std::ios::binary);
  if (!ppm) throw std::runtime_error("cannot write " + ppm_path.string());
  ppm << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = sample.image[(c * h + y) * w + x];
        ppm.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  auto pgm_path = stem;
  pgm_path += ".pgm";
  std::ofstream pgm(pgm_path, std::ios::binary);
  if (!pgm) throw std::runtime_error("cannot write " + pgm_path.string());
  pgm << "P5\n" << w << ' ' << h << "\n255\n";
  pgm.write(reinterpret_cast<const char*>(sample.mask.data()),
            static_cast<std::streamsize>(sample.mask.size()));
}

}  // namespace evt
