#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "evt/tensor.hpp"

namespace evt {

/// Procedural stand-in for a densely annotated aerial scene dataset: a
/// textured background (class 0) with class-colored textured blobs placed on
/// top. Class frequencies follow a Zipf law over the foreground classes so a
/// few classes dominate the pixel count.
struct SceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t num_classes = 14;
  std::int64_t min_shapes = 2;
  std::int64_t max_shapes = 5;
  /// Zipf exponent for foreground class frequencies; 0 = uniform.
  double class_frequency_skew = 1.0;
  std::uint64_t seed = 2023;

  void validate() const;
  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j, const SceneSpec& base);
  static SceneSpec from_json(const nlohmann::json& j);
  bool operator==(const SceneSpec&) const = default;
};

struct Sample {
  std::uint64_t index = 0;
  std::vector<float> image;        // 3×H×W in [0, 1]
  std::vector<std::uint8_t> mask;  // H×W class ids
};

enum class SplitRole { train, eval };

/// Eval split indices start here so train and eval never share a sample.
inline constexpr std::uint64_t kEvalIndexOffset = 1'000'000'000ULL;

struct Dataset {
  SceneSpec spec;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::int64_t pixels_per_image() const { return spec.height * spec.width; }

  /// Stacks the selected samples into an N×3×H×W float32 tensor.
  Tensor images(std::span<const std::size_t> which) const;
  std::vector<std::uint8_t> masks(std::span<const std::size_t> which) const;
  Dataset subset(std::size_t begin, std::size_t end) const;
};

/// Fully determined by (spec, index).
Sample generate_sample(const SceneSpec& spec, std::uint64_t index);

/// n samples; train uses indices [0, n), eval uses [kEvalIndexOffset, +n).
Dataset generate_split(const SceneSpec& spec, std::int64_t n, SplitRole role);

/// Pixel count per class over every mask in the dataset.
std::vector<std::int64_t> class_histogram(const Dataset& dataset);

/// Writes <stem>.ppm (binary P6 RGB, 8-bit) and <stem>.pgm (binary P5,
/// one byte per pixel holding the class id).
void export_sample_pnm(const Sample& sample, const SceneSpec& spec,
                       const std::filesystem::path& stem);

}  // namespace evt
