#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "evt/tensor.hpp"

namespace evt {

enum class ModelRole { student, teacher };

std::string to_string(ModelRole role);
ModelRole role_from_string(const std::string& s);

/// Architecture of the hybrid conv-stem + transformer segmentation network.
///
/// Layout:
///   stem.{i}     conv 4×4 stride 2 pad 1 + ReLU, one per stem_channels entry
///   embed        conv patch_size×patch_size stride patch_size -> embed_dim tokens
///   block.{b}    pre-norm MHSA (bias-free q/k/v/o) + pre-norm GELU MLP, residual
///   decoder      1×1 lateral from tokens (upsampled) + 1×1 lateral from the
///                last stem map, summed, ReLU, 3×3 fuse conv + ReLU
///   head         1×1 conv to num_classes, nearest-upsampled to input size
struct ModelConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t num_classes = 14;
  std::vector<std::int64_t> stem_channels{16, 32};
  std::int64_t embed_dim = 64;
  std::int64_t num_heads = 4;
  /// Width of one head; 0 means embed_dim / num_heads. A head-pruned and
  /// materialized model keeps the original head width with fewer heads.
  std::int64_t head_dim = 0;
  std::int64_t num_blocks = 2;
  std::int64_t mlp_ratio = 2;
  std::int64_t decoder_channels = 32;
  std::int64_t patch_size = 2;
  ModelRole role = ModelRole::student;
  /// Input-channel gathers for conv layers whose input channels were pruned
  /// and materialized, keyed by layer name ("stem.1", "embed", ...).
  std::map<std::string, std::vector<std::int64_t>> input_channel_select;

  static ModelConfig student();
  static ModelConfig teacher();

  std::int64_t effective_head_dim() const { return head_dim > 0 ? head_dim : embed_dim / num_heads; }
  std::int64_t attention_dim() const { return num_heads * effective_head_dim(); }
  std::int64_t stem_stride() const { return std::int64_t{1} << stem_channels.size(); }
  std::int64_t grid_height() const { return height / stem_stride() / patch_size; }
  std::int64_t grid_width() const { return width / stem_stride() / patch_size; }
  std::int64_t tokens() const { return grid_height() * grid_width(); }

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected. Missing keys keep `base` values.
  static ModelConfig from_json(const nlohmann::json& j, const ModelConfig& base);
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

/// An instantiated segmentation network.
///
/// Parameter names: stem.{i}.w/.b, embed.w/.b, block.{b}.ln1.g/.b,
/// block.{b}.attn.{q|k|v|o}.w, block.{b}.ln2.g/.b, block.{b}.mlp.{0|1}.w/.b,
/// decoder.lat_tok.w/.b, decoder.lat_stem.w/.b, decoder.fuse.w/.b, head.w/.b.
///
/// Linear weights are stored in×out (y = x·W). Head j owns columns
/// [j·dh, (j+1)·dh) of q/k/v and the same rows of o.
struct SegModel {
  ModelConfig config;
  std::map<std::string, Tensor> params;
  /// Per block keep flags of length num_heads; empty when no head mask is set.
  std::vector<std::vector<std::uint8_t>> head_mask;
  /// Per parameter keep flags (1 = kept). Masked entries are held at zero.
  std::map<std::string, std::vector<std::uint8_t>> weight_masks;

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  bool has_param(const std::string& name) const { return params.count(name) != 0; }
  DType dtype() const;

  /// Deep copy of parameters and masks.
  SegModel clone() const;
  SegModel to(DType dtype) const;
  void set_requires_grad(bool flag);
  void zero_grad();
  /// Re-zeroes every weight_masks entry.
  void apply_masks();
  bool bit_equal(const SegModel& other) const;
};

SegModel build_model(const ModelConfig& config, std::uint64_t seed);

struct ForwardOutput {
  Tensor logits;                          // N×K×H×W
  std::map<std::int64_t, Tensor> features;  // block index -> N×tokens×embed_dim
};

/// Single pass producing logits and the requested block outputs.
ForwardOutput forward(const SegModel& model, const Tensor& image,
                      std::span<const std::int64_t> taps = {});

Tensor forward_segment(const SegModel& model, const Tensor& image);
std::map<std::int64_t, Tensor> extract_features(const SegModel& model, const Tensor& image,
                                                std::span<const std::int64_t> taps);

/// Per-pixel argmax of N×K×H×W logits -> N·H·W class ids.
std::vector<std::uint8_t> argmax_classes(const Tensor& logits);

/// Keep flags per parameter element, combining weight_masks and head_mask
/// (masked head slices of q/k/v columns and o rows). Absent entry = all kept.
std::map<std::string, std::vector<std::uint8_t>> effective_masks(const SegModel& model);

/// include_masked = true counts every stored value; false subtracts every
/// masked element (pruned weights, masked head slices).
std::int64_t count_params(const SegModel& model, bool include_masked = true);

/// Multiply-accumulate counts per image:
///   conv      Cout·Cin·kh·kw·H'·W'
///   linear    tokens·in·out
///   attention 2·tokens²·attention_dim per block (QKᵀ and AV)
/// Normalization, softmax, activations and upsampling are not counted.
struct FlopReport {
  std::int64_t stem = 0;
  std::int64_t embed = 0;
  std::int64_t attention_proj = 0;
  std::int64_t attention_core = 0;
  std::int64_t mlp = 0;
  std::int64_t decoder = 0;
  std::int64_t total() const { return stem + embed + attention_proj + attention_core + mlp + decoder; }
};

FlopReport count_flops(const SegModel& model, std::int64_t height, std::int64_t width);

}  // namespace evt
