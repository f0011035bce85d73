#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "evt/model.hpp"
#include "evt/quant.hpp"

namespace evt {

/// Binary container, little-endian throughout:
///
///   "EVTC"  u32 version  u64 n  n bytes of JSON {"model": config, "head_mask": [...]}
///   u32 count, then per tensor:
///     u32 name_len, name, u8 encoding (0 f32, 1 f64, 2 int8, 3 binary16),
///     u8 decoded dtype (0 f32, 1 f64), u32 ndim, u64 dims[ndim], f64 scale (int8 only, else 0),
///     u64 payload offset, u64 payload bytes
///   u64 payload_len, payload
///   optional: "MASK" u64 n, n bytes of JSON {"weight_masks": {name: "0110..."}, "ledger": ...}
///
/// int8 entries decode to q·scale and binary16 entries to their exact value,
/// in the recorded dtype. Saving refuses values that are not on the grid of
/// their requested encoding, so every roundtrip is bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointContents {
  SegModel model;
  std::map<std::string, TensorEncoding> encoding;
  nlohmann::json mask_ledger;  // null when absent
};

struct SaveOptions {
  /// Per-parameter on-disk encoding; parameters not listed are stored natively.
  std::map<std::string, TensorEncoding> encoding;
  /// Written into the MASK section when non-null.
  nlohmann::json mask_ledger;
};

std::vector<std::uint8_t> serialize_checkpoint(const SegModel& model, const SaveOptions& options = {});
CheckpointContents deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const SegModel& model, const std::filesystem::path& path,
                     const SaveOptions& options = {});
SegModel load_checkpoint(const std::filesystem::path& path);
CheckpointContents read_checkpoint(const std::filesystem::path& path);

}  // namespace evt
