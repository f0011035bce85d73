#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "evt/checkpoint.hpp"
#include "evt/prune.hpp"
#include "evt/quant.hpp"
#include "test_util.hpp"

using namespace evt;

namespace {

std::filesystem::path tmp(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "evt_ckpt_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundtripIsBitExact) {
  auto m = build_model(ModelConfig::student(), 3);
  m.head_mask = {{1, 1, 0, 1}, {1, 1, 1, 1}};
  save_checkpoint(m, tmp("a.ckpt"));
  const auto back = load_checkpoint(tmp("a.ckpt"));
  EXPECT_TRUE(back.bit_equal(m));
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.head_mask, m.head_mask);
  const auto x = testutil::random_tensor({1, 3, 64, 64}, 1, DType::f32, 0, 1);
  EXPECT_TRUE(forward_segment(back, x).bit_equal(forward_segment(m, x)));
}

TEST(Checkpoint, Float64Roundtrip) {
  const auto m = build_model(testutil::tiny_config(), 3).to(DType::f64);
  const auto back = deserialize_checkpoint(serialize_checkpoint(m)).model;
  EXPECT_EQ(back.dtype(), DType::f64);
  EXPECT_TRUE(back.bit_equal(m));
}

TEST(Checkpoint, SaveTwiceIsByteIdentical) {
  const auto m = build_model(ModelConfig::student(), 3);
  EXPECT_EQ(serialize_checkpoint(m), serialize_checkpoint(m));
}

TEST(Checkpoint, BadMagic) {
  auto bytes = serialize_checkpoint(build_model(testutil::tiny_config(), 0));
  bytes[0] = 'X';
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, VersionBump) {
  auto bytes = serialize_checkpoint(build_model(testutil::tiny_config(), 0));
  const std::uint32_t v = kCheckpointVersion + 1;
  std::memcpy(bytes.data() + 4, &v, 4);
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected UnsupportedVersionError";
  } catch (const UnsupportedVersionError& e) {
    EXPECT_EQ(e.version(), v);
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, TruncationDetected) {
  const auto bytes = serialize_checkpoint(build_model(testutil::tiny_config(), 0));
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(deserialize_checkpoint(t), FormatError) << "cut at " << cut;
  }
}

TEST(Checkpoint, MissingFile) { EXPECT_THROW(load_checkpoint(tmp("does_not_exist.ckpt")), std::exception); }

TEST(Checkpoint, QuantizedEncodingsRoundtrip) {
  const auto m = build_model(testutil::tiny_config(), 4);
  const auto calib = generate_split(SceneSpec{.height = 32, .width = 32}, 4, SplitRole::train);
  for (auto mode : {QuantMode::fp16, QuantMode::int8}) {
    QuantSpec spec;
    spec.mode = mode;
    const auto q = quantize_model(m, spec, &calib);
    SaveOptions opts;
    opts.encoding = q.encoding;
    const auto bytes = serialize_checkpoint(q.model, opts);
    const auto back = deserialize_checkpoint(bytes);
    EXPECT_TRUE(back.model.bit_equal(q.model));
    EXPECT_LT(bytes.size(), serialize_checkpoint(m).size());
    for (const auto& [name, e] : q.encoding) EXPECT_EQ(back.encoding.at(name).kind, e.kind) << name;
  }
}

TEST(Checkpoint, OffGridValuesRefused) {
  const auto m = build_model(testutil::tiny_config(), 4);
  SaveOptions opts;
  opts.encoding["head.w"] = TensorEncoding{TensorEncoding::Kind::fp16, 0};
  EXPECT_THROW(serialize_checkpoint(m, opts), ContractError);
}

TEST(Checkpoint, MaskSectionRoundtrip) {
  const auto m = build_model(ModelConfig::student(), 5);
  PruneSpec spec;
  spec.granularity = Granularity::unstructured;
  spec.sparsity = 0.3;
  const auto mask = select_and_mask(m, spec);
  const auto pruned = apply_mask(m, mask);
  SaveOptions opts;
  opts.mask_ledger = mask.to_json();
  const auto back = deserialize_checkpoint(serialize_checkpoint(pruned, opts));
  EXPECT_TRUE(back.model.bit_equal(pruned));
  EXPECT_EQ(back.model.weight_masks, pruned.weight_masks);
  EXPECT_EQ(back.mask_ledger, opts.mask_ledger);
}
