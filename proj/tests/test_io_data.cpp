#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <set>

#include "inspect/binary_io.hpp"
#include "inspect/data.hpp"
#include "inspect/dataset_io.hpp"
#include "inspect/random.hpp"
#include "inspect/tensor_file.hpp"

using namespace inspect;
namespace fs = std::filesystem;

namespace {

// Bit-at-a-time CRC-32, no table.
std::uint32_t slow_crc32(const Bytes& data) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::uint8_t b : data) {
    c ^= b;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

Bytes as_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("inspect-test-" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Crc32, KnownCheckValue) {
  EXPECT_EQ(crc32(as_bytes("123456789")), 0xCBF43926u);
  EXPECT_EQ(crc32(Bytes{}), 0u);
}

TEST(Crc32, MatchesBitwiseOracleOnRandomInputs) {
  Rng rng(11, 0);
  for (int trial = 0; trial < 200; ++trial) {
    Bytes b(rng.below(300));
    for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
    EXPECT_EQ(crc32(b), slow_crc32(b));
  }
}

TEST(ByteReader, ReportsOffsetOfTruncation) {
  ByteWriter w;
  w.u32(7);
  w.u8(1);
  const Bytes b = w.take();
  ByteReader r(b);
  EXPECT_EQ(r.u32(), 7u);
  try {
    r.u32();
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(TensorFile, LayoutMatchesHandEncoding) {
  std::vector<TensorBlock> blocks{{"ab", {2}, {1.5, -2.0}}};
  Bytes expect = as_bytes("INSPW1");
  auto put = [&](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) expect.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(2, 4);
  expect.push_back('a');
  expect.push_back('b');
  put(1, 4);
  put(2, 8);
  for (double d : {1.5, -2.0}) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put(bits, 8);
  }
  EXPECT_EQ(encode_tensor_blocks(blocks), expect);
  EXPECT_EQ(decode_tensor_blocks(expect), blocks);
}

TEST(TensorFile, RoundTripPreservesSpecialValues) {
  std::vector<TensorBlock> blocks{
      {"x", {2, 3}, {0.0, -0.0, 1e-310, std::numeric_limits<double>::max(), -1.0 / 3.0, 42.0}},
      {"empty", {0}, {}}};
  const Bytes once = encode_tensor_blocks(blocks);
  const auto back = decode_tensor_blocks(once);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back[0].values[i]), std::bit_cast<std::uint64_t>(blocks[0].values[i]));
  }
  EXPECT_EQ(encode_tensor_blocks(back), once);
}

TEST(TensorFile, RejectsMismatchedShapeAndOversizedClaims) {
  std::vector<TensorBlock> bad{{"x", {3}, {1.0}}};
  EXPECT_THROW(encode_tensor_blocks(bad), ConsistencyError);
  std::vector<TensorBlock> ok{{"x", {1}, {1.0}}};
  Bytes b = encode_tensor_blocks(ok);
  // Claim a huge dimension: the decoder must refuse before allocating.
  const std::size_t dim_at = 6 + 4 + 1 + 4;
  for (int i = 0; i < 8; ++i) b[dim_at + i] = 0xFF;
  try {
    decode_tensor_blocks(b);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), dim_at + 8);
  }
}

TEST(SyntheticData, IsDeterministicPerSeedAndIndex) {
  SyntheticLineConfig cfg;
  cfg.seed = 5;
  const auto a = generate_line_images(cfg, 3, 12, 2);
  const auto b = generate_line_images(cfg, 3, 12, 2);
  EXPECT_EQ(a, b);
  cfg.seed = 6;
  EXPECT_NE(generate_line_images(cfg, 3, 12, 2), a);
  std::set<std::string> ids;
  for (const auto& s : a) ids.insert(s.id);
  EXPECT_EQ(ids.size(), a.size());
}

TEST(SyntheticData, BalancedCountsAndValidImages) {
  for (auto mode : {DefectMode::global_shape, DefectMode::local_spot}) {
    for (int channels : {1, 3}) {
      SyntheticLineConfig cfg;
      cfg.mode = mode;
      cfg.channels = channels;
      cfg.height = cfg.width = 24;
      const auto v = generate_balanced(cfg, 0, 7, 5);
      int ok = 0, ng = 0;
      for (const auto& s : v) {
        (s.label == 1 ? ok : ng) += 1;
        EXPECT_NO_THROW(validate_image(s.image));
        EXPECT_EQ(s.image.channels, channels);
        if (s.defect_box) {
          EXPECT_EQ(s.label, 0);
          EXPECT_TRUE(s.defect_box->inside(24, 24));
        }
        if (mode == DefectMode::local_spot && s.label == 0) EXPECT_TRUE(s.defect_box.has_value());
      }
      EXPECT_EQ(ok, 7);
      EXPECT_EQ(ng, 5);
    }
  }
}

TEST(SyntheticData, BrightnessDriftDarkensParts) {
  SyntheticLineConfig cfg;
  cfg.drift.brightness_per_tick = -0.01;
  auto mean = [](const std::vector<Sample>& v) {
    double t = 0;
    std::size_t n = 0;
    for (const auto& s : v)
      for (double x : s.image.data) t += x, ++n;
    return t / n;
  };
  EXPECT_LT(mean(generate_balanced(cfg, 30, 10, 10)), mean(generate_balanced(cfg, 0, 10, 10)));
}

TEST(Roi, CropMatchesPixelsAndRejectsOutOfBounds) {
  TensorImage img(6, 6, 1);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) img.at(y, x) = (y * 6 + x) / 36.0;
  const auto box = RoiBox::from_corner(1, 2, 3, 2);
  const auto c = crop_roi(img, box);
  ASSERT_EQ(c.height, 3);
  ASSERT_EQ(c.width, 2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) EXPECT_EQ(c.at(i, j), img.at(1 + i, 2 + j));
  EXPECT_THROW(crop_roi(img, RoiBox::from_corner(4, 4, 3, 3)), RoiOutOfBounds);
  EXPECT_THROW(crop_roi(img, RoiBox{3, 3, 0, 2}), RoiOutOfBounds);
}

TEST(Augment, SizesLabelsAndRange) {
  SyntheticLineConfig cfg;
  cfg.mode = DefectMode::local_spot;
  cfg.height = cfg.width = 20;
  Dataset d{"base", generate_balanced(cfg, 0, 4, 4)};
  AugmentationSpec spec;
  spec.multiplier = 5;
  spec.seed = 3;
  ProjectiveOp shift;
  shift.jitter[2] = shift.jitter[5] = 1.5;
  spec.ops = {shift, ColorOp{0.1, 0.05}, NoiseOp{NoiseKind::gaussian, 0.02}};
  const auto out = augment(d, spec);
  ASSERT_EQ(out.size(), 40u);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Sample& src = d.samples[i % d.size()];
    EXPECT_EQ(out.samples[i].label, src.label);
    EXPECT_NO_THROW(validate_image(out.samples[i].image));
    EXPECT_EQ(out.samples[i].defect_box.has_value(), src.defect_box.has_value());
    if (out.samples[i].defect_box) EXPECT_TRUE(out.samples[i].defect_box->inside(20, 20));
    EXPECT_EQ(out.samples[i].source, i < d.size() ? src.source : SampleSource::augmented);
  }
  EXPECT_EQ(augment(d, spec), out);
  spec.multiplier = 0;
  EXPECT_THROW(augment(d, spec), ConfigError);
}

TEST(Augment, IdentityHomographyKeepsImage) {
  SyntheticLineConfig cfg;
  Dataset d{"base", generate_balanced(cfg, 0, 2, 2)};
  AugmentationSpec spec;
  spec.multiplier = 2;
  spec.ops = {ProjectiveOp{}};
  const auto out = augment(d, spec);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& a = out.samples[d.size() + i].image.data;
    const auto& b = d.samples[i].image.data;
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(DatasetDirectory, RoundTripIsBitExact) {
  SyntheticLineConfig g;
  g.seed = 8;
  SyntheticLineConfig l = g;
  l.mode = DefectMode::local_spot;
  l.channels = 3;
  l.height = l.width = 20;
  Dataset d{"mixed", generate_balanced(g, 0, 3, 3)};
  for (auto& s : generate_balanced(l, 2, 2, 2, 1)) d.samples.push_back(s);
  d.samples[0].source = SampleSource::captured;
  d.samples[1].image.data[0] = 1e-300;

  const auto dir = scratch_dir("dataset");
  save_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest"));
  const auto back = load_dataset(dir);
  EXPECT_EQ(back, d);
  const auto dir2 = scratch_dir("dataset2");
  save_dataset(back, dir2);
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir);
    EXPECT_EQ(read_file(e.path().string()), read_file((dir2 / rel).string())) << rel;
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(DatasetDirectory, CorruptManifestAndImageAreFormatErrors) {
  SyntheticLineConfig g;
  Dataset d{"one", generate_balanced(g, 0, 1, 1)};
  const auto dir = scratch_dir("corrupt");
  save_dataset(d, dir);
  write_file((dir / "images/000000.tensor").string(), as_bytes("INSPW1\x01"));
  EXPECT_THROW(load_dataset(dir), FormatError);
  write_file((dir / "manifest").string(), as_bytes("{not json"));
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}
