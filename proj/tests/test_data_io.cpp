#include "mflow/data_io.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace mflow;

namespace {

using Bytes = std::vector<std::uint8_t>;
using Image = GridFunction<float>;

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mflow_test_data_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Bytes be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

Bytes concat(std::initializer_list<Bytes> parts) {
  Bytes out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

Image random_image(int c, int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Image img(c, h, w);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

// Exact lattice rotation by 90 degrees (clockwise as displayed, rows growing downward):
// out(y, x) = in(w - 1 - x, y).
Image lattice_rot90(const Image& in) {
  Image out(in.channels(), in.height(), in.width());
  const int n = in.width();
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) out(c, y, x) = in(c, n - 1 - x, y);
  return out;
}

std::string expect_data_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected DataError";
  return {};
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.header = "format_version = 1\nstep = 12\n";
  ck.arrays.push_back({"param/w", {2, 3}, {1.5f, -2.0f, 0.0f, 3.25f, -0.0f, 1e-30f}});
  ck.arrays.push_back({"adam/m/w", {6}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f}});
  ck.arrays.push_back({"scalar", {1}, {42.0f}});
  return ck;
}

}  // namespace

TEST(Idx, ParsesTwoImagesOfTwoByTwo) {
  const Bytes bytes = concat({{0, 0, 8, 3}, be32(2), be32(2), be32(2), {1, 2, 3, 4, 5, 6, 7, 8}});
  const IdxTensor t = parse_idx_images(bytes);
  EXPECT_EQ(t.magic, kIdxImageMagic);
  EXPECT_EQ(t.dims, (std::vector<std::uint32_t>{2, 2, 2}));
  EXPECT_EQ(t.data, (Bytes{1, 2, 3, 4, 5, 6, 7, 8}));
  const ImageDataset ds = dataset_from_idx(t);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.height, 2);
  EXPECT_EQ(ds.width, 2);
  EXPECT_FLOAT_EQ(ds.images[1](0, 1, 1), static_cast<float>(8 / 127.5 - 1));
}

TEST(Idx, NormalizationEndpoints) {
  const Bytes bytes = concat({{0, 0, 8, 3}, be32(1), be32(1), be32(3), {0, 255, 51}});
  const ImageDataset ds = dataset_from_idx(parse_idx(bytes));
  EXPECT_EQ(ds.images[0](0, 0, 0), -1.0f);
  EXPECT_EQ(ds.images[0](0, 0, 1), 1.0f);
  EXPECT_FLOAT_EQ(ds.images[0](0, 0, 2), -0.6f);
  ds.validate();
}

TEST(Idx, ParsesLabels) {
  const Bytes bytes = concat({{0, 0, 8, 1}, be32(3), {7, 0, 9}});
  const IdxTensor t = parse_idx_labels(bytes);
  EXPECT_EQ(t.dims, (std::vector<std::uint32_t>{3}));
  EXPECT_EQ(t.data, (Bytes{7, 0, 9}));
}

TEST(Idx, DistinctDiagnostics) {
  const std::string label_dims =
      expect_data_error([] { parse_idx_images(concat({{0, 0, 8, 1}, be32(1), be32(1), be32(1), {0}})); });
  EXPECT_NE(label_dims.find("label magic with image dims"), std::string::npos) << label_dims;
  const std::string empty = expect_data_error([] { parse_idx(Bytes{}); });
  EXPECT_NE(empty.find("truncated"), std::string::npos) << empty;
  const std::string short_data =
      expect_data_error([] { parse_idx(concat({{0, 0, 8, 3}, be32(2), be32(2), be32(2), {1, 2, 3}})); });
  EXPECT_NE(short_data.find("truncated"), std::string::npos) << short_data;
  const std::string bad_magic = expect_data_error([] { parse_idx(concat({{1, 2, 8, 3}, be32(1), be32(1), be32(1), {0}})); });
  EXPECT_NE(bad_magic.find("magic"), std::string::npos) << bad_magic;
  const std::string overflow = expect_data_error(
      [] { parse_idx(concat({{0, 0, 8, 3}, be32(0xFFFFFFFF), be32(0xFFFFFFFF), be32(0xFFFFFFFF)})); });
  EXPECT_NE(overflow.find("overflow"), std::string::npos) << overflow;
  EXPECT_NE(label_dims, empty);
  EXPECT_NE(empty, overflow);
}

TEST(IdxProperty, SerializeParseRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 9), byte(0, 255);
  for (int trial = 0; trial < 50; ++trial) {
    IdxTensor t;
    const bool labels = trial % 2 == 1;
    t.magic = labels ? kIdxLabelMagic : kIdxImageMagic;
    t.dims = labels ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(dim(rng))}
                    : std::vector<std::uint32_t>{static_cast<std::uint32_t>(dim(rng)), static_cast<std::uint32_t>(dim(rng)),
                                                 static_cast<std::uint32_t>(dim(rng))};
    std::size_t n = 1;
    for (auto d : t.dims) n *= d;
    for (std::size_t i = 0; i < n; ++i) t.data.push_back(static_cast<std::uint8_t>(byte(rng)));
    const IdxTensor back = parse_idx(serialize_idx(t));
    EXPECT_EQ(back.magic, t.magic);
    EXPECT_EQ(back.dims, t.dims);
    EXPECT_EQ(back.data, t.data);
  }
}

TEST(Idx, LoadFromFileNamesPath) {
  const auto path = scratch("images.idx");
  const Bytes bytes = concat({{0, 0, 8, 3}, be32(1), be32(1), be32(2), {10, 20}});
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(load_idx(path.string()).data, (Bytes{10, 20}));
  const auto missing = (scratch("absent.idx")).string();
  const std::string msg = expect_data_error([&] { load_idx(missing); });
  EXPECT_NE(msg.find(missing), std::string::npos) << msg;
}

TEST(SyntheticShapes, DeterministicAndNormalized) {
  const ImageDataset a = make_synthetic_shapes(20, 16, 5), b = make_synthetic_shapes(20, 16, 5);
  const ImageDataset c = make_synthetic_shapes(20, 16, 6);
  ASSERT_EQ(a.size(), 20u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE((a.images[i].values() == b.images[i].values()).all());
    differs = differs || !(a.images[i].values() == c.images[i].values()).all();
    EXPECT_LE(a.images[i].values().maxCoeff(), 1.0f);
    EXPECT_GE(a.images[i].values().minCoeff(), -1.0f);
    EXPECT_TRUE(a.images[i].values().allFinite());
    EXPECT_GT(a.images[i].values().maxCoeff(), -1.0f);  // something was drawn
  }
  EXPECT_TRUE(differs);
  a.validate();
  EXPECT_EQ(make_synthetic_shapes(0, 16, 1).size(), 0u);
  EXPECT_THROW(make_synthetic_shapes(3, 7, 1), std::invalid_argument);
}

TEST(GaussianToy, DeterministicAndClipped) {
  const ImageDataset a = make_gaussian_toy(50, 8, 3), b = make_gaussian_toy(50, 8, 3);
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE((a.images[i].values() == b.images[i].values()).all());
    sum += a.images[i].values().cast<double>().sum();
    sq += a.images[i].values().cast<double>().square().sum();
  }
  const double n = 50.0 * 64.0;
  EXPECT_NEAR(sum / n, 0.0, 4 * 0.3 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(sq / n), 0.3, 0.02);
  a.validate();
}

TEST(Rotation, ZeroAndFullTurnAreExact) {
  std::mt19937_64 rng(2);
  const Image img = random_image(1, 7, 7, rng);
  EXPECT_TRUE((rotate_image(img, 0.0).values() == img.values()).all());
  EXPECT_TRUE((rotate_image(img, 360.0).values() == img.values()).all());
  EXPECT_TRUE((rotate_image(img, 450.0).values() == rotate_image(img, 90.0).values()).all());
  ImageDataset ds;
  ds.height = ds.width = 7;
  ds.images = {img, random_image(1, 7, 7, rng)};
  const ImageDataset same = rotate_dataset(ds, RotationPolicy{{0.0}}, 9);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_TRUE((same.images[i].values() == ds.images[i].values()).all());
}

TEST(Rotation, QuarterTurnMatchesLatticeRotation) {
  std::mt19937_64 rng(3);
  for (int side : {6, 7, 28}) {
    const Image img = random_image(2, side, side, rng);
    const Image rot = rotate_image(img, 90.0);
    const Image ref = lattice_rot90(img);
    EXPECT_LE((rot.values() - ref.values()).abs().maxCoeff(), 1e-6f) << side;
    // four quarter turns come back
    Image back = img;
    for (int i = 0; i < 4; ++i) back = rotate_image(back, 90.0);
    EXPECT_LE((back.values() - img.values()).abs().maxCoeff(), 1e-6f);
  }
}

TEST(Rotation, GenericAngleFillsCornersAndStaysInRange) {
  Image img(1, 9, 9, 1.0f);
  const Image rot = rotate_image(img, 45.0);
  EXPECT_EQ(rot(0, 0, 0), -1.0f);   // corner falls outside the source
  EXPECT_EQ(rot(0, 4, 4), 1.0f);    // centre is fixed
  EXPECT_LE(rot.values().maxCoeff(), 1.0f);
  EXPECT_GE(rot.values().minCoeff(), -1.0f);
}

TEST(Rotation, DatasetDeterministicPerSeed) {
  ImageDataset ds = make_synthetic_shapes(6, 12, 4);
  const ImageDataset a = rotate_dataset(ds, RotationPolicy{}, 11), b = rotate_dataset(ds, RotationPolicy{}, 11);
  const ImageDataset c = rotate_dataset(ds, RotationPolicy{}, 12);
  bool differs = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_TRUE((a.images[i].values() == b.images[i].values()).all());
    differs = differs || !(a.images[i].values() == c.images[i].values()).all();
  }
  EXPECT_TRUE(differs);
}

TEST(Checkpoint, EncodeDecodeIsBitExact) {
  const Checkpoint ck = sample_checkpoint();
  const Bytes bytes = encode_checkpoint(ck);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "MFLOWCK1");
  const std::uint32_t header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::uint32_t>(bytes[11]) << 24);
  EXPECT_EQ(header_len, ck.header.size());
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.header, ck.header);
  ASSERT_EQ(back.arrays.size(), ck.arrays.size());
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    EXPECT_EQ(back.arrays[i].name, ck.arrays[i].name);
    EXPECT_EQ(back.arrays[i].dims, ck.arrays[i].dims);
    ASSERT_EQ(back.arrays[i].data.size(), ck.arrays[i].data.size());
    EXPECT_EQ(std::memcmp(back.arrays[i].data.data(), ck.arrays[i].data.data(), ck.arrays[i].data.size() * sizeof(float)), 0);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_NE(back.find("scalar"), nullptr);
  EXPECT_EQ(back.find("absent"), nullptr);
}

TEST(Checkpoint, PayloadIsLittleEndianFloat32) {
  Checkpoint ck;
  ck.header = "format_version = 1\n";
  ck.arrays.push_back({"x", {1}, {1.0f}});
  const Bytes bytes = encode_checkpoint(ck);
  // 1.0f = 0x3F800000
  EXPECT_EQ(Bytes(bytes.end() - 4, bytes.end()), (Bytes{0x00, 0x00, 0x80, 0x3F}));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = scratch("ck.bin").string();
  save_checkpoint(path, sample_checkpoint());
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(sample_checkpoint()));
}

TEST(Checkpoint, Errors) {
  Bytes bytes = encode_checkpoint(sample_checkpoint());
  Bytes truncated(bytes.begin(), bytes.end() - 3);
  EXPECT_NE(expect_data_error([&] { decode_checkpoint(truncated); }).find("corrupt payload"), std::string::npos);
  Bytes bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(expect_data_error([&] { decode_checkpoint(bad); }).find("magic"), std::string::npos);
  Checkpoint future = sample_checkpoint();
  future.header = "format_version = 2\n";
  const std::string msg = expect_data_error([&] { decode_checkpoint(encode_checkpoint(future)); });
  EXPECT_NE(msg.find("version mismatch"), std::string::npos) << msg;
  Checkpoint inconsistent = sample_checkpoint();
  inconsistent.arrays[0].dims = {4};
  EXPECT_NE(expect_data_error([&] { encode_checkpoint(inconsistent); }).find("param/w"), std::string::npos);
  const std::string missing = scratch("none.bin").string();
  EXPECT_NE(expect_data_error([&] { load_checkpoint(missing); }).find(missing), std::string::npos);
}

TEST(Grid, PixelMappingEndpoints) {
  EXPECT_EQ(to_pixel(-1.0f), 0);
  EXPECT_EQ(to_pixel(1.0f), 255);
  EXPECT_EQ(to_pixel(0.0f), 128);
  EXPECT_EQ(to_pixel(-3.0f), 0);
  EXPECT_EQ(to_pixel(7.0f), 255);
}

TEST(Grid, SingleTile) {
  Image img(1, 2, 3, 1.0f);
  img(0, 1, 2) = -1.0f;
  const Bytes bytes = encode_grid({img}, 1);
  const std::string head = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), head.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(head.size())), head);
  EXPECT_EQ(Bytes(bytes.end() - 6, bytes.end()), (Bytes{255, 255, 255, 255, 255, 0}));
}

TEST(Grid, FiveImagesTwoColumnsLayout) {
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.emplace_back(1, 2, 2, -1.0f + 0.5f * static_cast<float>(i) / 2.0f);
  const Image grid = decode_pgm(encode_grid(imgs, 2));
  ASSERT_EQ(grid.height(), 6);
  ASSERT_EQ(grid.width(), 4);
  for (int i = 0; i < 6; ++i) {
    const int ty = i / 2, tx = i % 2;
    const float expected = i < 5 ? static_cast<float>(to_pixel(imgs[static_cast<std::size_t>(i)](0, 0, 0))) / 127.5f - 1.0f
                                 : 128.0f / 127.5f - 1.0f;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) EXPECT_FLOAT_EQ(grid(0, ty * 2 + y, tx * 2 + x), expected) << i;
  }
}

TEST(Grid, EmitAndLoadPgm) {
  std::mt19937_64 rng(4);
  const Image img = random_image(1, 5, 4, rng);
  const auto path = scratch("grid.pgm").string();
  emit_grid({img}, 3, path);
  const Image back = load_pgm(path);
  ASSERT_TRUE(back.same_shape(img));
  EXPECT_LE((back.values() - img.values()).abs().maxCoeff(), 1.0f / 127.5f + 1e-6f);
  EXPECT_THROW(encode_grid({}, 1), DataError);
  EXPECT_THROW(encode_grid({img, Image(1, 4, 4)}, 2), DataError);
  const std::string bad_dir = "/nonexistent_mflow_dir/grid.pgm";
  EXPECT_NE(expect_data_error([&] { emit_grid({img}, 1, bad_dir); }).find(bad_dir), std::string::npos);
  EXPECT_THROW(decode_pgm(Bytes{'P', '2', '\n'}), DataError);
}

TEST(Csv, HeaderQuotingAndErrors) {
  const auto path = scratch("m.csv").string();
  emit_csv({"step", "note"}, {{"1", "plain"}, {"2", "a,b"}, {"3", "say \"hi\""}}, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "step,note\n1,plain\n2,\"a,b\"\n3,\"say \"\"hi\"\"\"\n");
  EXPECT_THROW(emit_csv({"a", "b"}, {{"1"}}, path), DataError);
  EXPECT_THROW(emit_csv({}, {}, path), DataError);
}

TEST(Mmd, IdenticalSets) {
  std::mt19937_64 rng(5);
  std::vector<Image> a;
  for (int i = 0; i < 10; ++i) a.push_back(random_image(1, 3, 3, rng));
  EXPECT_NEAR(mmd_metric(a, a, 1.0, false), 0.0, 1e-12);
  EXPECT_LE(mmd_metric(a, a, 1.0, true), 1e-12);
}

TEST(Mmd, SeparatedPointMasses) {
  // a = {0, 0}, b = {d, d}: biased = 2 k(0) - 2 k(d); unbiased = same (within-set pairs equal k(0))
  const std::vector<Image> a = {Image(1, 1, 2, 0.0f), Image(1, 1, 2, 0.0f)};
  const std::vector<Image> b = {Image(1, 1, 2, 0.5f), Image(1, 1, 2, 0.5f)};
  const double bw = 0.4;
  const double k_far = std::exp(-(0.25 + 0.25) / (2 * bw * bw));
  EXPECT_NEAR(mmd_metric(a, b, bw, true), 2.0 - 2.0 * k_far, 1e-12);
  EXPECT_NEAR(mmd_metric(a, b, bw, false), 2.0 - 2.0 * k_far, 1e-12);
}

TEST(Mmd, MatchesPairwiseOracle) {
  std::mt19937_64 rng(6);
  std::vector<Image> a, b;
  for (int i = 0; i < 6; ++i) a.push_back(random_image(1, 2, 2, rng));
  for (int i = 0; i < 5; ++i) b.push_back(random_image(1, 2, 2, rng));
  const double bw = 0.8;
  auto k = [&](const Image& x, const Image& y) {
    double d = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) d += std::pow(double(x.values()[i]) - y.values()[i], 2);
    return std::exp(-d / (2 * bw * bw));
  };
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if (i != j) xx += k(a[i], a[j]);
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (i != j) yy += k(b[i], b[j]);
  for (const auto& x : a)
    for (const auto& y : b) xy += k(x, y);
  const double ref = xx / 30.0 + yy / 20.0 - 2.0 * xy / 30.0;
  EXPECT_NEAR(mmd_metric(a, b, bw), ref, 1e-12);
}

TEST(MmdProperty, InvariantUnderCommonPermutation) {
  std::mt19937_64 rng(7);
  std::vector<Image> a, b;
  for (int i = 0; i < 8; ++i) a.push_back(random_image(1, 3, 3, rng));
  for (int i = 0; i < 8; ++i) b.push_back(random_image(1, 3, 3, rng));
  const double base = mmd_metric(a, b, 1.2);
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  EXPECT_NEAR(mmd_metric(a, b, 1.2), base, 1e-12);
  EXPECT_NEAR(mmd_metric(a, b, 1.2), mmd_metric(b, a, 1.2), 1e-12);
}

TEST(Mmd, Errors) {
  const std::vector<Image> one = {Image(1, 2, 2)};
  const std::vector<Image> two = {Image(1, 2, 2), Image(1, 2, 2)};
  EXPECT_THROW(mmd_metric(one, two, 1.0), std::invalid_argument);
  EXPECT_THROW(mmd_metric(two, two, 0.0), std::invalid_argument);
  EXPECT_THROW(mmd_metric(two, {Image(1, 3, 3), Image(1, 3, 3)}, 1.0), std::invalid_argument);
  EXPECT_DOUBLE_EQ(median_pairwise_distance({Image(1, 1, 1, 0.0f), Image(1, 1, 1, 0.5f)}), 0.5);
}
