#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "cfx/tensor_io.hpp"
#include "test_util.hpp"

namespace cfx {
namespace {

TEST(TensorIo, PayloadEncodingIsLittleEndianF32) {
  const RawTensor t{{1, 2, 2}, {0.0f, 1.0f, 2.0f, 3.0f}};
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 7u + 3 * 4 + 16);
  EXPECT_EQ(std::memcmp(bytes.data(), "CFXT", 4), 0);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 1);
  EXPECT_EQ(bytes[6], 3);
  const std::vector<std::uint8_t> dims = {1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0};
  EXPECT_TRUE(std::equal(dims.begin(), dims.end(), bytes.begin() + 7));
  const std::vector<std::uint8_t> payload = {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80, 0x3F,
                                             0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40};
  EXPECT_TRUE(std::equal(payload.begin(), payload.end(), bytes.begin() + 19));
}

TEST(TensorIo, RoundTripIsBitIdentical) {
  test::TempDir dir;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (int trial = 0; trial < 25; ++trial) {
    const std::uint32_t c = 1 + trial % 3, h = 1 + trial % 5, w = 2 + trial % 4;
    RawTensor t{{c, h, w}, {}};
    while (t.data.size() < std::size_t{c} * h * w) {
      const float v = std::bit_cast<float>(bits(rng));
      if (std::isfinite(v)) t.data.push_back(v);
    }
    const auto path = dir.path() / "t.cfxt";
    write_tensor(t, path);
    const auto back = read_tensor(path);
    ASSERT_EQ(back.dims, t.dims);
    ASSERT_EQ(std::memcmp(back.data.data(), t.data.data(), 4 * t.data.size()), 0);
  }
}

TEST(TensorIo, ImageAndAttributionRoundTrip) {
  test::TempDir dir;
  const ImageTensor img(3, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  write_tensor(img, dir.path() / "img.cfxt");
  EXPECT_EQ(read_image(dir.path() / "img.cfxt"), img);
  const AttributionMap phi(2, 2, {0.5f, -0.25f, 0.0f, 1.0f});
  write_tensor(phi, dir.path() / "phi.cfxt");
  EXPECT_EQ(read_attribution(dir.path() / "phi.cfxt"), phi);
}

TEST(TensorIo, RejectsNonFiniteOnWrite) {
  test::TempDir dir;
  const RawTensor t{{2}, {1.0f, std::numeric_limits<float>::quiet_NaN()}};
  try {
    write_tensor(t, dir.path() / "nan.cfxt");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite value"), std::string::npos);
  }
  EXPECT_THROW(ImageTensor(1, 1, 1, {std::numeric_limits<float>::infinity()}), DataError);
}

TEST(TensorIo, BadMagic) {
  auto bytes = encode_tensor({{1}, {1.0f}});
  std::memcpy(bytes.data(), "XXXX", 4);
  try {
    decode_tensor(bytes);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.reason(), "bad magic");
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(TensorIo, TruncatedPayload) {
  auto bytes = encode_tensor({{2, 2}, {1, 2, 3, 4}});
  bytes.resize(bytes.size() - 3);
  try {
    decode_tensor(bytes);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.reason(), "payload shorter than dims imply");
    EXPECT_EQ(e.offset(), bytes.size());
  }
}

TEST(TensorIo, VersionDtypeAndTrailingBytes) {
  auto bytes = encode_tensor({{1}, {1.0f}});
  auto v2 = bytes;
  v2[4] = 2;
  EXPECT_THROW(decode_tensor(v2), ParseError);
  auto f64 = bytes;
  f64[5] = 2;
  EXPECT_THROW(decode_tensor(f64), ParseError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_tensor(longer), ParseError);
  EXPECT_THROW(decode_tensor(std::span<const std::uint8_t>(bytes.data(), 9)), ParseError);
}

TEST(TensorIo, ShapeConversions) {
  EXPECT_EQ(to_image({{2, 3}, std::vector<float>(6, 0.0f)}).channels(), 1u);
  EXPECT_THROW(to_attribution({{2, 2, 2}, std::vector<float>(8, 0.0f)}), DataError);
  EXPECT_THROW(to_image({{4}, std::vector<float>(4, 0.0f)}), DataError);
}

TEST(Tensor, ChannelSumAggregation) {
  const ImageTensor per_channel(3, 1, 2, {1, 2, 10, 20, 100, 200});
  const auto phi = AttributionMap::from_channels(per_channel);
  EXPECT_FLOAT_EQ(phi[0], 111.0f);
  EXPECT_FLOAT_EQ(phi[1], 222.0f);
}

TEST(Tensor, ArgmaxTieBreaksToLowestIndex) {
  const PredictionVector p({0.2, 0.4, 0.4});
  EXPECT_EQ(p.predicted_class, 1u);
}

}  // namespace
}  // namespace cfx
