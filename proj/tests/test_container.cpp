#include <gtest/gtest.h>

#include <cstring>
#include <limits>

#include "counterfort/container.hpp"
#include "oracles.hpp"

using namespace counterfort;

namespace {

Container sample() {
  Container c;
  c.kind = "network";
  c.meta = {{"arch", "mlp-small"}, {"n", 3}};
  c.tensors.emplace_back("a", Tensor({2, 2}, std::vector<double>{1.5, -0.0, std::numeric_limits<double>::denorm_min(), 1e300}));
  c.tensors.emplace_back("b", Tensor({3}, std::vector<double>{0.1, 0.2, 0.3}));
  return c;
}

}  // namespace

TEST(Container, LayoutStartsWithMagicVersionAndHeaderLength) {
  const auto bytes = encode_container(sample());
  ASSERT_GT(bytes.size(), 20u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CFORTBIN");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11], 0);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(header_len));
  EXPECT_EQ(header.at("kind"), "network");
  EXPECT_EQ(bytes.size(), 20 + header_len + 8 * 7 + 4);
  // First payload value, little-endian IEEE-754.
  double first;
  std::memcpy(&first, bytes.data() + 20 + header_len, 8);
  EXPECT_EQ(first, 1.5);
}

TEST(Container, RoundTripPreservesBits) {
  const Container c = sample();
  const Container back = decode_container(encode_container(c));
  EXPECT_EQ(back.kind, c.kind);
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(std::memcmp(back.tensor("a").data(), c.tensor("a").data(), 32), 0);
  EXPECT_TRUE(std::signbit(back.tensor("a")[1]));
  EXPECT_TRUE(back.has_tensor("b"));
  EXPECT_FALSE(back.has_tensor("c"));
}

TEST(Container, EncodingIsDeterministic) { EXPECT_EQ(encode_container(sample()), encode_container(sample())); }

TEST(Container, NewerVersionRaisesVersionError) {
  auto bytes = encode_container(sample());
  bytes[8] = 2;
  EXPECT_THROW(decode_container(bytes), VersionError);
}

TEST(Container, CorruptionRaisesFormatError) {
  const auto good = encode_container(sample());
  auto flipped = good;
  flipped[flipped.size() - 10] ^= 0x01;
  EXPECT_THROW(decode_container(flipped), FormatError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_container(truncated), FormatError);
  auto magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_container(magic), FormatError);
  EXPECT_THROW(decode_container({}), FormatError);
}

TEST(Container, FileHelpers) {
  oracle::TempDir dir("container");
  save_container(sample(), dir.file("x.cfb"));
  EXPECT_EQ(load_container(dir.file("x.cfb")).tensor("b").values, (std::vector<double>{0.1, 0.2, 0.3}));
  EXPECT_THROW(load_container(dir.file("missing.cfb")), Error);
}
