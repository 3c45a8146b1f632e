#include <gtest/gtest.h>

#include <fstream>

#include "mgd/checkpoint.hpp"
#include "support.hpp"

using namespace mgd;

namespace {

std::vector<NamedTensor> sample() {
  return {{"stem.conv.weight", {2, 1, 3, 3}, std::vector<float>(18, 0.5f)},
          {"fc.bias", {3}, {1.0f, -2.0f, 3.5f}},
          {"scalar", {}, {7.0f}}};
}

}  // namespace

TEST(Checkpoint, ExactByteLayout) {
  const std::vector<NamedTensor> one{{"ab", {2}, {1.0f, -1.0f}}};
  const auto bytes = encode_checkpoint(one);
  const std::vector<std::uint8_t> expected{
      'M', 'G', 'D', 'C', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version, count
      2, 0, 'a', 'b', 1,                           // name, rank
      2, 0, 0, 0, 0, 0, 0, 0,                      // dim
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x80, 0xbf};
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RoundTrip) {
  const auto dir = mgd::testing::scratch_dir("ckpt");
  const auto path = dir / "a.mgdc";
  write_checkpoint(path, sample());
  const auto back = read_checkpoint(path);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, sample()[i].name);
    EXPECT_EQ(back[i].shape, sample()[i].shape);
    EXPECT_EQ(back[i].data, sample()[i].data);
  }
  EXPECT_EQ(file_hash(path), fnv1a64(encode_checkpoint(sample())));
}

TEST(Checkpoint, RejectsCorruption) {
  auto bytes = encode_checkpoint(sample());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad_version), CheckpointError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 1);
  EXPECT_THROW(decode_checkpoint(truncated), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), CheckpointError);
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.mgdc"), CheckpointError);
}

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cULL);
}
