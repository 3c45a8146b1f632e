#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "mgd/data.hpp"
#include "support.hpp"

using namespace mgd;
namespace fs = std::filesystem;

namespace {

DataErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no DataError thrown";
  return DataErrorKind::io;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const Normalization kIdentity{{0.0f}, {1.0f}};

}  // namespace

TEST(Idx, TwoImageFixtureExactPixels) {
  const auto dir = mgd::testing::scratch_dir("idx");
  // Hand-built files: 2 images of 2x3.
  write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                            0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 17});
  write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 2, 7, 2});
  const auto ds = load_idx(dir / "img", dir / "lab", kIdentity);
  ASSERT_EQ(ds.images.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{7, 2}));
  EXPECT_EQ(ds.class_count, 8u);
  const float expected[] = {0, 0.2f, 0.4f, 0.6f, 0.8f, 1, 1, 0, 0, 0, 0, 17 / 255.0f};
  for (std::size_t i = 0; i < 12; ++i) EXPECT_FLOAT_EQ(ds.images.data()[i], expected[i]);
}

TEST(Idx, WriterRoundTripAndNormalization) {
  const auto dir = mgd::testing::scratch_dir("idx_rt");
  std::vector<std::uint8_t> pixels(5 * 4 * 4);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<std::uint8_t>(i * 7 % 256);
  const std::vector<std::uint8_t> labels{0, 1, 2, 1, 0};
  write_idx_images(dir / "img", 5, 4, 4, pixels);
  write_idx_labels(dir / "lab", labels);
  const auto raw = load_idx(dir / "img", dir / "lab", kIdentity);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    EXPECT_FLOAT_EQ(raw.images.data()[i], static_cast<float>(pixels[i]) / 255.0f);
  const auto norm = load_idx(dir / "img", dir / "lab");
  double mean = 0, sq = 0;
  for (float v : norm.images.data()) mean += v;
  mean /= static_cast<double>(norm.images.size());
  for (float v : norm.images.data()) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(norm.images.size())), 1.0, 1e-2);
  ASSERT_EQ(norm.normalization.mean.size(), 1u);
}

TEST(Idx, DistinctErrors) {
  const auto dir = mgd::testing::scratch_dir("idx_err");
  write_idx_images(dir / "img", 2, 2, 2, std::vector<std::uint8_t>(8, 1));
  write_idx_labels(dir / "lab", std::vector<std::uint8_t>{0, 1});
  write_idx_labels(dir / "lab3", std::vector<std::uint8_t>{0, 1, 1});
  auto bad = read_bytes(dir / "img");
  bad[3] = 0x01;
  write_bytes(dir / "bad", bad);
  auto cut = read_bytes(dir / "img");
  cut.pop_back();
  write_bytes(dir / "cut", cut);
  EXPECT_EQ(kind_of([&] { load_idx(dir / "bad", dir / "lab"); }), DataErrorKind::bad_magic);
  EXPECT_EQ(kind_of([&] { load_idx(dir / "cut", dir / "lab"); }), DataErrorKind::truncated);
  EXPECT_EQ(kind_of([&] { load_idx(dir / "img", dir / "lab3"); }), DataErrorKind::count_mismatch);
  EXPECT_EQ(kind_of([&] { load_idx(dir / "missing", dir / "lab"); }), DataErrorKind::io);
}

TEST(Cifar, OneRecordFixture) {
  const auto dir = mgd::testing::scratch_dir("cifar");
  std::vector<std::uint8_t> record(3073);
  record[0] = 6;
  for (std::size_t i = 0; i < 3072; ++i) record[1 + i] = static_cast<std::uint8_t>((i * 13 + i / 1024) % 256);
  write_bytes(dir / "one.bin", record);
  const std::vector<fs::path> paths{dir / "one.bin"};
  const Normalization id{{0, 0, 0}, {1, 1, 1}};
  const auto ds = load_cifar_binary(paths, id);
  ASSERT_EQ(ds.images.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(ds.labels, std::vector<std::int32_t>{6});
  EXPECT_EQ(ds.class_count, 10u);
  // R plane, then G, then B, each row-major.
  EXPECT_FLOAT_EQ(ds.images.at({0, 0, 0, 0}), record[1] / 255.0f);
  EXPECT_FLOAT_EQ(ds.images.at({0, 1, 2, 5}), record[1 + 1024 + 2 * 32 + 5] / 255.0f);
  EXPECT_FLOAT_EQ(ds.images.at({0, 2, 31, 31}), record[3072] / 255.0f);
}

TEST(Cifar, MultiFileCountsAndErrors) {
  const auto dir = mgd::testing::scratch_dir("cifar_multi");
  std::vector<fs::path> paths;
  std::size_t expected = 0;
  for (std::size_t f = 0; f < 5; ++f) {
    const std::size_t n = f + 1;
    std::vector<std::uint8_t> labels(n), pixels(n * 3072, 9);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
    paths.push_back(dir / ("data_batch_" + std::to_string(f + 1) + ".bin"));
    write_cifar_binary(paths.back(), labels, pixels);
    EXPECT_EQ(fs::file_size(paths.back()), n * 3073);
    expected += n;
  }
  EXPECT_EQ(load_cifar_binary(paths).size(), expected);

  auto bytes = read_bytes(paths[0]);
  bytes.pop_back();
  write_bytes(dir / "short.bin", bytes);
  const std::vector<fs::path> short_path{dir / "short.bin"};
  EXPECT_EQ(kind_of([&] { load_cifar_binary(short_path); }), DataErrorKind::bad_length);
  bytes = read_bytes(paths[0]);
  bytes[0] = 10;
  write_bytes(dir / "label.bin", bytes);
  const std::vector<fs::path> label_path{dir / "label.bin"};
  EXPECT_EQ(kind_of([&] { load_cifar_binary(label_path); }), DataErrorKind::bad_label);
}

TEST(Synthetic, DeterministicAndBalanced) {
  SyntheticOptions o;
  o.classes = 4;
  o.per_class = 25;
  o.size = 12;
  o.noise = 0.3;
  o.jitter = 1;
  o.seed = 5;
  const auto a = make_synthetic(o);
  const auto b = make_synthetic(o);
  EXPECT_TRUE(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
  EXPECT_EQ(a.labels, b.labels);
  std::vector<int> hist(4, 0);
  for (auto l : a.labels) ++hist[static_cast<std::size_t>(l)];
  EXPECT_EQ(hist, (std::vector<int>{25, 25, 25, 25}));
  o.seed = 6;
  const auto c = make_synthetic(o);
  EXPECT_FALSE(std::equal(a.images.data().begin(), a.images.data().end(), c.images.data().begin()));
  EXPECT_THROW(make_synthetic({.classes = 1}), std::invalid_argument);
}

TEST(Synthetic, ZeroNoiseNearestCentroidIsPerfect) {
  SyntheticOptions o;
  o.classes = 10;
  o.per_class = 20;
  o.size = 16;
  o.seed = 1;
  const auto train = make_synthetic(o);
  o.seed = 2;
  const auto val = make_synthetic(o, train.normalization, Split::val);
  const auto per = 3 * 16 * 16;
  std::vector<double> centroid(10 * per, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t p = 0; p < per; ++p)
      centroid[static_cast<std::size_t>(train.labels[i]) * per + p] += train.images.data()[i * per + p] / 20.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < 10; ++k) {
      double d = 0;
      for (std::size_t p = 0; p < per; ++p) {
        const double diff = val.images.data()[i * per + p] - centroid[k * per + p];
        d += diff * diff;
      }
      if (d < best_d) best_d = d, best = k;
    }
    correct += best == static_cast<std::size_t>(val.labels[i]);
  }
  EXPECT_EQ(correct, val.size());
}

TEST(Synthetic, TrainSplitNormalization) {
  SyntheticOptions o;
  o.per_class = 30;
  o.size = 8;
  o.noise = 0.5;
  const auto ds = make_synthetic(o);
  const auto plane = 64;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p, ++n) mean += ds.images.data()[(i * 3 + c) * plane + p];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = ds.images.data()[(i * 3 + c) * plane + p] - mean;
        sq += d * d;
      }
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n)), 1.0, 1e-2);
  }
}

TEST(Batches, PermutationCountAndOrder) {
  SyntheticOptions o;
  o.classes = 3;
  o.per_class = 7;
  o.size = 4;
  const auto ds = make_synthetic(o);
  for (std::size_t bs : {1u, 4u, 5u, 21u, 50u}) {
    auto it = batches(ds, bs, 11, 2);
    EXPECT_EQ(it.batch_count(), (ds.size() + bs - 1) / bs);
    std::vector<std::size_t> seen;
    Batch b;
    std::size_t count = 0;
    while (it.next(b)) {
      ++count;
      for (std::size_t i = 0; i < b.labels.size(); ++i) {
        EXPECT_EQ(b.labels[i], ds.labels[b.indices[i]]);
        EXPECT_EQ(b.images.at({i, 1, 2, 3}), ds.images.at({b.indices[i], 1, 2, 3}));
      }
      seen.insert(seen.end(), b.indices.begin(), b.indices.end());
    }
    EXPECT_EQ(count, (ds.size() + bs - 1) / bs);
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    EXPECT_EQ(seen, all);
  }
  auto plain = batches(ds, 8);
  Batch b;
  plain.next(b);
  EXPECT_EQ(b.indices, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_THROW(batches(ds, 0), std::invalid_argument);
}

TEST(Batches, ShuffleDependsOnSeedAndEpoch) {
  SyntheticOptions o;
  o.per_class = 5;
  o.size = 4;
  const auto ds = make_synthetic(o);
  auto order = [&](std::uint64_t seed, std::uint64_t epoch) {
    auto it = batches(ds, 100, seed, epoch);
    Batch b;
    it.next(b);
    return b.indices;
  };
  EXPECT_EQ(order(1, 0), order(1, 0));
  EXPECT_NE(order(1, 0), order(1, 1));
  EXPECT_NE(order(1, 0), order(2, 0));
}

TEST(Batches, FlipMirrorsRows) {
  SyntheticOptions o;
  o.per_class = 10;
  o.size = 6;
  o.seed = 3;
  const auto ds = make_synthetic(o);
  auto it = batches(ds, ds.size(), std::nullopt, 0, true);
  Batch b;
  it.next(b);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool same = b.images.at({i, 0, 1, 0}) == ds.images.at({i, 0, 1, 0});
    if (!same) {
      ++flipped;
      for (std::size_t x = 0; x < 6; ++x)
        EXPECT_EQ(b.images.at({i, 2, 3, x}), ds.images.at({i, 2, 3, 5 - x}));
    }
  }
  EXPECT_GT(flipped, 0u);
  EXPECT_LT(flipped, ds.size());
}

TEST(Dataset, SliceAndBalancedPrefix) {
  SyntheticOptions o;
  o.classes = 3;
  o.per_class = 4;
  o.size = 4;
  const auto ds = make_synthetic(o);
  const auto s = ds.slice(2, 5);
  EXPECT_EQ(s.size(), 5u);
  EXPECT_EQ(s.labels[0], ds.labels[2]);
  EXPECT_EQ(s.images.at({0, 0, 0, 0}), ds.images.at({2, 0, 0, 0}));
  const auto p = ds.balanced_prefix(6);
  std::vector<int> hist(3, 0);
  for (auto l : p.labels) ++hist[static_cast<std::size_t>(l)];
  EXPECT_EQ(hist, (std::vector<int>{2, 2, 2}));
}
