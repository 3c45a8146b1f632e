#include "mgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "mgd/random.hpp"

namespace mgd {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

LabeledDataset assemble(std::vector<float> raw, std::vector<std::int32_t> labels,
                        std::size_t channels, std::size_t height, std::size_t width,
                        std::size_t class_count, const std::optional<Normalization>& stats,
                        Split split) {
  const auto plane = height * width;
  LabeledDataset ds;
  ds.normalization = stats ? *stats : compute_normalization(raw, channels, plane);
  normalize_in_place(raw, ds.normalization, plane);
  const auto n = labels.size();
  ds.images = Tensor({n, channels, height, width}, std::move(raw));
  ds.labels = std::move(labels);
  ds.class_count = class_count;
  ds.split = split;
  return ds;
}

}  // namespace

Normalization compute_normalization(std::span<const float> raw, std::size_t channels,
                                    std::size_t plane) {
  Normalization stats{std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
  const auto n = raw.size() / (channels * plane);
  if (n == 0) return stats;
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const float* p = raw.data() + (s * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        acc += p[i];
        acc2 += static_cast<double>(p[i]) * p[i];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double mean = acc / count;
    const double var = std::max(0.0, acc2 / count - mean * mean);
    stats.mean[c] = static_cast<float>(mean);
    stats.std[c] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
  return stats;
}

void normalize_in_place(std::span<float> raw, const Normalization& stats, std::size_t plane) {
  const auto channels = stats.mean.size();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto c = (i / plane) % channels;
    raw[i] = (raw[i] - stats.mean[c]) / stats.std[c];
  }
}

LabeledDataset LabeledDataset::slice(std::size_t first, std::size_t count) const {
  if (first + count > size()) throw std::out_of_range("dataset slice out of range");
  const auto per = images.size() / std::max<std::size_t>(size(), 1);
  LabeledDataset out;
  Shape shape = images.shape();
  shape[0] = count;
  const auto data = images.data();
  out.images = Tensor(shape, std::vector<float>(data.begin() + static_cast<std::ptrdiff_t>(first * per),
                                                data.begin() + static_cast<std::ptrdiff_t>((first + count) * per)));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(first),
                    labels.begin() + static_cast<std::ptrdiff_t>(first + count));
  out.class_count = class_count;
  out.split = split;
  out.normalization = normalization;
  return out;
}

LabeledDataset LabeledDataset::balanced_prefix(std::size_t count) const {
  count = std::min(count, size());
  std::vector<std::vector<std::size_t>> by_class(class_count);
  for (std::size_t i = 0; i < size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> picked;
  for (std::size_t round = 0; picked.size() < count; ++round) {
    bool any = false;
    for (const auto& members : by_class) {
      if (round < members.size() && picked.size() < count) {
        picked.push_back(members[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  std::sort(picked.begin(), picked.end());
  const auto per = images.size() / std::max<std::size_t>(size(), 1);
  std::vector<float> values;
  values.reserve(picked.size() * per);
  LabeledDataset out;
  for (auto i : picked) {
    const auto src = images.data().subspan(i * per, per);
    values.insert(values.end(), src.begin(), src.end());
    out.labels.push_back(labels[i]);
  }
  Shape shape = images.shape();
  shape[0] = picked.size();
  out.images = Tensor(shape, std::move(values));
  out.class_count = class_count;
  out.split = split;
  out.normalization = normalization;
  return out;
}

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        const std::optional<Normalization>& stats, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw DataError(DataErrorKind::truncated, "IDX image header truncated");
  if (lab.size() < 8) throw DataError(DataErrorKind::truncated, "IDX label header truncated");
  if (be32(img, 0) != 0x00000803u) {
    throw DataError(DataErrorKind::bad_magic, "IDX images: bad magic in " + images_path.string());
  }
  if (be32(lab, 0) != 0x00000801u) {
    throw DataError(DataErrorKind::bad_magic, "IDX labels: bad magic in " + labels_path.string());
  }
  const std::size_t n = be32(img, 4);
  const std::size_t rows = be32(img, 8);
  const std::size_t cols = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) {
    throw DataError(DataErrorKind::truncated, "IDX images: expected " +
                                                  std::to_string(n * rows * cols) +
                                                  " pixel bytes, file is shorter");
  }
  if (lab.size() < 8 + n_labels) {
    throw DataError(DataErrorKind::truncated, "IDX labels: file shorter than its header count");
  }
  if (n != n_labels) {
    throw DataError(DataErrorKind::count_mismatch,
                    "IDX: " + std::to_string(n) + " images but " + std::to_string(n_labels) +
                        " labels");
  }
  std::vector<float> raw(n * rows * cols);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<std::int32_t> labels(n);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab[8 + i];
    max_label = std::max(max_label, labels[i]);
  }
  return assemble(std::move(raw), std::move(labels), 1, rows, cols,
                  n ? static_cast<std::size_t>(max_label) + 1 : 0, stats, split);
}

LabeledDataset load_cifar_binary(std::span<const std::filesystem::path> paths,
                                 const std::optional<Normalization>& stats, Split split) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  std::vector<float> raw;
  std::vector<std::int32_t> labels;
  for (const auto& path : paths) {
    const auto bytes = read_file(path);
    if (bytes.size() % kRecord != 0) {
      throw DataError(DataErrorKind::bad_length,
                      "CIFAR file " + path.string() + " has " + std::to_string(bytes.size()) +
                          " bytes, not a multiple of 3073");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      if (bytes[off] > 9) {
        throw DataError(DataErrorKind::bad_label, "CIFAR label " + std::to_string(bytes[off]) +
                                                      " out of range in " + path.string());
      }
      labels.push_back(bytes[off]);
      for (std::size_t i = 0; i < kPixels; ++i)
        raw.push_back(static_cast<float>(bytes[off + 1 + i]) / 255.0f);
    }
  }
  return assemble(std::move(raw), std::move(labels), 3, 32, 32, 10, stats, split);
}

LabeledDataset make_synthetic(const SyntheticOptions& o, const std::optional<Normalization>& stats,
                              Split split) {
  if (o.classes < 2) throw std::invalid_argument("make_synthetic: classes must be >= 2");
  if (o.size < 4 || o.channels == 0) {
    throw std::invalid_argument("make_synthetic: size must be >= 4 and channels >= 1");
  }
  struct Blob {
    double cx, cy, sigma;
    std::vector<double> color;
  };
  const double size = static_cast<double>(o.size);
  auto random_blob = [&](Rng& rng, double lo, double hi) {
    Blob b{rng.uniform(lo, hi) * size, rng.uniform(lo, hi) * size, rng.uniform(0.07, 0.15) * size,
           {}};
    for (std::size_t c = 0; c < o.channels; ++c) b.color.push_back(rng.uniform(-1.0, 1.0));
    return b;
  };
  std::vector<std::vector<Blob>> prototypes(o.classes);
  for (std::size_t k = 0; k < o.classes; ++k) {
    Rng rng(derive_seed({o.prototype_seed, 0x70726f74ULL, k}));
    for (int b = 0; b < 3; ++b) prototypes[k].push_back(random_blob(rng, 0.2, 0.8));
  }

  const auto plane = o.size * o.size;
  const auto n = o.classes * o.per_class;
  std::vector<float> raw(n * o.channels * plane, 0.0f);
  std::vector<std::int32_t> labels(n);
  const double amp_spread = std::min(0.5, o.noise);
  Rng rng(derive_seed({o.seed, 0x73616d70ULL}));
  auto paint = [&](float* img, const Blob& b, double amplitude, double dx, double dy) {
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (std::size_t y = 0; y < o.size; ++y)
      for (std::size_t x = 0; x < o.size; ++x) {
        const double ddx = static_cast<double>(x) - (b.cx + dx);
        const double ddy = static_cast<double>(y) - (b.cy + dy);
        const double g = amplitude * std::exp(-(ddx * ddx + ddy * ddy) * inv);
        for (std::size_t c = 0; c < o.channels; ++c)
          img[c * plane + y * o.size + x] += static_cast<float>(g * b.color[c]);
      }
  };
  // Samples interleave classes so that any prefix is balanced.
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = i % o.classes;
    labels[i] = static_cast<std::int32_t>(k);
    float* img = raw.data() + i * o.channels * plane;
    const auto span = static_cast<std::uint64_t>(2 * o.jitter + 1);
    const double dx = static_cast<double>(rng.below(span)) - static_cast<double>(o.jitter);
    const double dy = static_cast<double>(rng.below(span)) - static_cast<double>(o.jitter);
    for (const auto& blob : prototypes[k]) {
      const double amplitude = 1.0 + amp_spread * rng.uniform(-1.0, 1.0);
      paint(img, blob, amplitude, dx, dy);
    }
    for (std::size_t d = 0; d < o.distractors; ++d) {
      paint(img, random_blob(rng, 0.0, 1.0), rng.uniform(0.5, 1.0), 0.0, 0.0);
    }
    if (o.noise > 0.0) {
      for (std::size_t p = 0; p < o.channels * plane; ++p)
        img[p] += static_cast<float>(o.noise * rng.normal());
    }
  }
  return assemble(std::move(raw), std::move(labels), o.channels, o.size, o.size, o.classes, stats,
                  split);
}

void write_idx_images(const std::filesystem::path& path, std::size_t count, std::size_t rows,
                      std::size_t cols, std::span<const std::uint8_t> pixels) {
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000803u);
  put_be32(out, static_cast<std::uint32_t>(count));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  write_file(path, out);
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, 0x00000801u);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  write_file(path, out);
}

void write_cifar_binary(const std::filesystem::path& path, std::span<const std::uint8_t> labels,
                        std::span<const std::uint8_t> pixels) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  if (pixels.size() != labels.size() * kPixels) {
    throw std::invalid_argument("write_cifar_binary: pixel count does not match labels");
  }
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out.push_back(labels[i]);
    out.insert(out.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * kPixels),
               pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * kPixels));
  }
  write_file(path, out);
}

// ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const LabeledDataset& dataset, std::size_t batch_size,
                             std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch,
                             bool flip)
    : dataset_(&dataset), batch_size_(batch_size), order_(dataset.size()) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(derive_seed({*shuffle_seed, 0x73687566ULL, epoch}));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  }
  if (flip) {
    Rng rng(derive_seed({shuffle_seed.value_or(0), 0x666c6970ULL, epoch}));
    flips_.resize(order_.size());
    for (auto& f : flips_) f = static_cast<std::uint8_t>(rng.next() >> 63);
  }
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const auto count = std::min(batch_size_, order_.size() - cursor_);
  const auto& images = dataset_->images;
  const auto c = images.dim(1);
  const auto h = images.dim(2);
  const auto w = images.dim(3);
  const auto per = c * h * w;
  std::vector<float> values(count * per);
  out.labels.resize(count);
  out.indices.resize(count);
  const auto src = images.data();
  for (std::size_t b = 0; b < count; ++b) {
    const auto idx = order_[cursor_ + b];
    out.indices[b] = idx;
    out.labels[b] = dataset_->labels[idx];
    const float* from = src.data() + idx * per;
    float* to = values.data() + b * per;
    if (!flips_.empty() && flips_[cursor_ + b]) {
      for (std::size_t row = 0; row < c * h; ++row)
        for (std::size_t x = 0; x < w; ++x) to[row * w + x] = from[row * w + (w - 1 - x)];
    } else {
      std::copy_n(from, per, to);
    }
  }
  out.images = Tensor({count, c, h, w}, std::move(values));
  cursor_ += count;
  return true;
}

BatchIterator batches(const LabeledDataset& dataset, std::size_t batch_size,
                      std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch, bool flip) {
  return BatchIterator(dataset, batch_size, shuffle_seed, epoch, flip);
}

}  // namespace mgd
