#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mgd/tensor.hpp"

namespace mgd {

enum class Split { train, val };

enum class DataErrorKind { io, bad_magic, truncated, count_mismatch, bad_length, bad_label };

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

/// Per-channel statistics applied as (x - mean) / std.
struct Normalization {
  std::vector<float> mean;
  std::vector<float> std;
};

struct LabeledDataset {
  Tensor images;  // N x C x H x W, normalized
  std::vector<std::int32_t> labels;
  std::size_t class_count = 0;
  Split split = Split::train;
  Normalization normalization;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }

  /// Copies of `count` consecutive samples starting at `first`.
  LabeledDataset slice(std::size_t first, std::size_t count) const;
  /// Samples grouped round-robin by class so any prefix stays balanced.
  LabeledDataset balanced_prefix(std::size_t count) const;
};

/// Per-channel mean and (population) standard deviation of raw NCHW data.
Normalization compute_normalization(std::span<const float> raw, std::size_t channels,
                                    std::size_t plane);
void normalize_in_place(std::span<float> raw, const Normalization& stats, std::size_t plane);

/// IDX pair (MNIST layout). Pixels are scaled to [0, 1] and normalized with
/// `stats`, or with statistics of the file itself when absent.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        const std::optional<Normalization>& stats = std::nullopt,
                        Split split = Split::train);

/// CIFAR-10 binary batches: rows of 1 label byte + 3072 bytes (R, G, B planes).
LabeledDataset load_cifar_binary(std::span<const std::filesystem::path> paths,
                                 const std::optional<Normalization>& stats = std::nullopt,
                                 Split split = Split::train);

struct SyntheticOptions {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  std::size_t size = 32;
  std::size_t channels = 3;
  /// Pixel noise standard deviation (in units of blob amplitude).
  double noise = 0.0;
  /// Maximum translation of the class pattern in pixels.
  std::size_t jitter = 0;
  /// Random distractor blobs added to each image.
  std::size_t distractors = 0;
  std::uint64_t seed = 0;
  /// Seed of the class prototypes; separate splits share it so that they
  /// describe the same classes.
  std::uint64_t prototype_seed = 0;
};

/// Seeded procedural images: each class is a fixed arrangement of coloured
/// Gaussian blobs; samples add translation, distractors and pixel noise.
LabeledDataset make_synthetic(const SyntheticOptions& options,
                              const std::optional<Normalization>& stats = std::nullopt,
                              Split split = Split::train);

/// Writers for the binary formats (used to build fixtures).
void write_idx_images(const std::filesystem::path& path, std::size_t count, std::size_t rows,
                      std::size_t cols, std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);
void write_cifar_binary(const std::filesystem::path& path, std::span<const std::uint8_t> labels,
                        std::span<const std::uint8_t> pixels);

struct Batch {
  Tensor images;
  std::vector<std::int32_t> labels;
  std::vector<std::size_t> indices;
};

/// Deterministic mini-batches. With a shuffle seed the order is a
/// permutation drawn from (seed, epoch); the final short batch is kept.
/// `flip` mirrors each image horizontally with probability 1/2.
class BatchIterator {
 public:
  BatchIterator(const LabeledDataset& dataset, std::size_t batch_size,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt, std::uint64_t epoch = 0,
                bool flip = false);

  bool next(Batch& out);
  std::size_t batch_count() const;

 private:
  const LabeledDataset* dataset_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::vector<std::uint8_t> flips_;
  std::size_t cursor_ = 0;
};

BatchIterator batches(const LabeledDataset& dataset, std::size_t batch_size,
                      std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                      std::uint64_t epoch = 0, bool flip = false);

}  // namespace mgd
