#pragma once

#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "mgd/optim.hpp"
#include "mgd/random.hpp"
#include "mgd/tensor.hpp"

namespace mgd {

enum class MaskMode { spatial, channel };

struct MaskConfig {
  MaskMode mode = MaskMode::spatial;
  /// Probability that a position (spatial) or channel (channel mode) is zeroed.
  double ratio = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Binary mask. Spatial masks are (N, H, W) and shared across channels;
/// channel masks are (N, C) and shared across space.
struct Mask {
  MaskMode mode = MaskMode::spatial;
  std::size_t batch = 0, channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> bits;

  Shape shape() const;
  std::size_t masked_count() const;
  double masked_fraction() const;
  /// Mask broadcast to the full (N, C, H, W) feature layout.
  template <typename T>
  std::vector<T> expand() const;
};

/// One Uniform(0,1) draw per independent position, bit = 0 iff draw < ratio.
/// Positions are visited in row-major order of the mask shape.
Mask sample_mask(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                 const MaskConfig& cfg, Rng& rng);

/// Generator for stage `stage_index` at training step `iteration`.
Rng mask_stream(std::uint64_t run_seed, std::size_t stage_index, std::uint64_t iteration);

template <typename T>
BasicTensor<T> apply_mask(const BasicTensor<T>& feature, const Mask& mask);

struct GenerativeBlockOptions {
  int depth = 2;   // conv layers in the projector: 1, 2 or 3
  int kernel = 3;  // 3 or 5; padding keeps the spatial size

  void validate() const;
};

/// 1x1 adaptation conv mapping student channels onto teacher channels.
template <typename T>
class BasicAlignLayer {
 public:
  BasicAlignLayer(std::size_t student_channels, std::size_t teacher_channels,
                  std::uint64_t seed, const std::string& name = "align");

  BasicTensor<T> operator()(const BasicTensor<T>& student_feature) const;

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  std::vector<BasicParameter<T>*> parameters();
  /// Identity mapping (requires equal channel counts).
  void set_identity();

 private:
  std::size_t in_channels_, out_channels_;
  std::deque<BasicParameter<T>> params_;
};

/// Adaptation layer plus projector: conv(k) -> ReLU -> conv(k) in the
/// canonical configuration.
template <typename T>
class BasicGenerativeBlock {
 public:
  BasicGenerativeBlock(std::size_t student_channels, std::size_t teacher_channels,
                       const GenerativeBlockOptions& options, std::uint64_t seed,
                       const std::string& name = "generator");

  BasicTensor<T> align(const BasicTensor<T>& student_feature) const { return align_(student_feature); }
  /// Projector applied to an already aligned (and masked) feature.
  BasicTensor<T> generate(const BasicTensor<T>& masked_aligned) const;

  const GenerativeBlockOptions& options() const { return options_; }
  std::size_t teacher_channels() const { return align_.out_channels(); }
  BasicAlignLayer<T>& align_layer() { return align_; }
  std::vector<BasicParameter<T>*> parameters();
  /// Makes a depth-1 projector an exact identity (delta kernel, zero bias).
  void set_identity_projector();

 private:
  GenerativeBlockOptions options_;
  BasicAlignLayer<T> align_;
  std::deque<BasicParameter<T>> convs_;  // weight, bias pairs
};

using AlignLayer = BasicAlignLayer<float>;
using GenerativeBlock = BasicGenerativeBlock<float>;

/// Per image: raw sum over stages, channels and positions of
/// (teacher - G(align(student) * mask))^2; the batch value is the mean over
/// images. A fresh mask per stage is drawn from
/// mask_stream(cfg.rng_seed, stage, iteration). Teacher features never
/// receive gradients. `mean_normalize` further divides each stage term by
/// its per-image element count.
template <typename T>
BasicTensor<T> mgd_loss(std::span<const BasicTensor<T>> student_feats,
                        std::span<const BasicTensor<T>> teacher_feats,
                        std::span<BasicGenerativeBlock<T>* const> blocks, const MaskConfig& cfg,
                        std::uint64_t iteration, bool mean_normalize = false);

/// Same as above with explicitly supplied masks (one per stage).
template <typename T>
BasicTensor<T> mgd_loss_with_masks(std::span<const BasicTensor<T>> student_feats,
                                   std::span<const BasicTensor<T>> teacher_feats,
                                   std::span<BasicGenerativeBlock<T>* const> blocks,
                                   std::span<const Mask> masks, bool mean_normalize = false);

/// Direct feature mimicking: sq_l2_sum(teacher, align(student)), batch mean.
template <typename T>
BasicTensor<T> mimic_loss(const BasicTensor<T>& student_feat, const BasicTensor<T>& teacher_feat,
                          const BasicAlignLayer<T>& align);

/// l_original + alpha * l_dis.
template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& l_original, const BasicTensor<T>& l_dis,
                          double alpha);

/// temperature^2 * KL(softmax(teacher / t) || softmax(student / t)), batch mean.
template <typename T>
BasicTensor<T> kd_logit_loss(const BasicTensor<T>& student_logits,
                             const BasicTensor<T>& teacher_logits, double temperature);

}  // namespace mgd
