#include "mgd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mgd {
namespace {

template <typename T>
BasicTensor<T> uniform_weight(Shape shape, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void set_delta_kernel(BasicTensor<T>& weight) {
  auto w = weight.mutable_data();
  std::fill(w.begin(), w.end(), T(0));
  const auto c = weight.dim(0);
  const auto k = weight.dim(2);
  for (std::size_t o = 0; o < c; ++o) w[((o * c + o) * k + k / 2) * k + k / 2] = T(1);
}

template <typename T>
void check_feature_pair(const BasicTensor<T>& student, const BasicTensor<T>& teacher,
                        const char* op) {
  if (student.rank() != 4 || teacher.rank() != 4 || student.dim(0) != teacher.dim(0) ||
      student.dim(2) != teacher.dim(2) || student.dim(3) != teacher.dim(3)) {
    throw ShapeError(std::string(op) + ": student feature " + shape_str(student.shape()) +
                     " and teacher feature " + shape_str(teacher.shape()) +
                     " must agree in batch and spatial size");
  }
}

}  // namespace

void MaskConfig::validate() const {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
}

Shape Mask::shape() const {
  return mode == MaskMode::spatial ? Shape{batch, height, width} : Shape{batch, channels};
}

std::size_t Mask::masked_count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
}

double Mask::masked_fraction() const {
  return bits.empty() ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(bits.size());
}

template <typename T>
std::vector<T> Mask::expand() const {
  const auto plane = height * width;
  std::vector<T> out(batch * channels * plane);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      T* dst = out.data() + (n * channels + c) * plane;
      if (mode == MaskMode::spatial) {
        const auto* src = bits.data() + n * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<T>(src[p]);
      } else {
        std::fill(dst, dst + plane, static_cast<T>(bits[n * channels + c]));
      }
    }
  return out;
}

template std::vector<float> Mask::expand<float>() const;
template std::vector<double> Mask::expand<double>() const;

Mask sample_mask(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                 const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  if (n == 0 || c == 0 || h == 0 || w == 0) {
    throw std::invalid_argument("sample_mask: all dimensions must be >= 1");
  }
  Mask mask{cfg.mode, n, c, h, w, {}};
  const auto count = cfg.mode == MaskMode::spatial ? n * h * w : n * c;
  mask.bits.resize(count);
  for (auto& bit : mask.bits) bit = rng.uniform() < cfg.ratio ? 0 : 1;
  return mask;
}

Rng mask_stream(std::uint64_t run_seed, std::size_t stage_index, std::uint64_t iteration) {
  return Rng(derive_seed({run_seed, 0x6d61736bULL, stage_index, iteration}));
}

template <typename T>
BasicTensor<T> apply_mask(const BasicTensor<T>& feature, const Mask& mask) {
  if (feature.rank() != 4 || feature.dim(0) != mask.batch || feature.dim(1) != mask.channels ||
      feature.dim(2) != mask.height || feature.dim(3) != mask.width) {
    throw ShapeError("apply_mask: mask for " +
                     shape_str({mask.batch, mask.channels, mask.height, mask.width}) +
                     " cannot cover feature " + shape_str(feature.shape()));
  }
  const auto factor = mask.expand<T>();
  return mul_const(feature, std::span<const T>(factor));
}

void GenerativeBlockOptions::validate() const {
  if (depth < 1 || depth > 3) {
    throw std::invalid_argument("generative block depth must be 1, 2 or 3, got " +
                                std::to_string(depth));
  }
  if (kernel != 3 && kernel != 5) {
    throw std::invalid_argument("generative block kernel must be 3 or 5, got " +
                                std::to_string(kernel));
  }
}

// ---------------------------------------------------------------------------

template <typename T>
BasicAlignLayer<T>::BasicAlignLayer(std::size_t student_channels, std::size_t teacher_channels,
                                    std::uint64_t seed, const std::string& name)
    : in_channels_(student_channels), out_channels_(teacher_channels) {
  if (student_channels == 0 || teacher_channels == 0) {
    throw std::invalid_argument("align layer channel counts must be >= 1");
  }
  params_.emplace_back(name + ".weight",
                       uniform_weight<T>({teacher_channels, student_channels, 1, 1},
                                         student_channels, derive_seed({seed, 1})));
  params_.emplace_back(name + ".bias", BasicTensor<T>::zeros({teacher_channels}));
}

template <typename T>
BasicTensor<T> BasicAlignLayer<T>::operator()(const BasicTensor<T>& student_feature) const {
  return conv2d<T>(student_feature, params_[0].tensor, params_[1].tensor, 1, 0);
}

template <typename T>
std::vector<BasicParameter<T>*> BasicAlignLayer<T>::parameters() {
  return {&params_[0], &params_[1]};
}

template <typename T>
void BasicAlignLayer<T>::set_identity() {
  if (in_channels_ != out_channels_) {
    throw std::logic_error("identity alignment needs equal student and teacher channels");
  }
  set_delta_kernel(params_[0].tensor);
  auto b = params_[1].tensor.mutable_data();
  std::fill(b.begin(), b.end(), T(0));
}

template <typename T>
BasicGenerativeBlock<T>::BasicGenerativeBlock(std::size_t student_channels,
                                              std::size_t teacher_channels,
                                              const GenerativeBlockOptions& options,
                                              std::uint64_t seed, const std::string& name)
    : options_((options.validate(), options)),
      align_(student_channels, teacher_channels, derive_seed({seed, 0}), name + ".align") {
  const auto k = static_cast<std::size_t>(options.kernel);
  for (int layer = 0; layer < options.depth; ++layer) {
    const auto prefix = name + ".conv" + std::to_string(layer + 1);
    convs_.emplace_back(prefix + ".weight",
                        uniform_weight<T>({teacher_channels, teacher_channels, k, k},
                                          teacher_channels * k * k,
                                          derive_seed({seed, static_cast<std::uint64_t>(layer) + 1})));
    convs_.emplace_back(prefix + ".bias", BasicTensor<T>::zeros({teacher_channels}));
  }
}

template <typename T>
BasicTensor<T> BasicGenerativeBlock<T>::generate(const BasicTensor<T>& masked_aligned) const {
  if (masked_aligned.rank() != 4 || masked_aligned.dim(1) != teacher_channels()) {
    throw ShapeError("generate: expected an aligned feature with " +
                     std::to_string(teacher_channels()) + " channels, got " +
                     shape_str(masked_aligned.shape()));
  }
  const auto padding = static_cast<std::size_t>(options_.kernel / 2);
  BasicTensor<T> x = masked_aligned;
  for (int layer = 0; layer < options_.depth; ++layer) {
    if (layer > 0) x = relu(x);
    const auto i = static_cast<std::size_t>(layer) * 2;
    x = conv2d<T>(x, convs_[i].tensor, convs_[i + 1].tensor, 1, padding);
  }
  return x;
}

template <typename T>
std::vector<BasicParameter<T>*> BasicGenerativeBlock<T>::parameters() {
  auto out = align_.parameters();
  for (auto& p : convs_) out.push_back(&p);
  return out;
}

template <typename T>
void BasicGenerativeBlock<T>::set_identity_projector() {
  if (options_.depth != 1) throw std::logic_error("only a depth-1 projector can be an identity");
  set_delta_kernel(convs_[0].tensor);
  auto b = convs_[1].tensor.mutable_data();
  std::fill(b.begin(), b.end(), T(0));
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> mgd_loss_with_masks(std::span<const BasicTensor<T>> student_feats,
                                   std::span<const BasicTensor<T>> teacher_feats,
                                   std::span<BasicGenerativeBlock<T>* const> blocks,
                                   std::span<const Mask> masks, bool mean_normalize) {
  if (student_feats.empty() || student_feats.size() != teacher_feats.size() ||
      blocks.size() != student_feats.size() || masks.size() != student_feats.size()) {
    throw ShapeError("mgd_loss: need equally many (>= 1) student features, teacher features, "
                     "blocks and masks; got " + std::to_string(student_feats.size()) + ", " +
                     std::to_string(teacher_feats.size()) + ", " + std::to_string(blocks.size()) +
                     ", " + std::to_string(masks.size()));
  }
  BasicTensor<T> total;
  for (std::size_t l = 0; l < student_feats.size(); ++l) {
    check_feature_pair(student_feats[l], teacher_feats[l], "mgd_loss");
    const auto aligned = blocks[l]->align(student_feats[l]);
    const auto generated = blocks[l]->generate(apply_mask(aligned, masks[l]));
    const auto per_sample = generated.size() / generated.dim(0);
    const auto divisor = generated.dim(0) * (mean_normalize ? per_sample : 1);
    auto term = scale(sq_l2_sum(teacher_feats[l].detach(), generated),
                      T(1) / static_cast<T>(divisor));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
BasicTensor<T> mgd_loss(std::span<const BasicTensor<T>> student_feats,
                        std::span<const BasicTensor<T>> teacher_feats,
                        std::span<BasicGenerativeBlock<T>* const> blocks, const MaskConfig& cfg,
                        std::uint64_t iteration, bool mean_normalize) {
  cfg.validate();
  if (student_feats.size() != teacher_feats.size() || blocks.size() != teacher_feats.size()) {
    throw ShapeError("mgd_loss: feature and block lists differ in length");
  }
  std::vector<Mask> masks;
  for (std::size_t l = 0; l < teacher_feats.size(); ++l) {
    const auto& t = teacher_feats[l];
    if (t.rank() != 4) throw ShapeError("mgd_loss: teacher feature must be NCHW");
    auto rng = mask_stream(cfg.rng_seed, l, iteration);
    masks.push_back(sample_mask(t.dim(0), t.dim(1), t.dim(2), t.dim(3), cfg, rng));
  }
  return mgd_loss_with_masks<T>(student_feats, teacher_feats, blocks, masks, mean_normalize);
}

template <typename T>
BasicTensor<T> mimic_loss(const BasicTensor<T>& student_feat, const BasicTensor<T>& teacher_feat,
                          const BasicAlignLayer<T>& align) {
  check_feature_pair(student_feat, teacher_feat, "mimic_loss");
  return scale(sq_l2_sum(teacher_feat.detach(), align(student_feat)),
               T(1) / static_cast<T>(student_feat.dim(0)));
}

template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& l_original, const BasicTensor<T>& l_dis,
                          double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("total_loss: alpha must be >= 0");
  return add(l_original, scale(l_dis, static_cast<T>(alpha)));
}

template <typename T>
BasicTensor<T> kd_logit_loss(const BasicTensor<T>& student_logits,
                             const BasicTensor<T>& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("kd_logit_loss: temperature must be > 0");
  if (student_logits.rank() != 2 || student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("kd_logit_loss: logits shapes " + shape_str(student_logits.shape()) +
                     " and " + shape_str(teacher_logits.shape()) + " must match (N x K)");
  }
  const auto n = student_logits.dim(0);
  const auto k = student_logits.dim(1);
  const T temp = static_cast<T>(temperature);
  auto softened = [&](std::span<const T> z, std::vector<T>& probs, std::vector<T>& log_probs) {
    probs.resize(n * k);
    log_probs.resize(n * k);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = z.data() + i * k;
      T peak = row[0] / temp;
      for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, row[j] / temp);
      T denom = 0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] / temp - peak);
      const T log_denom = std::log(denom);
      for (std::size_t j = 0; j < k; ++j) {
        log_probs[i * k + j] = row[j] / temp - peak - log_denom;
        probs[i * k + j] = std::exp(log_probs[i * k + j]);
      }
    }
  };
  std::vector<T> ps, log_ps, pt, log_pt;
  softened(student_logits.data(), ps, log_ps);
  softened(teacher_logits.data(), pt, log_pt);
  T kl = 0;
  for (std::size_t i = 0; i < n * k; ++i)
    if (pt[i] > T(0)) kl += pt[i] * (log_pt[i] - log_ps[i]);
  const T value = temp * temp * kl / static_cast<T>(n);
  return BasicTensor<T>::from_op(
      Shape{}, std::vector<T>{value}, {student_logits},
      [n, temp, ps = std::move(ps), pt = std::move(pt)](
          std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto dz = in[0]->pending_grad();
        const T g = dout[0] * temp / static_cast<T>(n);
        for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += g * (ps[i] - pt[i]);
      });
}

#define MGD_INSTANTIATE(T)                                                                     \
  template class BasicAlignLayer<T>;                                                           \
  template class BasicGenerativeBlock<T>;                                                      \
  template BasicTensor<T> apply_mask(const BasicTensor<T>&, const Mask&);                      \
  template BasicTensor<T> mgd_loss(std::span<const BasicTensor<T>>,                            \
                                   std::span<const BasicTensor<T>>,                            \
                                   std::span<BasicGenerativeBlock<T>* const>, const MaskConfig&, \
                                   std::uint64_t, bool);                                       \
  template BasicTensor<T> mgd_loss_with_masks(std::span<const BasicTensor<T>>,                 \
                                              std::span<const BasicTensor<T>>,                 \
                                              std::span<BasicGenerativeBlock<T>* const>,       \
                                              std::span<const Mask>, bool);                    \
  template BasicTensor<T> mimic_loss(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicAlignLayer<T>&);                               \
  template BasicTensor<T> total_loss(const BasicTensor<T>&, const BasicTensor<T>&, double);    \
  template BasicTensor<T> kd_logit_loss(const BasicTensor<T>&, const BasicTensor<T>&, double);

MGD_INSTANTIATE(float)
MGD_INSTANTIATE(double)

#undef MGD_INSTANTIATE

}  // namespace mgd
