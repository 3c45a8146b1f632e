#include "mgd/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mgd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ')';
  return out.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// Output columns [lo, hi) read input column ow * stride + offset inside [0, width).
struct ValidRange {
  std::size_t lo, hi;
};

inline ValidRange valid_range(std::size_t out_len, std::size_t in_len, std::size_t stride,
                              std::ptrdiff_t offset) {
  std::size_t lo = 0;
  if (offset < 0) lo = (static_cast<std::size_t>(-offset) + stride - 1) / stride;
  const auto limit = static_cast<std::ptrdiff_t>(in_len) - offset;  // need ow * stride < limit
  std::size_t hi = limit <= 0 ? 0 : (static_cast<std::size_t>(limit) + stride - 1) / stride;
  hi = std::min(hi, out_len);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// cols is (C*k*k) rows of OH*OW values, consecutive rows `ld` apart.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld) {
  const auto k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      const auto rows = valid_range(g.out_h, g.height, g.stride, static_cast<std::ptrdiff_t>(ki) - pad);
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto offset = static_cast<std::ptrdiff_t>(kj) - pad;
        const auto cols_ok = valid_range(g.out_w, g.width, g.stride, offset);
        T* row = cols + ((c * k + ki) * k + kj) * ld;
        std::fill(row, row + rows.lo * g.out_w, T(0));
        std::fill(row + rows.hi * g.out_w, row + g.positions(), T(0));
        for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
          const auto ih = oh * g.stride + ki - g.padding;
          T* dst = row + oh * g.out_w;
          const T* src = image + (c * g.height + ih) * g.width;
          std::fill(dst, dst + cols_ok.lo, T(0));
          std::fill(dst + cols_ok.hi, dst + g.out_w, T(0));
          if (g.stride == 1) {
            std::copy(src + (static_cast<std::ptrdiff_t>(cols_ok.lo) + offset),
                      src + (static_cast<std::ptrdiff_t>(cols_ok.hi) + offset), dst + cols_ok.lo);
          } else {
            for (std::size_t ow = cols_ok.lo; ow < cols_ok.hi; ++ow)
              dst[ow] = src[static_cast<std::ptrdiff_t>(ow * g.stride) + offset];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* image, std::size_t ld) {
  const auto k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      const auto rows = valid_range(g.out_h, g.height, g.stride, static_cast<std::ptrdiff_t>(ki) - pad);
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto offset = static_cast<std::ptrdiff_t>(kj) - pad;
        const auto cols_ok = valid_range(g.out_w, g.width, g.stride, offset);
        const T* row = cols + ((c * k + ki) * k + kj) * ld;
        for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
          const auto ih = oh * g.stride + ki - g.padding;
          T* dst = image + (c * g.height + ih) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = cols_ok.lo; ow < cols_ok.hi; ++ow)
            dst[static_cast<std::ptrdiff_t>(ow * g.stride) + offset] += src[ow];
        }
      }
    }
  }
}

// Samples per im2col chunk; bounds the column buffer to ~64K elements.
std::size_t conv_chunk(const ConvGeometry& g, std::size_t n) {
  constexpr std::size_t kBudget = std::size_t{1} << 16;  // elements
  const auto per_sample = std::max(g.patch(), std::size_t{1}) * g.positions();
  return std::clamp<std::size_t>(kBudget / std::max<std::size_t>(per_sample, 1), 1,
                                 std::max<std::size_t>(n, 1));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T>::BasicTensor() = default;

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(numel(shape)) + " elements but data has " +
                     std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto count = numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(count, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_op(Shape shape, std::vector<T> data,
                                       std::vector<BasicTensor> inputs,
                                       typename Node::BackwardFn backward_fn) {
  BasicTensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const BasicTensor& t) { return t.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  }
  return node_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: index rank does not match tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw std::out_of_range("at: index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) {
    node_->grad.clear();
    node_->pending.clear();
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor out(node_->shape, node_->data, node_->requires_grad);
  out.node_->grad = node_->grad;
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->shape, node_->data, false);
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const std::optional<BasicTensor<T>>& bias, std::size_t stride,
                      std::size_t padding) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected NCHW input and OCkk weight, got input " +
                     shape_str(input.shape()) + " and weight " + shape_str(weight.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const auto n = input.dim(0);
  const auto out_c = weight.dim(0);
  const auto k = weight.dim(2);
  if (weight.dim(3) != k) {
    throw ShapeError("conv2d: only square kernels are supported, weight " +
                     shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " has " +
                     std::to_string(input.dim(1)) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  const auto h = input.dim(2);
  const auto w = input.dim(3);
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " +
                     shape_str(input.shape()) + " with padding " + std::to_string(padding));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_c)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(out_c) + " output channels");
  }
  const ConvGeometry g{input.dim(1), h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                       (w + 2 * padding - k) / stride + 1};
  const auto positions = g.positions();
  const auto patch = g.patch();
  const auto in_stride = g.channels * h * w;
  const auto out_stride = out_c * positions;
  const auto chunk = conv_chunk(g, n);

  // Samples are processed in chunks: columns of all samples in a chunk sit
  // side by side so a single GEMM covers the chunk.
  std::vector<T> out(n * out_stride);
  std::vector<T> cols(patch * chunk * positions);
  std::vector<T> tmp(out_c * chunk * positions);
  const T* x = input.data().data();
  for (std::size_t first = 0; first < n; first += chunk) {
    const auto count = std::min(chunk, n - first);
    const auto ld = count * positions;
    for (std::size_t s = 0; s < count; ++s)
      im2col(x + (first + s) * in_stride, g, cols.data() + s * positions, ld);
    gemm(false, false, static_cast<int>(out_c), static_cast<int>(ld), static_cast<int>(patch),
         T(1), weight.data().data(), cols.data(), T(0), tmp.data());
    for (std::size_t s = 0; s < count; ++s)
      for (std::size_t o = 0; o < out_c; ++o) {
        const T* src = tmp.data() + o * ld + s * positions;
        T* dst = out.data() + (first + s) * out_stride + o * positions;
        const T b = bias ? bias->data()[o] : T(0);
        for (std::size_t p = 0; p < positions; ++p) dst[p] = src[p] + b;
      }
  }

  std::vector<BasicTensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return BasicTensor<T>::from_op(
      Shape{n, out_c, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, n, out_c, chunk, has_bias = bias.has_value()](
          std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto& xin = *in[0];
        auto& win = *in[1];
        const auto positions = g.positions();
        const auto patch = g.patch();
        const auto in_stride = g.channels * g.height * g.width;
        const auto out_stride = out_c * positions;
        auto dx = xin.pending_grad();
        auto dw = win.pending_grad();
        std::vector<T> cols(patch * chunk * positions);
        std::vector<T> grad_cols(out_c * chunk * positions);
        for (std::size_t first = 0; first < n; first += chunk) {
          const auto count = std::min(chunk, n - first);
          const auto ld = count * positions;
          for (std::size_t s = 0; s < count; ++s)
            for (std::size_t o = 0; o < out_c; ++o)
              std::copy_n(dout.data() + (first + s) * out_stride + o * positions, positions,
                          grad_cols.data() + o * ld + s * positions);
          if (!dw.empty()) {
            for (std::size_t s = 0; s < count; ++s)
              im2col(xin.data.data() + (first + s) * in_stride, g, cols.data() + s * positions, ld);
            gemm(false, true, static_cast<int>(out_c), static_cast<int>(patch),
                 static_cast<int>(ld), T(1), grad_cols.data(), cols.data(), T(1), dw.data());
          }
          if (!dx.empty()) {
            gemm(true, false, static_cast<int>(patch), static_cast<int>(ld),
                 static_cast<int>(out_c), T(1), win.data.data(), grad_cols.data(), T(0),
                 cols.data());
            for (std::size_t s = 0; s < count; ++s)
              col2im(cols.data() + s * positions, g, dx.data() + (first + s) * in_stride, ld);
          }
        }
        if (has_bias) {
          auto db = in[2]->pending_grad();
          if (!db.empty()) {
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t o = 0; o < out_c; ++o) {
                const T* go = dout.data() + s * out_stride + o * positions;
                T acc = 0;
                for (std::size_t p = 0; p < positions; ++p) acc += go[p];
                db[o] += acc;
              }
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = src[i] > T(0) ? src[i] : T(0);
  return BasicTensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [](std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto dx = in[0]->pending_grad();
        const auto& xs = in[0]->data;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xs[i] > T(0) ? dout[i] : T(0);
      });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
      bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear: incompatible shapes x " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const auto n = x.dim(0);
  const auto d = x.dim(1);
  const auto k = weight.dim(0);
  std::vector<T> out(n * k);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(bias.data().data(), k, out.data() + i * k);
  gemm(false, true, static_cast<int>(n), static_cast<int>(k), static_cast<int>(d), T(1),
       x.data().data(), weight.data().data(), T(1), out.data());
  return BasicTensor<T>::from_op(
      Shape{n, k}, std::move(out), {x, weight, bias},
      [n, d, k](std::span<const T> dout,
                std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        if (auto dx = in[0]->pending_grad(); !dx.empty()) {
          gemm(false, false, static_cast<int>(n), static_cast<int>(d), static_cast<int>(k), T(1),
               dout.data(), in[1]->data.data(), T(1), dx.data());
        }
        if (auto dw = in[1]->pending_grad(); !dw.empty()) {
          gemm(true, false, static_cast<int>(k), static_cast<int>(d), static_cast<int>(n), T(1),
               dout.data(), in[0]->data.data(), T(1), dw.data());
        }
        if (auto db = in[2]->pending_grad(); !db.empty()) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) db[j] += dout[i * k + j];
        }
      });
}

template <typename T>
BasicTensor<T> batch_norm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                            const BasicTensor<T>& beta, BatchNormStats<T>& stats, bool training,
                            T eps, T momentum) {
  if (!(eps > T(0))) throw std::invalid_argument("batch_norm2d: eps must be positive");
  if (x.rank() != 4) throw ShapeError("batch_norm2d: expected NCHW, got " + shape_str(x.shape()));
  const auto n = x.dim(0);
  const auto c = x.dim(1);
  const auto plane = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c || stats.running_mean.size() != c ||
      stats.running_var.size() != c) {
    throw ShapeError("batch_norm2d: per-channel parameters must have length " +
                     std::to_string(c));
  }
  const auto count = n * plane;
  if (training && count < 2) {
    throw ShapeError("batch_norm2d: training mode needs more than one value per channel");
  }
  const auto src = x.data();
  std::vector<T> mean(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      T acc = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = src.data() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(count);
      T var = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = src.data() + (s * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= static_cast<T>(count);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = var * static_cast<T>(count) / static_cast<T>(count - 1);
      stats.running_mean[ch] = (T(1) - momentum) * stats.running_mean[ch] + momentum * mu;
      stats.running_var[ch] = (T(1) - momentum) * stats.running_var[ch] + momentum * unbiased;
    } else {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  std::vector<T> xhat(src.size());
  std::vector<T> out(src.size());
  const auto g = gamma.data();
  const auto b = beta.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const auto base = (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = (src[base + i] - mean[ch]) * inv_std[ch];
        xhat[base + i] = v;
        out[base + i] = g[ch] * v + b[ch];
      }
    }
  return BasicTensor<T>::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, c, plane, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        const auto count = static_cast<T>(n * plane);
        std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const auto base = (s * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy[ch] += dout[base + i];
              sum_dy_xhat[ch] += dout[base + i] * xhat[base + i];
            }
          }
        if (auto dg = in[1]->pending_grad(); !dg.empty())
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_dy_xhat[ch];
        if (auto db = in[2]->pending_grad(); !db.empty())
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_dy[ch];
        auto dx = in[0]->pending_grad();
        if (dx.empty()) return;
        const auto& gamma = in[1]->data;
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const auto base = (s * c + ch) * plane;
            const T k = gamma[ch] * inv_std[ch];
            if (training) {
              const T mean_dy = sum_dy[ch] / count;
              const T mean_dy_xhat = sum_dy_xhat[ch] / count;
              for (std::size_t i = 0; i < plane; ++i)
                dx[base + i] += k * (dout[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
            } else {
              for (std::size_t i = 0; i < plane; ++i) dx[base + i] += k * dout[base + i];
            }
          }
      });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(2) == 0 || x.dim(3) == 0) {
    throw ShapeError("global_avg_pool: expected NCHW with H, W >= 1, got " +
                     shape_str(x.shape()));
  }
  const auto n = x.dim(0);
  const auto c = x.dim(1);
  const auto plane = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  const auto src = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += src[i * plane + p];
    out[i] = acc / static_cast<T>(plane);
  }
  return BasicTensor<T>::from_op(
      Shape{n, c}, std::move(out), {x},
      [plane](std::span<const T> dout,
              std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto dx = in[0]->pending_grad();
        const T inv = T(1) / static_cast<T>(plane);
        for (std::size_t i = 0; i < dout.size(); ++i)
          for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += dout[i] * inv;
      });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const auto n = logits.dim(0);
  const auto k = logits.dim(1);
  for (auto label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(k) + ")");
    }
  }
  const auto z = logits.data();
  std::vector<T> probs(n * k);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    const T peak = *std::max_element(row, row + k);
    T denom = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - peak);
      denom += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= denom;
    loss += std::log(denom) - (row[labels[i]] - peak);
  }
  loss /= static_cast<T>(n);
  std::vector<std::int32_t> kept(labels.begin(), labels.end());
  return BasicTensor<T>::from_op(
      Shape{}, std::vector<T>{loss}, {logits},
      [n, k, probs = std::move(probs), kept = std::move(kept)](
          std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto dz = in[0]->pending_grad();
        const T scale = dout[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const T target = static_cast<std::size_t>(kept[i]) == j ? T(1) : T(0);
            dz[i * k + j] += scale * (probs[i * k + j] - target);
          }
      });
}

template <typename T>
BasicTensor<T> sq_l2_sum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sq_l2_sum");
  const auto x = a.data();
  const auto y = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  return BasicTensor<T>::from_op(
      Shape{}, std::vector<T>{acc}, {a, b},
      [](std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        const auto& x = in[0]->data;
        const auto& y = in[1]->data;
        const T g = T(2) * dout[0];
        if (auto da = in[0]->pending_grad(); !da.empty())
          for (std::size_t i = 0; i < x.size(); ++i) da[i] += g * (x[i] - y[i]);
        if (auto db = in[1]->pending_grad(); !db.empty())
          for (std::size_t i = 0; i < x.size(); ++i) db[i] -= g * (x[i] - y[i]);
      });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return BasicTensor<T>::from_op(
      a.shape(), std::move(out), {a, b},
      [](std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        for (const auto& node : in) {
          auto d = node->pending_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += dout[i];
        }
      });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return BasicTensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [factor](std::span<const T> dout,
               std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto d = in[0]->pending_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * dout[i];
      });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  return BasicTensor<T>::from_op(
      Shape{}, std::vector<T>{acc}, {x},
      [](std::span<const T> dout, std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto d = in[0]->pending_grad();
        for (auto& v : d) v += dout[0];
      });
}

template <typename T>
BasicTensor<T> mul_const(const BasicTensor<T>& x, std::span<const T> factor) {
  if (factor.size() != x.size()) {
    throw ShapeError("mul_const: factor has " + std::to_string(factor.size()) +
                     " elements, tensor " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor[i];
  std::vector<T> kept(factor.begin(), factor.end());
  return BasicTensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [kept = std::move(kept)](std::span<const T> dout,
                               std::span<const std::shared_ptr<detail::TensorNode<T>>> in) {
        auto d = in[0]->pending_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += kept[i] * dout[i];
      });
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  using Node = detail::TensorNode<T>;
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->pending_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->pending.empty()) continue;
    if (node->backward_fn) node->backward_fn(node->pending, node->inputs);
    if (node->grad.empty()) {
      node->grad = std::move(node->pending);
    } else {
      for (std::size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += node->pending[i];
    }
    node->pending.clear();
    node->pending.shrink_to_fit();
  }
}

void set_num_threads(int threads) { openblas_set_num_threads(std::max(1, threads)); }

int configure_threads_from_env() {
  int threads = 1;
  if (const char* env = std::getenv("MGD_THREADS")) {
    threads = std::max(1, std::atoi(env));
  }
  set_num_threads(threads);
  return threads;
}

#define MGD_INSTANTIATE(T)                                                                    \
  template class BasicTensor<T>;                                                              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const std::optional<BasicTensor<T>>&, std::size_t,           \
                                 std::size_t);                                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                        \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const BasicTensor<T>&);                                      \
  template BasicTensor<T> batch_norm2d(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                       const BasicTensor<T>&, BatchNormStats<T>&, bool, T, T); \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                             \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&,                        \
                                                std::span<const std::int32_t>);               \
  template BasicTensor<T> sq_l2_sum(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                         \
  template BasicTensor<T> mul_const(const BasicTensor<T>&, std::span<const T>);               \
  template void backward(const BasicTensor<T>&);

MGD_INSTANTIATE(float)
MGD_INSTANTIATE(double)

#undef MGD_INSTANTIATE

}  // namespace mgd
