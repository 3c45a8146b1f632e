#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for any operand whose shape does not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thread-local switch: while disabled, op results never record lineage.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct TensorNode {
  using BackwardFn = std::function<void(std::span<const T> grad_out,
                                        std::span<const std::shared_ptr<TensorNode>> inputs)>;

  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;     // accumulated across backward calls
  std::vector<T> pending;  // scratch for a single backward sweep
  std::vector<std::shared_ptr<TensorNode>> inputs;
  BackwardFn backward_fn;

  /// Zero-initialized pending buffer, or an empty span when this node
  /// takes no gradient.
  std::span<T> pending_grad() {
    if (!requires_grad) return {};
    if (pending.empty()) pending.assign(data.size(), T(0));
    return pending;
  }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode autodiff lineage. Copies share
/// the underlying storage; use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using Node = detail::TensorNode<T>;
  using value_type = T;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  /// Result of an op: lineage is recorded only when grad mode is enabled
  /// and at least one input requires a gradient.
  static BasicTensor from_op(Shape shape, std::vector<T> data,
                             std::vector<BasicTensor> inputs,
                             typename Node::BackwardFn backward_fn);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access for initializers and optimizers only.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return !node_->backward_fn; }

  BasicTensor clone() const;
  /// Same values, no lineage, no gradient.
  BasicTensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// ---------------------------------------------------------------------------
// Differentiable operations. All accept f32 and f64 tensors.

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const std::optional<BasicTensor<T>>& bias, std::size_t stride,
                      std::size_t padding);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
BasicTensor<T> batch_norm2d(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                            const BasicTensor<T>& beta, BatchNormStats<T>& stats, bool training,
                            T eps = T(kBatchNormEps), T momentum = T(kBatchNormMomentum));

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> labels);

/// Sum of squared differences over every element (not a mean).
template <typename T>
BasicTensor<T> sq_l2_sum(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// Elementwise product with a constant (non-differentiable) factor of the
/// same shape.
template <typename T>
BasicTensor<T> mul_const(const BasicTensor<T>& x, std::span<const T> factor);

/// Accumulates d(loss)/d(t) into every reachable tensor that requires a
/// gradient. Calling twice without zeroing adds the gradients again.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---------------------------------------------------------------------------
// Kernel threading. MGD_THREADS=1 is the bitwise reproducible reference mode.

void set_num_threads(int threads);
int configure_threads_from_env();

}  // namespace mgd
