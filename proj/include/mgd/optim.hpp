#pragma once

#include <span>
#include <string>
#include <vector>

#include "mgd/tensor.hpp"

namespace mgd {

/// A trainable tensor with its SGD momentum state.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> tensor;
  std::vector<T> momentum_buffer;

  BasicParameter(std::string name_, BasicTensor<T> tensor_)
      : name(std::move(name_)), tensor(std::move(tensor_)), momentum_buffer(tensor.size(), T(0)) {
    tensor.set_requires_grad(true);
  }
};

using Parameter = BasicParameter<float>;

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// buf <- momentum * buf + (grad + weight_decay * param); param <- param - lr * buf.
/// Grads are zeroed afterwards. Returns the names of parameters that had no
/// gradient and were skipped.
template <typename T>
std::vector<std::string> sgd_step(std::span<BasicParameter<T>* const> params,
                                  const SgdOptions& options);

}  // namespace mgd
