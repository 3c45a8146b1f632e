#include "mgd/optim.hpp"

namespace mgd {

template <typename T>
std::vector<std::string> sgd_step(std::span<BasicParameter<T>* const> params,
                                  const SgdOptions& options) {
  std::vector<std::string> skipped;
  const T lr = static_cast<T>(options.lr);
  const T momentum = static_cast<T>(options.momentum);
  const T decay = static_cast<T>(options.weight_decay);
  for (auto* param : params) {
    if (!param->tensor.has_grad()) {
      skipped.push_back(param->name);
      continue;
    }
    auto values = param->tensor.mutable_data();
    const auto grad = param->tensor.grad();
    auto& buf = param->momentum_buffer;
    for (std::size_t i = 0; i < values.size(); ++i) {
      buf[i] = momentum * buf[i] + (grad[i] + decay * values[i]);
      values[i] -= lr * buf[i];
    }
    param->tensor.zero_grad();
  }
  return skipped;
}

template std::vector<std::string> sgd_step(std::span<BasicParameter<float>* const>,
                                           const SgdOptions&);
template std::vector<std::string> sgd_step(std::span<BasicParameter<double>* const>,
                                           const SgdOptions&);

}  // namespace mgd
