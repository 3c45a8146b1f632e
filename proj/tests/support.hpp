#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mgd/random.hpp"
#include "mgd/tensor.hpp"

namespace mgd::testing {

inline Tensor64 random64(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                         bool requires_grad = true) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64(std::move(shape), std::move(v), requires_grad);
}

inline Tensor random32(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences of the scalar `loss()` with respect to every
/// element of `inputs`, compared with the gradients from backward().
/// Elements with |analytic| + |numeric| < 1e-8 are exempt.
inline GradCheck check_gradients(const std::vector<Tensor64*>& inputs,
                                 const std::function<Tensor64()>& loss, double h = 1e-6) {
  for (auto* t : inputs) t->zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto* t : inputs) {
    if (t->has_grad()) analytic.emplace_back(t->grad().begin(), t->grad().end());
    else analytic.emplace_back(t->size(), 0.0);
    t->zero_grad();
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k]->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double scale = std::abs(a) + std::abs(numeric);
      if (scale < 1e-8) continue;
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / scale);
      ++out.checked;
    }
  }
  return out;
}

/// Direct convolution loop used as an oracle.
inline std::vector<double> conv_oracle(const Tensor64& x, const Tensor64& w, const double* bias,
                                       std::size_t stride, std::size_t pad) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto o = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias ? bias[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const auto y = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const auto xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(wd))
                  continue;
                acc += x.at({b, ic, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)}) *
                       w.at({oc, ic, ki, kj});
              }
          out[((b * o + oc) * oh + i) * ow + j] = acc;
        }
  return out;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mgd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mgd::testing
