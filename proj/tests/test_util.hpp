#pragma once

#include <cmath>
#include <vector>

#include "hourglass/rng.hpp"
#include "hourglass/tensor.hpp"

namespace hgtest {

inline hourglass::Tensor random_tensor(hourglass::Shape shape, hourglass::RngStream& rng,
                                       double scale = 1.0, bool requires_grad = true) {
  return hourglass::Tensor::randn(std::move(shape), rng, scale, requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const hourglass::Tensor& a, const hourglass::Tensor& b) {
  return max_abs_diff(a.values(), b.values());
}

}  // namespace hgtest
