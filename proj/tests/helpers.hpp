#pragma once

#include <cmath>
#include <vector>

#include "gendf/rng.hpp"
#include "gendf/tensor.hpp"

namespace gendf::test {

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                            double stddev = 1.0) {
  return Tensor::randn(std::move(shape), rng, 0.0, stddev, requires_grad);
}

inline bool approx_equal(std::span<const double> a, std::span<const double> b,
                         double tol = 1e-12) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a[i] - b[i]) > tol) return false;
  }
  return true;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<double> snapshot(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace gendf::test
