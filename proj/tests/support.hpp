// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the test binaries.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "kdforge/rng.hpp"
#include "kdforge/tensor.hpp"

namespace kdforge::testing {

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

/// ||a - b|| / max(||a|| + ||b||, floor). The floor keeps gradients that are
/// identically zero (attention key bias) from comparing rounding noise.
inline double rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-7) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::max(std::sqrt(na) + std::sqrt(nb), floor);
  return std::sqrt(diff) / den;
}

/// Central differences of f with respect to every element of x, step
/// 1e-5 * max(1, |x_i|).
inline Tensor64 numeric_grad(const std::function<double()>& f, Tensor64& x) {
  Tensor64 g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    const double h = 1e-5 * std::max(1.0, std::abs(keep));
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// sum(w * y): a scalar probe whose gradient with respect to y is w.
inline double probe(const Tensor64& y, const Tensor64& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("kdforge_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kdforge::testing
