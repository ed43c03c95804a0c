#pragma once

// Test-only helpers: random tensors and a central finite-difference checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "abus/tensor.hpp"

namespace abus::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Relative error with a floor on the denominator: gradients below the floor
// are compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  int checked = 0;
};

// Perturbs `values` at `samples` random coordinates (all of them when there
// are fewer) and compares (loss(x+h) - loss(x-h)) / 2h with `analytic`.
// `accept` may reject coordinates, e.g. ones sitting on a ReLU kink.
inline GradCheckResult check_gradient(std::span<double> values, std::span<const double> analytic,
                                      const std::function<double()>& loss, int samples, std::mt19937_64& rng,
                                      double step = 1e-4,
                                      const std::function<bool(std::size_t)>& accept = nullptr) {
  GradCheckResult r;
  std::vector<std::size_t> coords;
  if (static_cast<int>(values.size()) <= samples) {
    for (std::size_t i = 0; i < values.size(); ++i) coords.push_back(i);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    for (int i = 0; i < samples; ++i) coords.push_back(pick(rng));
  }
  for (std::size_t c : coords) {
    if (accept && !accept(c)) continue;
    const double saved = values[c];
    values[c] = saved + step;
    const double up = loss();
    values[c] = saved - step;
    const double down = loss();
    values[c] = saved;
    const double numeric = (up - down) / (2.0 * step);
    r.max_relative_error = std::max(r.max_relative_error, relative_error(analytic[c], numeric));
    ++r.checked;
  }
  return r;
}

}  // namespace abus::testing
