#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>

#include "tsm/rng.hpp"
#include "tsm/tensor.hpp"

namespace tsm::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// A fixed random projection turns any tensor into a scalar whose gradient
// is dense and O(1).
inline Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.normal();
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline void copy_values(Tensor dst, const Tensor& src) {
  auto d = dst.mutable_data();
  auto s = src.data();
  std::copy(s.begin(), s.end(), d.begin());
}

inline void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

}  // namespace tsm::testing
