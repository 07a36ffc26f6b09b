#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cstr/gradcheck.hpp"
#include "cstr/params.hpp"
#include "cstr/tensor.hpp"

namespace cstr::testing {

inline Tensor rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                          Precision p = Precision::f64) {
  return uniform_tensor(shape, lo, hi, rng, p);
}

// Distinct values at least 0.05 apart in random order, so max-type ops have
// no near-ties that a finite-difference step could flip.
inline Tensor spread_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape, Precision::f64);
  std::vector<std::int64_t> order(static_cast<std::size_t>(t.numel()));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(order[static_cast<std::size_t>(i)], -1.0 + 0.05 * i);
  return t;
}

// |x| >= 0.1 so relu never sits on its kink within eps.
inline Tensor off_zero_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape, Precision::f64);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double m = rng.uniform(0.1, 1.0);
    t.set(i, rng.uniform() < 0.5 ? -m : m);
  }
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

inline Shape random_shape(Rng& rng, int rank, int lo, int hi) {
  Shape s;
  for (int i = 0; i < rank; ++i) s.push_back(lo + static_cast<std::int64_t>(rng.below(hi - lo + 1)));
  return s;
}

}  // namespace cstr::testing
