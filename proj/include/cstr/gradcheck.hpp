#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "cstr/autodiff.hpp"

namespace cstr {

// A tensor program: builds a scalar from parameters looked up in the graph.
using Program = std::function<Var(Graph&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every element; otherwise a seeded sample of this many per tensor.
  std::int64_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  // Graph mode used for both the analytic and the perturbed evaluations.
  bool training = true;
  // Denominator floor of the relative error. Deep programs need a larger floor
  // because structurally zero gradients meet finite-difference roundoff.
  double floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  std::int64_t checked = 0;
};

// |a - n| / max(floor, |a| + |n|)
double relative_error(double analytic, double numeric, double floor = 1e-8);

// Compares reverse-mode gradients of `program` against central differences
// (f(x + eps) - f(x - eps)) / (2 eps) for every trainable parameter. The store
// must hold double-precision tensors; it is restored before returning.
GradCheckResult grad_check(const Program& program, ParameterStore& params,
                           const GradCheckOptions& options = {});

}  // namespace cstr
