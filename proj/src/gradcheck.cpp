#include "cstr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cstr {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max(floor, std::abs(analytic) + std::abs(numeric));
}

namespace {

double evaluate(const Program& program, const ParameterStore& params, bool training) {
  Graph g(params, {Precision::f64, training, false});
  Var out = program(g);
  return out.value().at(0);
}

std::vector<std::int64_t> pick_indices(std::int64_t n, std::int64_t limit, Rng& rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (limit <= 0 || limit >= n) return idx;
  // Partial Fisher-Yates.
  for (std::int64_t i = 0; i < limit; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(limit));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckResult grad_check(const Program& program, ParameterStore& params,
                           const GradCheckOptions& options) {
  for (const auto& [name, entry] : params) {
    if (entry.value.precision() != Precision::f64) {
      throw std::invalid_argument("grad_check requires double precision; '" + name + "' is " +
                                  to_string(entry.value.precision()));
    }
  }
  std::map<std::string, Tensor> analytic;
  {
    Graph g(params, {Precision::f64, options.training, true});
    Var out = program(g);
    if (out.value().numel() != 1) {
      throw ShapeError("grad_check: program output must be scalar, got " + to_string(out.shape()));
    }
    g.backward(out);
    analytic = g.parameter_grads();
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (const auto& [name, grad] : analytic) {
    Tensor& value = params.mutable_value(name);
    for (std::int64_t i : pick_indices(value.numel(), options.max_elements_per_tensor, rng)) {
      const double orig = value.at(i);
      value.set(i, orig + options.eps);
      const double up = evaluate(program, params, options.training);
      value.set(i, orig - options.eps);
      const double down = evaluate(program, params, options.training);
      value.set(i, orig);
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = grad.at(i);
      const double err = relative_error(a, numeric, options.floor);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = err;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace cstr
