#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cstr/gradcheck.hpp"

namespace cstr {

struct GradSuiteEntry {
  std::string family;
  GradCheckResult result;
  double seconds = 0.0;
};

// Finite-difference checks in double precision for every primitive, every
// composite block, the three heads, both losses, and one full toy model.
// Composite programs use random (non-zero) parameters everywhere and a loss
// sum(out * R) with a fixed random R, so no gradient is identically zero.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed,
                                               const std::function<void(const GradSuiteEntry&)>& on_entry = {});

// Refills every trainable tensor with U(-bound, bound); batchnorm scales
// (names ending in ".bn.weight") get U(0.5, 1.5).
void randomize_trainable(ParameterStore& store, Rng& rng, double bound = 0.5);

}  // namespace cstr
