#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cstr/tensor.hpp"

namespace cstr {

// Named parameters keyed by hierarchical dotted names. Iteration is lexicographic.
class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    bool trainable = true;
  };

  void add(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  bool trainable(const std::string& name) const;
  // Replaces the value; shape and precision must match the existing entry.
  void set(const std::string& name, Tensor value);
  Tensor& mutable_value(const std::string& name);

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::int64_t trainable_scalar_count() const;

  ParameterStore to(Precision precision) const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, Entry> entries_;
};

// Seeded source for weight initialization and other reproducible draws.
// Uses the raw mt19937_64 stream so values do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent per-item seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng,
                      Precision precision = Precision::f32);

}  // namespace cstr
