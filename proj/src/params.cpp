#include "cstr/params.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cstr {

void ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  if (name.empty()) throw std::invalid_argument("parameter name must not be empty");
  if (!value.defined()) throw std::invalid_argument("parameter '" + name + "' is undefined");
  auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), trainable});
  if (!inserted) throw std::invalid_argument("duplicate parameter name '" + name + "'");
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second.value;
}

bool ParameterStore::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second.trainable;
}

void ParameterStore::set(const std::string& name, Tensor value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  if (it->second.value.shape() != value.shape()) {
    throw ShapeError("parameter '" + name + "': shape " + to_string(value.shape()) +
                     " does not match " + to_string(it->second.value.shape()));
  }
  it->second.value = value.to(it->second.value.precision());
}

Tensor& ParameterStore::mutable_value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second.value;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

std::int64_t ParameterStore::trainable_scalar_count() const {
  std::int64_t n = 0;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) n += entry.value.numel();
  }
  return n;
}

ParameterStore ParameterStore::to(Precision precision) const {
  ParameterStore out;
  for (const auto& [name, entry] : entries_) out.add(name, entry.value.to(precision), entry.trainable);
  return out;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, Precision precision) {
  Tensor t(std::move(shape), precision);
  dispatch(precision, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

}  // namespace cstr
