#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace cstr {

enum class Precision : std::uint8_t { f32, f64 };

const char* to_string(Precision p);
// Accepts "f32"/"float" and "f64"/"double"; throws std::invalid_argument otherwise.
Precision parse_precision(const std::string& text);

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Thrown for every shape/contract violation; the message names the offending dims.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major tensor. Copies share the buffer; mutable access detaches it,
// so a Tensor behaves as a value.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::f32);

  static Tensor full(Shape shape, double value, Precision precision = Precision::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            Precision precision = Precision::f32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            Precision precision = Precision::f32);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return cstr::numel(shape_); }
  Precision precision() const { return precision_; }

  template <typename T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(*storage_);
  }
  template <typename T>
  std::span<T> mutable_data() {
    detach();
    return std::get<std::vector<T>>(*storage_);
  }

  double at(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  Tensor to(Precision precision) const;
  // Same buffer, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool same_values(const Tensor& other) const;
  bool all_finite() const;

 private:
  using Storage = std::variant<std::vector<float>, std::vector<double>>;
  void detach();

  Shape shape_;
  Precision precision_ = Precision::f32;
  std::shared_ptr<Storage> storage_;
};

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
}

// Calls f with a value-initialized float or double tag matching `p`.
template <typename F>
decltype(auto) dispatch(Precision p, F&& f) {
  if (p == Precision::f32) return f(float{});
  return f(double{});
}

void require_shape(const Tensor& t, const Shape& expected, const char* what);
void require_rank(const Tensor& t, int rank, const char* what);

}  // namespace cstr
