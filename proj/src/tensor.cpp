#include "cstr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cstr {

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32" || text == "float") return Precision::f32;
  if (text == "f64" || text == "double") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + text + "' (expected f32 or f64)");
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), precision_(precision) {
  if (shape_.empty()) throw ShapeError("tensor rank must be >= 1");
  for (auto d : shape_) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + to_string(shape_));
  }
  const auto n = static_cast<std::size_t>(cstr::numel(shape_));
  if (precision_ == Precision::f32) {
    storage_ = std::make_shared<Storage>(std::vector<float>(n, 0.0f));
  } else {
    storage_ = std::make_shared<Storage>(std::vector<double>(n, 0.0));
  }
}

Tensor Tensor::full(Shape shape, double value, Precision precision) {
  Tensor t(std::move(shape), precision);
  dispatch(precision, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, Precision precision) {
  Tensor t(std::move(shape), precision);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     to_string(t.shape()));
  }
  dispatch(precision, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, Precision precision) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                     precision);
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::at(std::int64_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(i))); },
                    *storage_);
}

void Tensor::set(std::int64_t i, double value) {
  detach();
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        v.at(static_cast<std::size_t>(i)) = static_cast<T>(value);
      },
      *storage_);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, *storage_);
}

Tensor Tensor::to(Precision precision) const {
  if (precision == precision_) return *this;
  Tensor out(shape_, precision);
  dispatch(precision, [&](auto tag) {
    using T = decltype(tag);
    auto dst = out.mutable_data<T>();
    std::visit(
        [&](const auto& src) {
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
        },
        *storage_);
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (cstr::numel(shape) != numel()) {
    throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
  }
  for (auto d : shape) {
    if (d < 1) throw ShapeError("reshape target dims must be >= 1: " + to_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_ || precision_ != other.precision_) return false;
  return *storage_ == *other.storage_;
}

bool Tensor::all_finite() const {
  return std::visit(
      [](const auto& v) { return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); }); },
      *storage_);
}

void Tensor::detach() {
  if (storage_ && storage_.use_count() > 1) storage_ = std::make_shared<Storage>(*storage_);
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + to_string(expected) + ", got " +
                     to_string(t.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

}  // namespace cstr
