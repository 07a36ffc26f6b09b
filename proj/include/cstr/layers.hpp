#pragma once

// Parameterized layers. Constructors register parameters in a store; the call
// operators look them up by name in the graph that owns the input.

#include <string>

#include "cstr/ops.hpp"
#include "cstr/params.hpp"

namespace cstr {

struct InitContext {
  ParameterStore& store;
  Rng& rng;
  Precision precision = Precision::f32;
};

// fan_in: He-uniform, bound sqrt(6 / fan_in) (ReLU-fed layers).
// fan_in_unit: bound 1 / sqrt(fan_in) (classifier projections).
enum class Init { fan_in, fan_in_unit, zeros };

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(InitContext& ctx, std::string prefix, int in_channels, int out_channels, int kernel_h,
         int kernel_w, Conv2dOptions options, bool bias, Init init = Init::fan_in);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
  int in_ = 0, out_ = 0, kh_ = 1, kw_ = 1;
  Conv2dOptions options_;
  bool bias_ = false;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(InitContext& ctx, std::string prefix, int channels);

  Var operator()(Var x) const;

 private:
  std::string prefix_;
};

// conv (no bias) -> batchnorm -> optional relu
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(InitContext& ctx, const std::string& prefix, int in_channels, int out_channels,
             int kernel_h, int kernel_w, Conv2dOptions options, bool with_relu = true);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const { return conv_.output_shape(in); }
  const Conv2d& conv() const { return conv_; }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
  bool relu_ = true;
};

class Linear {
 public:
  Linear() = default;
  Linear(InitContext& ctx, std::string prefix, int in_features, int out_features,
         Init init = Init::fan_in);

  Var operator()(Var x) const;

 private:
  std::string prefix_;
};

}  // namespace cstr
