#pragma once

// Composite building blocks of the recognition backbone.

#include <optional>
#include <string>

#include "cstr/layers.hpp"

namespace cstr {

// Channel gate followed by spatial gate:
//   Mc = sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))     per channel
//   Ms = sigmoid(conv7x7([mean_c(x'), max_c(x')]))      per position, x' = Mc * x
//   out = Ms * x'
// The MLP output layer and the spatial conv start at zero, so both gates
// start at exactly 0.5.
class Cbam {
 public:
  Cbam() = default;
  Cbam(InitContext& ctx, const std::string& prefix, int channels, int reduction,
       int spatial_kernel = 7);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;

 private:
  std::string prefix_;
  int channels_ = 0;
  Linear fc1_, fc2_;
  Conv2d spatial_;
};

// Embedded-Gaussian non-local unit with a residual connection:
//   y_i = sum_j softmax_j(theta(x_i) . phi(x_j)) g(x_j),  out = W_z(y) + x
// W_z is zero-initialized so the unit starts as an exact identity.
class NonLocal {
 public:
  NonLocal() = default;
  NonLocal(InitContext& ctx, const std::string& prefix, int channels);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;

 private:
  int channels_ = 0;
  int inner_ = 0;
  Conv2d theta_, phi_, g_, out_;
};

struct ResidualBlockSpec {
  int in_channels = 0;
  int out_channels = 0;
  bool with_cbam = false;
  int cbam_reduction = 16;

  bool projection() const { return in_channels != out_channels; }
};

// relu(F(x) + shortcut(x)), F = conv3x3-bn-relu-conv3x3-bn [-> CBAM].
// The shortcut is a 1x1 conv + bn projection iff the channel counts differ.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(InitContext& ctx, const std::string& prefix, const ResidualBlockSpec& spec);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;
  const ResidualBlockSpec& spec() const { return spec_; }

 private:
  ResidualBlockSpec spec_;
  ConvBnRelu branch1_, branch2_;
  std::optional<Cbam> cbam_;
  std::optional<ConvBnRelu> shortcut_;
};

enum class SadmVariant { A, B };

struct SadmSpec {
  int channels = 0;
  SadmVariant variant = SadmVariant::A;
  int stride_h = 2;
  int stride_w = 2;
  // false: plain strided conv-bn-relu, same output shape.
  bool with_non_local = true;
};

// Semantic-aware downsampling: non-local unit -> strided conv3x3-bn-relu.
// Variants A and B are built identically; the tag records the placement.
class Sadm {
 public:
  Sadm() = default;
  Sadm(InitContext& ctx, const std::string& prefix, const SadmSpec& spec);

  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;
  const SadmSpec& spec() const { return spec_; }

 private:
  void check_input(const Shape& in) const;

  SadmSpec spec_;
  std::optional<NonLocal> non_local_;
  ConvBnRelu down_;
};

// Top-down fusion of three levels at strides 1x, 2x, 4x relative to c3:
// 1x1 laterals to `channels`, nearest x2 upsampling + add, one 3x3 smoothing conv.
class Fpn {
 public:
  Fpn() = default;
  Fpn(InitContext& ctx, const std::string& prefix, int c3_channels, int c4_channels,
      int c5_channels, int channels);

  Var operator()(Var c3, Var c4, Var c5) const;
  Shape output_shape(const Shape& c3, const Shape& c4, const Shape& c5) const;

  const Conv2d& lateral3() const { return lateral3_; }
  const Conv2d& smooth() const { return smooth_; }

 private:
  int channels_ = 0;
  Conv2d lateral3_, lateral4_, lateral5_, smooth_;
};

}  // namespace cstr
