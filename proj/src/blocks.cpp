#include "cstr/blocks.hpp"

namespace cstr {

namespace {

void require_channels(const Shape& in, int channels, const std::string& who) {
  if (in.size() != 4 || in[1] != channels) {
    throw ShapeError(who + ": expected N x " + std::to_string(channels) + " x H x W, got " + to_string(in));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// CBAM

Cbam::Cbam(InitContext& ctx, const std::string& prefix, int channels, int reduction,
           int spatial_kernel)
    : prefix_(prefix), channels_(channels) {
  if (reduction < 1 || channels < reduction) {
    throw ShapeError(prefix + ": CBAM needs channels >= reduction ratio (" + std::to_string(channels) +
                     " < " + std::to_string(reduction) + ")");
  }
  const int hidden = channels / reduction;
  fc1_ = Linear(ctx, prefix + ".channel.fc1", channels, hidden);
  fc2_ = Linear(ctx, prefix + ".channel.fc2", hidden, channels, Init::zeros);
  spatial_ = Conv2d(ctx, prefix + ".spatial", 2, 1, spatial_kernel, spatial_kernel,
                    Conv2dOptions::same(spatial_kernel), true, Init::zeros);
}

Var Cbam::operator()(Var x) const {
  require_channels(x.shape(), channels_, prefix_);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto mlp = [&](Var v) { return fc2_(relu(fc1_(v))); };
  Var avg = reshape(global_avg_pool(x), {n, c});
  Var mx = reshape(reduce_max(reshape(x, {n, c, h * w}), 2), {n, c});
  Var channel_gate = reshape(sigmoid(add(mlp(avg), mlp(mx))), {n, c, 1, 1});
  Var refined = mul(x, channel_gate);

  Var pooled = concat({reduce_mean(refined, 1), reduce_max(refined, 1)}, 1);
  Var spatial_gate = sigmoid(spatial_(pooled));
  return mul(refined, spatial_gate);
}

Shape Cbam::output_shape(const Shape& in) const {
  require_channels(in, channels_, prefix_);
  return in;
}

// ---------------------------------------------------------------------------
// Non-local

NonLocal::NonLocal(InitContext& ctx, const std::string& prefix, int channels)
    : channels_(channels), inner_(channels / 2) {
  if (inner_ < 1) {
    throw ShapeError(prefix + ": non-local needs at least 2 channels, got " + std::to_string(channels));
  }
  const auto one = Conv2dOptions{};
  theta_ = Conv2d(ctx, prefix + ".theta", channels, inner_, 1, 1, one, true, Init::fan_in_unit);
  phi_ = Conv2d(ctx, prefix + ".phi", channels, inner_, 1, 1, one, true, Init::fan_in_unit);
  g_ = Conv2d(ctx, prefix + ".g", channels, inner_, 1, 1, one, true, Init::fan_in_unit);
  out_ = Conv2d(ctx, prefix + ".out", inner_, channels, 1, 1, one, true, Init::zeros);
}

Var NonLocal::operator()(Var x) const {
  require_channels(x.shape(), channels_, "non_local");
  const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3), p = h * w;
  Var theta = reshape(theta_(x), {n, inner_, p});
  Var phi = reshape(phi_(x), {n, inner_, p});
  Var g = reshape(g_(x), {n, inner_, p});
  // affinity[i][j] = theta_i . phi_j, normalized over j
  Var affinity = softmax(bmm(theta, phi, true, false), 2);
  // y[c][i] = sum_j g[c][j] * affinity[i][j]
  Var y = reshape(bmm(g, affinity, false, true), {n, inner_, h, w});
  return add(out_(y), x);
}

Shape NonLocal::output_shape(const Shape& in) const {
  require_channels(in, channels_, "non_local");
  return in;
}

// ---------------------------------------------------------------------------
// Residual block

ResidualBlock::ResidualBlock(InitContext& ctx, const std::string& prefix, const ResidualBlockSpec& spec)
    : spec_(spec) {
  const auto same3 = Conv2dOptions::same(3);
  branch1_ = ConvBnRelu(ctx, prefix + ".branch1", spec.in_channels, spec.out_channels, 3, 3, same3, true);
  branch2_ = ConvBnRelu(ctx, prefix + ".branch2", spec.out_channels, spec.out_channels, 3, 3, same3, false);
  if (spec.with_cbam) cbam_.emplace(ctx, prefix + ".cbam", spec.out_channels, spec.cbam_reduction);
  if (spec.projection()) {
    shortcut_.emplace(ctx, prefix + ".shortcut", spec.in_channels, spec.out_channels, 1, 1,
                      Conv2dOptions{}, false);
  }
}

Var ResidualBlock::operator()(Var x) const {
  require_channels(x.shape(), spec_.in_channels, "residual_block");
  Var f = branch2_(branch1_(x));
  if (cbam_) f = (*cbam_)(f);
  Var s = shortcut_ ? (*shortcut_)(x) : x;
  return relu(add(f, s));
}

Shape ResidualBlock::output_shape(const Shape& in) const {
  require_channels(in, spec_.in_channels, "residual_block");
  return {in[0], spec_.out_channels, in[2], in[3]};
}

// ---------------------------------------------------------------------------
// SADM

Sadm::Sadm(InitContext& ctx, const std::string& prefix, const SadmSpec& spec) : spec_(spec) {
  if (spec.with_non_local) non_local_.emplace(ctx, prefix + ".non_local", spec.channels);
  const Conv2dOptions strided{spec.stride_h, spec.stride_w, 1, 1, 1, 1};
  down_ = ConvBnRelu(ctx, prefix + ".down", spec.channels, spec.channels, 3, 3, strided, true);
}

void Sadm::check_input(const Shape& in) const {
  require_channels(in, spec_.channels, "sadm");
  if (in[2] % spec_.stride_h != 0 || in[3] % spec_.stride_w != 0) {
    throw ShapeError("sadm: spatial dims " + std::to_string(in[2]) + "x" + std::to_string(in[3]) +
                     " not divisible by stride " + std::to_string(spec_.stride_h) + "x" +
                     std::to_string(spec_.stride_w));
  }
}

Var Sadm::operator()(Var x) const {
  check_input(x.shape());
  return down_(non_local_ ? (*non_local_)(x) : x);
}

Shape Sadm::output_shape(const Shape& in) const {
  check_input(in);
  return {in[0], spec_.channels, in[2] / spec_.stride_h, in[3] / spec_.stride_w};
}

// ---------------------------------------------------------------------------
// FPN

Fpn::Fpn(InitContext& ctx, const std::string& prefix, int c3_channels, int c4_channels,
         int c5_channels, int channels)
    : channels_(channels) {
  const auto one = Conv2dOptions{};
  lateral3_ = Conv2d(ctx, prefix + ".lateral3", c3_channels, channels, 1, 1, one, true, Init::fan_in_unit);
  lateral4_ = Conv2d(ctx, prefix + ".lateral4", c4_channels, channels, 1, 1, one, true, Init::fan_in_unit);
  lateral5_ = Conv2d(ctx, prefix + ".lateral5", c5_channels, channels, 1, 1, one, true, Init::fan_in_unit);
  smooth_ = Conv2d(ctx, prefix + ".smooth", channels, channels, 3, 3, Conv2dOptions::same(3), true,
                   Init::fan_in_unit);
}

Shape Fpn::output_shape(const Shape& c3, const Shape& c4, const Shape& c5) const {
  lateral3_.output_shape(c3);
  lateral4_.output_shape(c4);
  lateral5_.output_shape(c5);
  if (c4[2] * 2 != c3[2] || c4[3] * 2 != c3[3] || c5[2] * 2 != c4[2] || c5[3] * 2 != c4[3] ||
      c3[0] != c4[0] || c4[0] != c5[0]) {
    throw ShapeError("fpn: levels must halve spatially: c3 " + to_string(c3) + ", c4 " + to_string(c4) +
                     ", c5 " + to_string(c5));
  }
  return {c3[0], channels_, c3[2], c3[3]};
}

Var Fpn::operator()(Var c3, Var c4, Var c5) const {
  output_shape(c3.shape(), c4.shape(), c5.shape());
  Var top = lateral5_(c5);
  top = add(lateral4_(c4), upsample_nearest2d(top, 2));
  top = add(lateral3_(c3), upsample_nearest2d(top, 2));
  return smooth_(top);
}

}  // namespace cstr
