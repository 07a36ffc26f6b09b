#include "cstr/layers.hpp"

#include <cmath>

namespace cstr {

namespace {

Tensor init_tensor(InitContext& ctx, Shape shape, Init init, std::int64_t fan_in, double gain) {
  if (init == Init::zeros) return Tensor(std::move(shape), ctx.precision);
  if (init == Init::fan_in_unit) gain = 1.0;
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor(std::move(shape), -bound, bound, ctx.rng, ctx.precision);
}

// He-uniform for weights feeding ReLUs.
constexpr double kWeightGain = 2.449489742783178;  // sqrt(6)

}  // namespace

Conv2d::Conv2d(InitContext& ctx, std::string prefix, int in_channels, int out_channels,
               int kernel_h, int kernel_w, Conv2dOptions options, bool bias, Init init)
    : prefix_(std::move(prefix)),
      in_(in_channels),
      out_(out_channels),
      kh_(kernel_h),
      kw_(kernel_w),
      options_(options),
      bias_(bias) {
  if (in_ < 1 || out_ < 1 || kh_ < 1 || kw_ < 1) {
    throw ShapeError(prefix_ + ": invalid conv dims " + std::to_string(in_) + "->" +
                     std::to_string(out_) + " k" + std::to_string(kh_) + "x" + std::to_string(kw_));
  }
  const std::int64_t fan_in = static_cast<std::int64_t>(in_) * kh_ * kw_;
  ctx.store.add(prefix_ + ".weight", init_tensor(ctx, {out_, in_, kh_, kw_}, init, fan_in, kWeightGain));
  if (bias_) ctx.store.add(prefix_ + ".bias", init_tensor(ctx, {out_}, init, fan_in, 1.0));
}

Var Conv2d::operator()(Var x) const {
  Graph& g = x.graph();
  return conv2d(x, g.param(prefix_ + ".weight"), bias_ ? g.param(prefix_ + ".bias") : Var(), options_);
}

Shape Conv2d::output_shape(const Shape& in) const {
  if (in.size() != 4 || in[1] != in_) {
    throw ShapeError(prefix_ + ": expected N x " + std::to_string(in_) + " x H x W, got " + to_string(in));
  }
  const std::int64_t h = (in[2] + options_.pad_top + options_.pad_bottom - kh_) / options_.stride_h + 1;
  const std::int64_t w = (in[3] + options_.pad_left + options_.pad_right - kw_) / options_.stride_w + 1;
  if (h < 1 || w < 1) throw ShapeError(prefix_ + ": input " + to_string(in) + " smaller than kernel");
  return {in[0], out_, h, w};
}

BatchNorm2d::BatchNorm2d(InitContext& ctx, std::string prefix, int channels)
    : prefix_(std::move(prefix)) {
  ctx.store.add(prefix_ + ".weight", Tensor::full({channels}, 1.0, ctx.precision));
  ctx.store.add(prefix_ + ".bias", Tensor({channels}, ctx.precision));
  ctx.store.add(prefix_ + ".running_mean", Tensor({channels}, ctx.precision), false);
  ctx.store.add(prefix_ + ".running_var", Tensor::full({channels}, 1.0, ctx.precision), false);
}

Var BatchNorm2d::operator()(Var x) const {
  Graph& g = x.graph();
  return batch_norm2d(x, g.param(prefix_ + ".weight"), g.param(prefix_ + ".bias"),
                      prefix_ + ".running_mean", prefix_ + ".running_var");
}

ConvBnRelu::ConvBnRelu(InitContext& ctx, const std::string& prefix, int in_channels,
                       int out_channels, int kernel_h, int kernel_w, Conv2dOptions options,
                       bool with_relu)
    : conv_(ctx, prefix + ".conv", in_channels, out_channels, kernel_h, kernel_w, options, false),
      bn_(ctx, prefix + ".bn", out_channels),
      relu_(with_relu) {}

Var ConvBnRelu::operator()(Var x) const {
  Var y = bn_(conv_(x));
  return relu_ ? relu(y) : y;
}

Linear::Linear(InitContext& ctx, std::string prefix, int in_features, int out_features, Init init)
    : prefix_(std::move(prefix)) {
  ctx.store.add(prefix_ + ".weight", init_tensor(ctx, {out_features, in_features}, init, in_features, kWeightGain));
  ctx.store.add(prefix_ + ".bias", init_tensor(ctx, {out_features}, init, in_features, 1.0));
}

Var Linear::operator()(Var x) const {
  Graph& g = x.graph();
  return linear(x, g.param(prefix_ + ".weight"), g.param(prefix_ + ".bias"));
}

}  // namespace cstr
