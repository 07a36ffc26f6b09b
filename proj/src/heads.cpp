#include "cstr/heads.hpp"

#include <cmath>
#include <stdexcept>

namespace cstr {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::shpn: return "shpn";
    case HeadKind::sepn: return "sepn";
    case HeadKind::sppn: return "sppn";
  }
  return "?";
}

HeadKind parse_head_kind(const std::string& text) {
  if (text == "shpn") return HeadKind::shpn;
  if (text == "sepn") return HeadKind::sepn;
  if (text == "sppn") return HeadKind::sppn;
  throw std::invalid_argument("unknown head '" + text + "' (expected shpn, sepn or sppn)");
}

PredictionHead::PredictionHead(InitContext& ctx, const std::string& prefix, const HeadConfig& config,
                               int in_channels, int feature_width)
    : prefix_(prefix), config_(config), in_channels_(in_channels), feature_width_(feature_width) {
  if (config.num_classes < 2) throw std::invalid_argument(prefix + ": num_classes must be >= 2");
  if (in_channels < 1) throw std::invalid_argument(prefix + ": in_channels must be >= 1");
  const int v = config.num_classes;
  switch (config.kind) {
    case HeadKind::shpn:
      shared_ = Conv2d(ctx, prefix + ".conv", in_channels, v, 1, 1, Conv2dOptions{}, true, Init::fan_in_unit);
      break;
    case HeadKind::sepn: {
      if (feature_width < 1) throw std::invalid_argument(prefix + ": SEPN needs the feature width");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
      ctx.store.add(prefix + ".weight",
                    uniform_tensor({feature_width, v, in_channels}, -bound, bound, ctx.rng, ctx.precision));
      ctx.store.add(prefix + ".bias", uniform_tensor({feature_width, v}, -bound, bound, ctx.rng, ctx.precision));
      break;
    }
    case HeadKind::sppn:
      if (config.k < 1) throw std::invalid_argument(prefix + ": k must be >= 1");
      pooled_ = Linear(ctx, prefix + ".proj", in_channels, config.k * v, Init::fan_in_unit);
      break;
  }
}

void PredictionHead::check(const Shape& s) const {
  if (s.size() != 4 || s[1] != in_channels_) {
    throw ShapeError(prefix_ + ": expected N x " + std::to_string(in_channels_) + " x H x W features, got " +
                     to_string(s));
  }
  if (config_.kind == HeadKind::sepn && s[3] != feature_width_) {
    throw ShapeError(prefix_ + ": SEPN built for width " + std::to_string(feature_width_) + ", got " +
                     std::to_string(s[3]));
  }
}

int PredictionHead::positions(int feature_width) const {
  return config_.kind == HeadKind::sppn ? config_.k : feature_width;
}

Shape PredictionHead::output_shape(const Shape& features) const {
  check(features);
  return {features[0], positions(static_cast<int>(features[3])), config_.num_classes};
}

Var PredictionHead::operator()(Var x) const {
  check(x.shape());
  const std::int64_t n = x.dim(0), c = x.dim(1), w = x.dim(3);
  const std::int64_t v = config_.num_classes;
  switch (config_.kind) {
    case HeadKind::shpn: {
      Var y = shared_(reduce_mean(x, 2));  // N x V x 1 x W
      return permute(reshape(y, {n, v, w}), {0, 2, 1});
    }
    case HeadKind::sepn: {
      Graph& g = x.graph();
      Var cols = reshape(reduce_mean(x, 2), {n, c, w});
      return position_linear(cols, g.param(prefix_ + ".weight"), g.param(prefix_ + ".bias"));
    }
    case HeadKind::sppn:
      return reshape(pooled_(reshape(global_avg_pool(x), {n, c})), {n, config_.k, v});
  }
  throw std::logic_error("unreachable head kind");
}

}  // namespace cstr
