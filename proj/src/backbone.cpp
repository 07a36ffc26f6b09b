#include "cstr/backbone.hpp"

#include <stdexcept>

namespace cstr {

BackboneProfile BackboneProfile::make(ProfileScale scale, bool em) {
  // Enhanced widths: stem 48, 96; stages 192, 384, 768, 768. The base layout
  // is 2/3 of that width with repeats (1, 2, 5, 3) and no post blocks.
  const int div = scale == ProfileScale::paper ? 1 : 8;
  auto width = [&](int enhanced) { return (em ? enhanced : enhanced * 2 / 3) / div; };

  BackboneProfile p;
  p.stem_channels = {width(48), width(96)};
  const bool toy = scale == ProfileScale::toy;
  const int r2 = 1;
  const int r3 = toy ? 1 : (em ? 4 : 2);
  const int r4 = toy ? 1 : (em ? 7 : 5);
  const int p4 = toy ? 0 : (em ? 5 : 0);
  const int r5 = toy ? 1 : 3;
  p.stages = {
      {Downsample::maxpool, width(192), r2, 3, 0},
      {Downsample::sadm_a, width(384), r3, 3, 0},
      {Downsample::sadm_a, width(768), r4, 3, p4},
      {Downsample::sadm_b, width(768), r5, 2, 0},
  };
  if (toy) {
    p.input_h = 16;
    p.input_w = 64;
  } else {
    p.input_h = em ? 48 : 32;
    p.input_w = em ? 192 : 128;
  }
  p.fpn_channels = toy ? 64 : 512;
  p.cbam_reduction = toy ? 4 : 16;
  return p;
}

void validate(const BackboneProfile& profile, const AblationToggles& toggles) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid backbone profile: " + what); };
  for (std::size_t i = 0; i < profile.stem_channels.size(); ++i) {
    if (profile.stem_channels[i] < 1) fail("stem_channels[" + std::to_string(i) + "] < 1");
  }
  for (std::size_t i = 0; i < profile.stages.size(); ++i) {
    const auto& s = profile.stages[i];
    const std::string tag = "stages[" + std::to_string(i) + "].";
    if (s.channels < 1) fail(tag + "channels < 1");
    if (s.blocks < 1) fail(tag + "blocks < 1");
    if (s.post_blocks < 0) fail(tag + "post_blocks < 0");
    if (s.tail_kernel != 2 && s.tail_kernel != 3) fail(tag + "tail_kernel must be 2 or 3");
    if (toggles.em && s.channels < profile.cbam_reduction) fail(tag + "channels below CBAM reduction");
    if (s.downsample != Downsample::maxpool) {
      const int in = i == 0 ? (profile.stem_channels.empty() ? 1 : profile.stem_channels.back())
                            : profile.stages[i - 1].channels;
      if (toggles.sadm && in < 2) fail(tag + "non-local unit needs >= 2 input channels");
    }
  }
  if (toggles.em && !profile.stages.empty()) {
    if (profile.stages.size() < 3) fail("FPN needs at least three stages");
    if (profile.fpn_channels < 1) fail("fpn_channels < 1");
  }
  if (toggles.em && profile.cbam_reduction < 1) fail("cbam_reduction < 1");
}

Backbone::Backbone(InitContext& ctx, const std::string& prefix, const BackboneProfile& profile,
                   const AblationToggles& toggles)
    : profile_(profile), toggles_(toggles) {
  validate(profile, toggles);
  int channels = 1;
  for (std::size_t i = 0; i < profile.stem_channels.size(); ++i) {
    const int out = profile.stem_channels[i];
    stem_.emplace_back(ctx, prefix + ".stem.conv" + std::to_string(i), channels, out, 3, 3,
                       Conv2dOptions::same(3));
    channels = out;
  }

  for (std::size_t i = 0; i < profile.stages.size(); ++i) {
    const auto& spec = profile.stages[i];
    const std::string sp = prefix + ".stage" + std::to_string(i + 2);
    Stage stage;
    stage.kind = spec.downsample;
    if (spec.downsample != Downsample::maxpool) {
      SadmSpec ds;
      ds.channels = channels;
      ds.variant = spec.downsample == Downsample::sadm_a ? SadmVariant::A : SadmVariant::B;
      ds.with_non_local = toggles.sadm;
      stage.sadm.emplace(ctx, sp + ".downsample", ds);
    }
    auto block = [&](const std::string& name, int in) {
      return ResidualBlock(ctx, sp + "." + name, {in, spec.channels, toggles.em, profile.cbam_reduction});
    };
    for (int b = 0; b < spec.blocks; ++b) {
      stage.blocks.push_back(block("block" + std::to_string(b), b == 0 ? channels : spec.channels));
    }
    const Conv2dOptions tail_opt =
        spec.tail_kernel == 2 ? Conv2dOptions{1, 1, 0, 1, 0, 1} : Conv2dOptions::same(3);
    stage.tail = ConvBnRelu(ctx, sp + ".tail", spec.channels, spec.channels, spec.tail_kernel,
                            spec.tail_kernel, tail_opt);
    for (int b = 0; b < spec.post_blocks; ++b) {
      stage.post.push_back(block("post" + std::to_string(b), spec.channels));
    }
    channels = spec.channels;
    stages_.push_back(std::move(stage));
  }

  if (toggles.em && stages_.size() >= 3) {
    const std::size_t n = profile.stages.size();
    fpn_.emplace(ctx, prefix + ".fpn", profile.stages[n - 3].channels, profile.stages[n - 2].channels,
                 profile.stages[n - 1].channels, profile.fpn_channels);
  }
}

Var Backbone::run_stage(const Stage& stage, Var x) const {
  x = stage.sadm ? (*stage.sadm)(x) : max_pool2x2(x);
  for (const auto& b : stage.blocks) x = b(x);
  x = stage.tail(x);
  for (const auto& b : stage.post) x = b(x);
  return x;
}

Shape Backbone::stage_shape(const Stage& stage, Shape s) const {
  if (stage.sadm) {
    s = stage.sadm->output_shape(s);
  } else {
    s = {s[0], s[1], (s[2] + 1) / 2, (s[3] + 1) / 2};
  }
  for (const auto& b : stage.blocks) s = b.output_shape(s);
  s = stage.tail.output_shape(s);
  for (const auto& b : stage.post) s = b.output_shape(s);
  return s;
}

Var Backbone::operator()(Var x) const {
  output_shape(x.shape());
  for (const auto& conv : stem_) x = conv(x);
  std::vector<Var> outs;
  for (const auto& stage : stages_) {
    x = run_stage(stage, x);
    outs.push_back(x);
  }
  if (fpn_) {
    const std::size_t n = outs.size();
    return (*fpn_)(outs[n - 3], outs[n - 2], outs[n - 1]);
  }
  return x;
}

Shape Backbone::output_shape(const Shape& in) const {
  if (in.size() != 4 || in[1] != 1) {
    throw ShapeError("backbone expects N x 1 x H x W grayscale input, got " + to_string(in));
  }
  Shape s = in;
  for (const auto& conv : stem_) s = conv.output_shape(s);
  std::vector<Shape> outs;
  for (const auto& stage : stages_) {
    s = stage_shape(stage, s);
    outs.push_back(s);
  }
  if (fpn_) {
    const std::size_t n = outs.size();
    return fpn_->output_shape(outs[n - 3], outs[n - 2], outs[n - 1]);
  }
  return s;
}

int Backbone::output_channels() const {
  if (fpn_) return profile_.fpn_channels;
  if (!profile_.stages.empty()) return profile_.stages.back().channels;
  if (!profile_.stem_channels.empty()) return profile_.stem_channels.back();
  return 1;
}

std::int64_t parameter_count(const BackboneProfile& profile, const AblationToggles& toggles) {
  ParameterStore store;
  Rng rng(0);
  InitContext ctx{store, rng, Precision::f32};
  Backbone(ctx, "backbone", profile, toggles);
  return store.trainable_scalar_count();
}

}  // namespace cstr
