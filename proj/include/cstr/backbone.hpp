#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cstr/blocks.hpp"

namespace cstr {

enum class Downsample { maxpool, sadm_a, sadm_b };

// One backbone stage: downsample -> `blocks` residual blocks -> tail conv-bn-relu
// -> `post_blocks` residual blocks. A tail_kernel of 2 uses padding (0,1,0,1).
struct StageSpec {
  Downsample downsample = Downsample::maxpool;
  int channels = 0;
  int blocks = 1;
  int tail_kernel = 3;
  int post_blocks = 0;
};

enum class ProfileScale { paper, toy };

struct BackboneProfile {
  std::vector<int> stem_channels;  // 3x3 conv-bn-relu layers from the 1-channel input
  std::vector<StageSpec> stages;
  int input_h = 0;
  int input_w = 0;
  int fpn_channels = 0;
  int cbam_reduction = 16;

  // em=true: the enhanced widths/repeats/resolution. em=false: the base layout.
  static BackboneProfile make(ProfileScale scale, bool em);
  static BackboneProfile paper(bool em = true) { return make(ProfileScale::paper, em); }
  static BackboneProfile toy(bool em = true) { return make(ProfileScale::toy, em); }
};

struct AblationToggles {
  bool em = true;    // CBAM in every residual block + FPN over the last three stages
  bool sadm = true;  // false: the downsampling convs lose their non-local unit
  bool operator==(const AblationToggles&) const = default;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(InitContext& ctx, const std::string& prefix, const BackboneProfile& profile,
           const AblationToggles& toggles);

  // N x 1 x H x W -> FPN map (em) or the last stage map (base).
  Var operator()(Var x) const;
  Shape output_shape(const Shape& in) const;
  int output_channels() const;

  const BackboneProfile& profile() const { return profile_; }
  const AblationToggles& toggles() const { return toggles_; }

 private:
  struct Stage {
    Downsample kind = Downsample::maxpool;
    std::optional<Sadm> sadm;
    std::vector<ResidualBlock> blocks;
    ConvBnRelu tail;
    std::vector<ResidualBlock> post;
  };

  Var run_stage(const Stage& stage, Var x) const;
  Shape stage_shape(const Stage& stage, Shape s) const;

  BackboneProfile profile_;
  AblationToggles toggles_;
  std::vector<ConvBnRelu> stem_;
  std::vector<Stage> stages_;
  std::optional<Fpn> fpn_;
};

// Throws std::invalid_argument naming the offending field.
void validate(const BackboneProfile& profile, const AblationToggles& toggles);

// Trainable scalars of the backbone built from (profile, toggles).
std::int64_t parameter_count(const BackboneProfile& profile, const AblationToggles& toggles);

}  // namespace cstr
