#pragma once

#include <string>

#include "cstr/layers.hpp"

namespace cstr {

enum class HeadKind { shpn, sepn, sppn };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

struct HeadConfig {
  HeadKind kind = HeadKind::sppn;
  int k = 25;             // output positions for SPPN
  int num_classes = 37;   // alphabet + the special token
};

// Maps backbone features N x C x H x W to logits N x P x num_classes.
//   shpn: mean over H, one shared 1x1 conv applied at every column (P = W)
//   sepn: mean over H, a separate 1x1 projection per column (P = W)
//   sppn: global average pool, k separate projections (P = k)
// SEPN fixes W at construction; SHPN and SPPN accept any width.
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(InitContext& ctx, const std::string& prefix, const HeadConfig& config,
                 int in_channels, int feature_width);

  Var operator()(Var features) const;
  Shape output_shape(const Shape& features) const;
  int positions(int feature_width) const;
  const HeadConfig& config() const { return config_; }

 private:
  void check(const Shape& features) const;

  std::string prefix_;
  HeadConfig config_;
  int in_channels_ = 0;
  int feature_width_ = 0;
  Conv2d shared_;
  Linear pooled_;
};

}  // namespace cstr
