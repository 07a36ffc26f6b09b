#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstr/backbone.hpp"
#include "cstr/heads.hpp"
#include "cstr/losses.hpp"

namespace cstr {

enum class LossKind { ce, ctc };
std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& text);

std::string to_string(ProfileScale scale);
ProfileScale parse_profile_scale(const std::string& text);

struct ModelConfig {
  ProfileScale scale = ProfileScale::toy;
  AblationToggles toggles;
  HeadKind head = HeadKind::sppn;
  LossKind loss = LossKind::ce;
  int k = 8;
  double smoothing = 0.1;

  BackboneProfile profile() const { return BackboneProfile::make(scale, toggles.em); }
  int input_h() const { return profile().input_h; }
  int input_w() const { return profile().input_w; }

  // Canonical "key=value;..." string; parse(fingerprint()) == *this.
  std::string fingerprint() const;
  static ModelConfig parse(const std::string& fingerprint);
  bool operator==(const ModelConfig&) const = default;
};

// Backbone + prediction head + loss, with parameters in an owned store.
class CstrModel {
 public:
  CstrModel(const ModelConfig& config, std::uint64_t seed, Precision precision = Precision::f32);

  const ModelConfig& config() const { return config_; }
  const Alphabet& alphabet() const { return alphabet_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  Precision precision() const { return precision_; }

  // images N x 1 x H x W -> logits N x P x V
  Var logits(Var images) const;
  Shape logits_shape(const Shape& images) const;
  int positions() const;

  // Label positions match the head's output positions (W for SHPN/SEPN, k for SPPN).
  Var loss(Var logits, const std::vector<std::string>& words, int* infeasible = nullptr) const;
  std::vector<std::string> decode(const Tensor& logits) const;

 private:
  ModelConfig config_;
  Precision precision_;
  Alphabet alphabet_;
  ParameterStore params_;
  Backbone backbone_;
  PredictionHead head_;
  int feature_width_ = 0;
};

}  // namespace cstr
