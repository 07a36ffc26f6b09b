#include "cstr/model.hpp"

#include <map>
#include <sstream>
#include <stdexcept>

namespace cstr {

std::string to_string(LossKind kind) { return kind == LossKind::ce ? "ce" : "ctc"; }

LossKind parse_loss_kind(const std::string& text) {
  if (text == "ce") return LossKind::ce;
  if (text == "ctc") return LossKind::ctc;
  throw std::invalid_argument("unknown loss '" + text + "' (expected ce or ctc)");
}

std::string to_string(ProfileScale scale) { return scale == ProfileScale::paper ? "paper" : "toy"; }

ProfileScale parse_profile_scale(const std::string& text) {
  if (text == "paper") return ProfileScale::paper;
  if (text == "toy") return ProfileScale::toy;
  throw std::invalid_argument("unknown profile '" + text + "' (expected paper or toy)");
}

std::string ModelConfig::fingerprint() const {
  std::ostringstream os;
  os.precision(17);
  os << "profile=" << to_string(scale) << ";em=" << toggles.em << ";sadm=" << toggles.sadm
     << ";head=" << to_string(head) << ";loss=" << to_string(loss) << ";k=" << k << ";smoothing=" << smoothing;
  return os.str();
}

ModelConfig ModelConfig::parse(const std::string& fingerprint) {
  std::map<std::string, std::string> kv;
  std::istringstream is(fingerprint);
  std::string item;
  while (std::getline(is, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed model fingerprint item '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("model fingerprint lacks '") + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.scale = parse_profile_scale(need("profile"));
  c.toggles.em = need("em") == "1";
  c.toggles.sadm = need("sadm") == "1";
  c.head = parse_head_kind(need("head"));
  c.loss = parse_loss_kind(need("loss"));
  c.k = std::stoi(need("k"));
  c.smoothing = std::stod(need("smoothing"));
  return c;
}

CstrModel::CstrModel(const ModelConfig& config, std::uint64_t seed, Precision precision)
    : config_(config), precision_(precision) {
  Rng rng(seed);
  InitContext ctx{params_, rng, precision};
  const BackboneProfile profile = config.profile();
  backbone_ = Backbone(ctx, "backbone", profile, config.toggles);
  const Shape feat = backbone_.output_shape({1, 1, profile.input_h, profile.input_w});
  feature_width_ = static_cast<int>(feat[3]);
  HeadConfig hc{config.head, config.k, alphabet_.size()};
  head_ = PredictionHead(ctx, "head", hc, backbone_.output_channels(), feature_width_);
}

Var CstrModel::logits(Var images) const { return head_(backbone_(images)); }

Shape CstrModel::logits_shape(const Shape& images) const {
  return head_.output_shape(backbone_.output_shape(images));
}

int CstrModel::positions() const { return head_.positions(feature_width_); }

Var CstrModel::loss(Var logits, const std::vector<std::string>& words, int* infeasible) const {
  const LabelBatch labels = encode_labels(words, static_cast<int>(logits.dim(1)), alphabet_);
  if (config_.loss == LossKind::ce) return ce_loss(logits, labels, config_.smoothing);
  CtcOptions opt;
  opt.blank = alphabet_.special();
  opt.zero_infinity = true;
  return ctc_loss(logits, labels, opt, infeasible);
}

std::vector<std::string> CstrModel::decode(const Tensor& logits) const {
  return config_.loss == LossKind::ce ? decode_ce(logits, alphabet_) : decode_ctc(logits, alphabet_);
}

}  // namespace cstr
