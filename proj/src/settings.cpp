#include "cstr/settings.hpp"

#include <stdexcept>

namespace cstr {

const std::set<std::string>& known_setting_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "data.dir", "data.lexicon", "data.lexicon_size", "data.n_train", "data.n_eval", "data.height",
      "data.width", "data.eval_noise", "data.seed",
      "model.profile", "model.head", "model.loss", "model.k", "model.em", "model.sadm", "model.smoothing",
      "train.steps", "train.batch", "train.seed", "train.augment", "train.eval_every", "train.eval_limit",
      "train.early_stop", "train.precision", "train.out", "train.warmup", "train.m1", "train.m2",
      "optimizer.rho", "optimizer.eps", "optimizer.lr",
      "augment.probability", "augment.blur_lengths", "augment.blur_angles", "augment.noise_sigma",
      "augment.brightness", "augment.contrast",
      "ablate.grid", "ablate.seeds", "ablate.results", "ablate.work",
  };
  return keys;
}

namespace {

std::uint64_t to_seed(long long v, const std::string& key) {
  if (v < 0) throw std::invalid_argument("config key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(v);
}

std::vector<int> to_ints(const std::vector<long long>& v) { return {v.begin(), v.end()}; }

}  // namespace

Settings resolve_settings(const Config& c) {
  c.require_known(known_setting_keys());
  Settings s;
  s.seed = to_seed(c.get_int("seed", 0), "seed");

  ModelConfig& m = s.train.model;
  m.scale = parse_profile_scale(c.get("model.profile", to_string(m.scale)));
  m.head = parse_head_kind(c.get("model.head", to_string(m.head)));
  m.loss = parse_loss_kind(c.get("model.loss", to_string(m.loss)));
  m.k = static_cast<int>(c.get_int("model.k", m.k));
  m.toggles.em = c.get_bool("model.em", m.toggles.em);
  m.toggles.sadm = c.get_bool("model.sadm", m.toggles.sadm);
  m.smoothing = c.get_double("model.smoothing", m.smoothing);

  s.data_dir = c.get("data.dir", s.data_dir.string());
  s.lexicon_file = c.get("data.lexicon", "");
  s.lexicon_size = static_cast<int>(c.get_int("data.lexicon_size", s.lexicon_size));
  DatasetSpec& d = s.dataset;
  d.n_train = static_cast<int>(c.get_int("data.n_train", d.n_train));
  d.n_eval = static_cast<int>(c.get_int("data.n_eval", d.n_eval));
  d.height = static_cast<int>(c.get_int("data.height", m.input_h()));
  d.width = static_cast<int>(c.get_int("data.width", m.input_w()));
  d.eval_noise = c.get_double("data.eval_noise", d.eval_noise);
  d.seed = to_seed(c.get_int("data.seed", static_cast<long long>(s.seed)), "data.seed");

  TrainConfig& t = s.train;
  t.steps = c.get_int("train.steps", t.steps);
  t.batch_size = static_cast<int>(c.get_int("train.batch", t.batch_size));
  t.seed = to_seed(c.get_int("train.seed", static_cast<long long>(s.seed)), "train.seed");
  t.augment = c.get_bool("train.augment", t.augment);
  t.eval_every = c.get_int("train.eval_every", t.eval_every);
  t.eval_limit = static_cast<int>(c.get_int("train.eval_limit", t.eval_limit));
  t.early_stop_accuracy = c.get_double("train.early_stop", t.early_stop_accuracy);
  t.precision = parse_precision(c.get("train.precision", to_string(t.precision)));
  s.run_dir = c.get("train.out", s.run_dir.string());
  if (c.has("train.warmup") || c.has("train.m1") || c.has("train.m2")) {
    Schedule sch = Schedule::scaled(t.steps);
    sch.warmup = c.get_int("train.warmup", sch.warmup);
    sch.m1 = c.get_int("train.m1", sch.m1);
    sch.m2 = c.get_int("train.m2", sch.m2);
    sch.validate();
    t.schedule = sch;
  }

  t.optimizer.rho = c.get_double("optimizer.rho", t.optimizer.rho);
  t.optimizer.eps = c.get_double("optimizer.eps", t.optimizer.eps);
  t.optimizer.lr = c.get_double("optimizer.lr", t.optimizer.lr);

  AugmentConfig& a = t.augmentation;
  a.probability = c.get_double("augment.probability", a.probability);
  a.blur_lengths = to_ints(c.get_int_list("augment.blur_lengths", {a.blur_lengths.begin(), a.blur_lengths.end()}));
  a.blur_angles = to_ints(c.get_int_list("augment.blur_angles", {a.blur_angles.begin(), a.blur_angles.end()}));
  a.noise_sigma_max = c.get_double("augment.noise_sigma", a.noise_sigma_max);
  a.brightness = c.get_double("augment.brightness", a.brightness);
  a.contrast = c.get_double("augment.contrast", a.contrast);

  s.grid = c.get("ablate.grid", s.grid);
  s.seeds.clear();
  for (long long v : c.get_int_list("ablate.seeds", {static_cast<long long>(s.seed)})) {
    s.seeds.push_back(to_seed(v, "ablate.seeds"));
  }
  s.results_dir = c.get("ablate.results", s.results_dir.string());
  s.work_dir = c.get("ablate.work", s.work_dir.string());

  if (t.steps < 0) throw std::invalid_argument("train.steps must be >= 0");
  if (t.batch_size < 1) throw std::invalid_argument("train.batch must be >= 1");
  if (s.lexicon_size < 1) throw std::invalid_argument("data.lexicon_size must be >= 1");
  return s;
}

DatasetSpec Settings::make_dataset_spec() const {
  DatasetSpec d = dataset;
  d.lexicon = lexicon_file.empty() ? default_lexicon(static_cast<std::size_t>(lexicon_size), train.model.k)
                                   : read_lexicon(lexicon_file);
  return d;
}

}  // namespace cstr
