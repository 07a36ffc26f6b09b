#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "cstr/trainer.hpp"
#include "test_util.hpp"

using namespace cstr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("cstr_trainer_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// In-memory toy dataset; eval split optionally aliases the training images.
Dataset memory_dataset(int n_train, int n_eval, std::uint64_t seed, bool eval_is_train = false) {
  Dataset d;
  d.height = 16;
  d.width = 64;
  const auto lex = default_lexicon(50);
  Rng rng(seed);
  for (int i = 0; i < n_train; ++i) {
    const std::string& w = lex[rng.below(lex.size())];
    d.train_entries.push_back({"", w, "train", static_cast<std::uint64_t>(i)});
    d.train_images.push_back(render_word(w, 16, 64, mix_seed(seed, i)).image);
  }
  if (eval_is_train) {
    d.eval_entries = d.train_entries;
    d.eval_images = d.train_images;
    return d;
  }
  for (int i = 0; i < n_eval; ++i) {
    const std::string& w = lex[rng.below(lex.size())];
    d.eval_entries.push_back({"", w, "eval", static_cast<std::uint64_t>(i)});
    d.eval_images.push_back(render_word(w, 16, 64, mix_seed(seed + 1, i)).image);
  }
  return d;
}

std::vector<std::string> metric_rows_without_wall_time(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::vector<std::string> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

ParameterStore single(const std::string& name, double value, Shape shape = {3}) {
  ParameterStore s;
  s.add(name, Tensor::full(shape, value, Precision::f64));
  return s;
}

}  // namespace

TEST(Adadelta, FirstStepMatchesFormula) {
  ParameterStore s = single("w", 1.0);
  OptimizerState st;
  adadelta_step(s, {{"w", Tensor::full({3}, 1.0, Precision::f64)}}, st, 1.0);
  const double delta = -std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6);
  EXPECT_NEAR(delta, -4.472e-3, 1e-6);
  for (double v : s.get("w").to_vector()) EXPECT_NEAR(v, 1.0 + delta, 1e-15);
  for (double v : st.sq_grad.at("w").to_vector()) EXPECT_NEAR(v, 0.05, 1e-15);
  for (double v : st.sq_delta.at("w").to_vector()) EXPECT_NEAR(v, 0.05 * delta * delta, 1e-18);
}

TEST(Adadelta, ZeroGradientDecaysAccumulatorsOnly) {
  ParameterStore s = single("w", 0.3);
  OptimizerState st;
  adadelta_step(s, {{"w", Tensor::full({3}, 0.7, Precision::f64)}}, st, 1.0);
  const Tensor w = s.get("w"), g2 = st.sq_grad.at("w"), d2 = st.sq_delta.at("w");
  for (int i = 0; i < 5; ++i) adadelta_step(s, {{"w", Tensor({3}, Precision::f64)}}, st, 1.0);
  EXPECT_TRUE(s.get("w").same_values(w));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(st.sq_grad.at("w").at(i), g2.at(i) * std::pow(0.95, 5), 1e-15);
    EXPECT_NEAR(st.sq_delta.at("w").at(i), d2.at(i) * std::pow(0.95, 5), 1e-18);
    EXPECT_GE(st.sq_grad.at("w").at(i), 0.0);
  }
}

TEST(Adadelta, NonFiniteGradientAbortsWithoutSideEffects) {
  ParameterStore s;
  s.add("a", Tensor::full({2}, 1.0, Precision::f64));
  s.add("b", Tensor::full({2}, 1.0, Precision::f64));
  OptimizerState st;
  Tensor bad({2}, Precision::f64);
  bad.set(1, std::numeric_limits<double>::quiet_NaN());
  try {
    adadelta_step(s, {{"a", Tensor::full({2}, 1.0, Precision::f64)}, {"b", bad}}, st, 1.0);
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "b");
  }
  EXPECT_EQ(s.get("a").at(0), 1.0);
  EXPECT_TRUE(st.sq_grad.empty());
  EXPECT_TRUE(st.sq_delta.empty());
}

TEST(Adadelta, IdenticalStreamsGiveIdenticalTrajectories) {
  ParameterStore a = single("w", 0.1, {4}), b = single("w", 0.1, {4});
  OptimizerState sa, sb;
  Rng ra(3), rb(3);
  for (int step = 0; step < 50; ++step) {
    Tensor ga({4}, Precision::f64), gb({4}, Precision::f64);
    for (int i = 0; i < 4; ++i) {
      ga.set(i, ra.uniform(-1, 1));
      gb.set(i, rb.uniform(-1, 1));
    }
    adadelta_step(a, {{"w", ga}}, sa, 0.5);
    adadelta_step(b, {{"w", gb}}, sb, 0.5);
  }
  EXPECT_TRUE(a.get("w").same_values(b.get("w")));
}

TEST(Schedule, PiecewiseValues) {
  const Schedule s{10, 100, 200, 300};
  EXPECT_EQ(s.lr_at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr_at(1), 0.1);
  EXPECT_EQ(s.lr_at(10), 1.0);
  EXPECT_EQ(s.lr_at(99), 1.0);
  EXPECT_EQ(s.lr_at(100), 0.1);
  EXPECT_EQ(s.lr_at(199), 0.1);
  EXPECT_EQ(s.lr_at(200), 0.01);
  EXPECT_EQ(s.lr_at(10'000), 0.01);
  EXPECT_THROW(s.lr_at(-1), std::invalid_argument);
  for (int t = 1; t <= 10; ++t) EXPECT_GE(s.lr_at(t), s.lr_at(t - 1));
  for (int t = 11; t <= 300; ++t) EXPECT_LE(s.lr_at(t), s.lr_at(t - 1));
  EXPECT_EQ(s.lr_at(150), s.lr_at(150));
}

TEST(Schedule, ScaledKeepsMilestoneRatios) {
  const Schedule full = Schedule::scaled(420'000);
  EXPECT_EQ(full.m1, 150'000);
  EXPECT_EQ(full.m2, 250'000);
  EXPECT_EQ(full.warmup, 4'200);
  const Schedule toy = Schedule::scaled(14'000);
  EXPECT_EQ(toy.m1, 5'000);
  EXPECT_EQ(toy.m2, 8'333);
  EXPECT_EQ(toy.warmup, 140);
  EXPECT_NO_THROW(toy.validate());
  EXPECT_THROW((Schedule{10, 10, 20, 30}).validate(), std::invalid_argument);
  EXPECT_THROW((Schedule{1, 20, 10, 30}).validate(), std::invalid_argument);
  EXPECT_THROW((Schedule{1, 10, 20, 20}).validate(), std::invalid_argument);
}

TEST(BatchIndices, PureAndEpochPermutation) {
  EXPECT_EQ(batch_indices(4, 17, 8, 64), batch_indices(4, 17, 8, 64));
  EXPECT_NE(batch_indices(4, 17, 8, 64), batch_indices(5, 17, 8, 64));
  std::vector<std::size_t> epoch;
  for (int step = 0; step < 8; ++step) {
    const auto b = batch_indices(1, step, 8, 64);
    EXPECT_EQ(b.size(), 8u);
    epoch.insert(epoch.end(), b.begin(), b.end());
  }
  std::sort(epoch.begin(), epoch.end());
  std::vector<std::size_t> all(64);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(epoch, all);
  for (auto i : batch_indices(2, 3, 32, 10)) EXPECT_LT(i, 10u);
}

TEST(ModelConfig, FingerprintRoundTrip) {
  ModelConfig c;
  c.head = HeadKind::sepn;
  c.loss = LossKind::ctc;
  c.toggles = {true, false};
  c.smoothing = 0.25;
  EXPECT_EQ(ModelConfig::parse(c.fingerprint()), c);
  EXPECT_NE(ModelConfig().fingerprint(), c.fingerprint());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir("ckpt");
  CstrModel model(ModelConfig{}, 11);
  OptimizerState opt;
  std::map<std::string, Tensor> grads;
  for (const auto& n : model.params().names())
    if (model.params().trainable(n)) grads[n] = Tensor::full(model.params().get(n).shape(), 0.01);
  adadelta_step(model.params(), grads, opt, 1.0);
  const Checkpoint c = Checkpoint::capture(7, model.config().fingerprint(), model.params(), &opt);
  c.save(dir.path / "a.bin");
  Checkpoint::load(dir.path / "a.bin").save(dir.path / "b.bin");
  EXPECT_EQ(slurp(dir.path / "a.bin"), slurp(dir.path / "b.bin"));
  EXPECT_EQ(slurp(dir.path / "a.bin").substr(0, 4), "CSTR");
  const Checkpoint back = Checkpoint::load(dir.path / "a.bin");
  EXPECT_EQ(back.step, 7u);
  EXPECT_EQ(back.fingerprint, model.config().fingerprint());

  CstrModel other(ModelConfig{}, 12);
  OptimizerState opt2;
  back.restore(other.params(), &opt2);
  for (const auto& n : model.params().names()) EXPECT_TRUE(other.params().get(n).same_values(model.params().get(n)));
  for (const auto& [n, t] : opt.sq_grad) EXPECT_TRUE(opt2.sq_grad.at(n).same_values(t)) << n;

  std::string truncated = slurp(dir.path / "a.bin");
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(Checkpoint::deserialize(truncated), std::runtime_error);
  EXPECT_THROW(Checkpoint::deserialize("XXXX" + truncated.substr(4)), std::runtime_error);
}

TEST(Train, ZeroStepsSavesInitialization) {
  TempDir dir("zero");
  const Dataset d = memory_dataset(8, 4, 1);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 9;
  const TrainResult r = train(cfg, d, dir.path);
  EXPECT_EQ(r.final_step, 0);
  const CstrModel init(cfg.model, model_init_seed(cfg.seed));
  const CstrModel loaded = load_model(r.checkpoint);
  for (const auto& n : init.params().names()) EXPECT_TRUE(loaded.params().get(n).same_values(init.params().get(n))) << n;
}

TEST(Train, OneStepReducesLossOnRepeatedBatch) {
  const Dataset d = memory_dataset(16, 0, 2);
  CstrModel model(ModelConfig{}, 3);
  std::vector<const Tensor*> imgs;
  std::vector<std::string> words;
  for (int i = 0; i < 16; ++i) {
    imgs.push_back(&d.train_images[i]);
    words.push_back(d.train_entries[i].label);
  }
  Tensor batch({16, 1, 16, 64});
  for (int i = 0; i < 16; ++i)
    for (int p = 0; p < 16 * 64; ++p) batch.set(i * 1024 + p, imgs[i]->at(p));
  auto loss_now = [&](bool step) {
    Graph g(model.params(), {Precision::f32, true, step});
    Var loss = model.loss(model.logits(g.constant(batch)), words);
    if (step) {
      g.backward(loss);
      OptimizerState opt;
      adadelta_step(model.params(), g.parameter_grads(), opt, 1.0);
    }
    return loss.value().at(0);
  };
  const double before = loss_now(true);
  EXPECT_LT(loss_now(false), before);
}

TEST(Train, SingleBatchOverfitsToFullAccuracy) {
  TempDir dir("overfit");
  const Dataset d = memory_dataset(32, 0, 4, true);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 32;
  cfg.schedule = Schedule{5, 480, 490, 500};
  cfg.eval_every = 25;
  cfg.early_stop_accuracy = 1.0;
  const TrainResult r = train(cfg, d, dir.path);
  EXPECT_EQ(r.final_eval.word_accuracy, 1.0) << "after " << r.final_step << " steps";
  EXPECT_LE(r.final_step, 500);
  EXPECT_TRUE(fs::exists(dir.path / "metrics.csv"));
}

TEST(Train, ResumeEqualsUninterrupted) {
  TempDir full("full"), part("part");
  const Dataset d = memory_dataset(48, 16, 5);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.seed = 21;
  cfg.augment = true;
  cfg.schedule = Schedule{2, 25, 32, 40};
  cfg.eval_every = 10;
  cfg.steps = 40;
  const TrainResult a = train(cfg, d, full.path);
  cfg.steps = 20;
  const TrainResult half = train(cfg, d, part.path);
  cfg.steps = 40;
  const TrainResult b = train(cfg, d, part.path, half.checkpoint);
  EXPECT_EQ(b.final_step, 40);
  EXPECT_EQ(slurp(a.checkpoint), slurp(b.checkpoint));
  EXPECT_EQ(slurp(full.path / "ckpt_25.bin"), slurp(part.path / "ckpt_25.bin"));
  EXPECT_EQ(metric_rows_without_wall_time(full.path / "metrics.csv"),
            metric_rows_without_wall_time(part.path / "metrics.csv"));
  EXPECT_EQ(a.final_eval.word_accuracy, b.final_eval.word_accuracy);

  ModelConfig other = cfg.model;
  other.head = HeadKind::shpn;
  TrainConfig wrong = cfg;
  wrong.model = other;
  EXPECT_THROW(train(wrong, d, part.path, half.checkpoint), std::runtime_error);
}

TEST(Train, RejectsMismatchedImageSize) {
  TempDir dir("mismatch");
  Dataset d = memory_dataset(4, 2, 6);
  d.width = 32;
  TrainConfig cfg;
  cfg.steps = 1;
  EXPECT_THROW(train(cfg, d, dir.path), std::invalid_argument);
}

TEST(Schedule, ShortRunsStayOrdered) {
  for (std::int64_t total = 4; total < 200; ++total) EXPECT_NO_THROW(Schedule::scaled(total).validate()) << total;
}
