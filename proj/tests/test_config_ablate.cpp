#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <fstream>

#include "cstr/ablate.hpp"
#include "cstr/settings.hpp"

using namespace cstr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("cstr_ablate_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Dataset memory_dataset(const std::vector<std::string>& words, int n_train, int n_eval, std::uint64_t digest) {
  Dataset d;
  d.height = 16;
  d.width = 64;
  d.digest = digest;
  for (int i = 0; i < n_train + n_eval; ++i) {
    const std::string& w = words[i % words.size()];
    const bool train = i < n_train;
    (train ? d.train_entries : d.eval_entries).push_back({"", w, train ? "train" : "eval", 0});
    (train ? d.train_images : d.eval_images).push_back(render_word(w, 16, 64, i).image);
  }
  return d;
}

TrainConfig tiny_budget() {
  TrainConfig c;
  c.steps = 3;
  c.batch_size = 4;
  c.schedule = Schedule{1, 2, 3, 4};
  c.eval_every = 3;
  return c;
}

CellResult ok_cell(const std::string& grid, const std::string& cell, std::uint64_t seed, double acc) {
  CellResult r;
  r.grid = grid;
  r.cell = cell;
  r.fingerprint = grid + cell + std::to_string(seed);
  r.seed = seed;
  r.status = "ok";
  r.eval_word_acc = acc;
  return r;
}

}  // namespace

TEST(Config, SectionsCommentsAndTypes) {
  const Config c = Config::parse(
      "seed = 3\n"
      "# comment\n"
      "[train]\n"
      "steps = 120   ; trailing comment\n"
      "augment = yes\n"
      "\n"
      "[ablate]\n"
      "seeds = 0, 1,2\n"
      "[optimizer]\n"
      "rho=0.9\n");
  EXPECT_EQ(c.get_int("seed", 0), 3);
  EXPECT_EQ(c.get_int("train.steps", 0), 120);
  EXPECT_TRUE(c.get_bool("train.augment", false));
  EXPECT_EQ(c.get_int_list("ablate.seeds", {}), (std::vector<long long>{0, 1, 2}));
  EXPECT_DOUBLE_EQ(c.get_double("optimizer.rho", 0), 0.9);
  EXPECT_EQ(c.get("model.head", "sppn"), "sppn");
  EXPECT_THROW(c.get_int("optimizer.rho", 0), std::invalid_argument);
}

TEST(Config, MalformedInputNamesLocation) {
  for (const char* bad : {"[train\nsteps=1\n", "[]\n", "[train]\nsteps\n", "[train]\n = 4\n"}) {
    try {
      Config::parse(bad, "cfg.ini");
      FAIL() << bad;
    } catch (const std::invalid_argument& e) {
      EXPECT_NE(std::string(e.what()).find("cfg.ini"), std::string::npos) << e.what();
    }
  }
  Config c;
  c.set("train.steps=9");
  EXPECT_EQ(c.get_int("train.steps", 0), 9);
  EXPECT_THROW(c.set("nonsense"), std::invalid_argument);
  EXPECT_THROW(Config::load("/nonexistent/cstr.ini"), std::runtime_error);
}

TEST(Settings, DefaultsAndOverrides) {
  Config c;
  c.set("seed", "4");
  c.set("model.head", "shpn");
  c.set("train.steps", "700");
  c.set("data.n_train", "10");
  const Settings s = resolve_settings(c);
  EXPECT_EQ(s.train.seed, 4u);
  EXPECT_EQ(s.dataset.seed, 4u);
  EXPECT_EQ(s.dataset.height, 16);
  EXPECT_EQ(s.dataset.width, 64);
  EXPECT_EQ(s.dataset.n_train, 10);
  EXPECT_EQ(s.train.model.head, HeadKind::shpn);
  EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{4}));
  EXPECT_EQ(s.make_dataset_spec().lexicon.size(), 50u);

  c.set("data.seed", "8");
  c.set("train.warmup", "5");
  c.set("train.m1", "100");
  EXPECT_EQ(resolve_settings(c).dataset.seed, 8u);
  EXPECT_EQ(resolve_settings(c).train.schedule->warmup, 5);
  EXPECT_EQ(resolve_settings(c).train.schedule->m2, Schedule::scaled(700).m2);

  Config typo;
  typo.set("train.stepz", "1");
  EXPECT_THROW(resolve_settings(typo), std::invalid_argument);
  Config bad;
  bad.set("train.batch", "0");
  EXPECT_THROW(resolve_settings(bad), std::invalid_argument);
  Config sched;
  sched.set("train.steps", "100");
  sched.set("train.m1", "500");
  EXPECT_THROW(resolve_settings(sched), std::invalid_argument);
}

TEST(Grid, CellCountsMirrorTables) {
  EXPECT_EQ(make_grid("table2", {0}).size(), 6u);
  EXPECT_EQ(make_grid("table3", {0}).size(), 3u);
  EXPECT_EQ(make_grid("table4", {0}).size(), 2u);
  EXPECT_EQ(make_grid("single", {0}).size(), 1u);
  EXPECT_THROW(make_grid("table9", {0}), std::invalid_argument);
  EXPECT_THROW(make_grid("table2", {}), std::invalid_argument);
  const auto t3 = make_grid("table3", {0, 1});
  EXPECT_FALSE(t3[0].em);
  EXPECT_FALSE(t3[0].sadm);
  EXPECT_TRUE(t3[1].em);
  EXPECT_FALSE(t3[1].sadm);
  EXPECT_TRUE(t3[2].full_model() || !t3[2].augment);
  EXPECT_EQ(t3[2].seeds.size(), 2u);
  int full = 0;
  for (const auto& g : grid_names())
    for (const auto& r : make_grid(g, {0})) full += r.full_model();
  EXPECT_GE(full, 2);
  RunSpec r;
  EXPECT_TRUE(r.full_model());
  r.loss = LossKind::ctc;
  EXPECT_FALSE(r.full_model());
}

TEST(Grid, ReferenceValuesForEveryCell) {
  const std::map<std::string, std::vector<double>> want{
      {"table2", {83.8, 83.6, 83.2, 83.2, 82.4, 84.1}}, {"table3", {84.1, 87.2, 87.3}}, {"table4", {87.3, 89.0}}};
  for (const auto& [grid, values] : want) {
    const auto cells = make_grid(grid, {0});
    ASSERT_EQ(cells.size(), values.size());
    std::multiset<double> got, expected(values.begin(), values.end());
    for (const auto& c : cells) got.insert(paper_reference(grid, c.cell).value());
    EXPECT_EQ(got, expected) << grid;
  }
  EXPECT_FALSE(paper_reference("single", "single").has_value());
}

TEST(Fingerprint, ChangesWithSeedDigestAndBudget) {
  const RunSpec spec = make_grid("table4", {0})[0];
  const TrainConfig base = tiny_budget();
  const auto fp = cell_fingerprint(spec, 0, 1, base);
  EXPECT_EQ(fp, cell_fingerprint(spec, 0, 1, base));
  EXPECT_NE(fp, cell_fingerprint(spec, 1, 1, base));
  EXPECT_NE(fp, cell_fingerprint(spec, 0, 2, base));
  TrainConfig longer = base;
  longer.steps = 4;
  EXPECT_NE(fp, cell_fingerprint(spec, 0, 1, longer));
  EXPECT_NE(fp, cell_fingerprint(make_grid("table4", {0})[1], 0, 1, base));
}

TEST(Ablate, ResumeSkipsCompletedCells) {
  TempDir dir("resume");
  const Dataset d = memory_dataset({"cat", "dog", "sun"}, 8, 4, 77);
  AblateOptions opt{tiny_budget(), dir.path / "results", dir.path / "work"};
  const auto grid = make_grid("table4", {0, 1});
  const AblateSummary first = ablate(grid, d, opt);
  EXPECT_EQ(first.trained, 4);
  EXPECT_EQ(first.skipped, 0);
  const auto mtime = fs::last_write_time(dir.path / "results" / (first.cells[0].fingerprint + ".csv"));
  const AblateSummary second = ablate(grid, d, opt);
  EXPECT_EQ(second.trained, 0);
  EXPECT_EQ(second.skipped, 4);
  EXPECT_EQ(fs::last_write_time(dir.path / "results" / (first.cells[0].fingerprint + ".csv")), mtime);
  ASSERT_EQ(read_results(dir.path / "results").size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(second.cells[i].eval_word_acc, first.cells[i].eval_word_acc);
}

TEST(Ablate, FailedCellsAreMarkedAndRetried) {
  TempDir dir("partial");
  // A 10-letter word fits SHPN/SEPN's 16 positions but not SPPN's k = 8 CE targets.
  const Dataset d = memory_dataset({"abcdefghij", "cat"}, 8, 2, 5);
  AblateOptions opt{tiny_budget(), dir.path / "results", dir.path / "work"};
  const auto grid = make_grid("table2", {0});
  const AblateSummary s = ablate(grid, d, opt);
  int failed_sppn_ce = 0, ok_shpn = 0;
  for (const auto& c : s.cells) {
    if (c.head == "sppn" && c.loss == "ce") failed_sppn_ce += c.status == "failed" && !c.error.empty();
    if (c.head == "shpn") ok_shpn += c.status == "ok";
  }
  EXPECT_EQ(failed_sppn_ce, 1);
  EXPECT_EQ(ok_shpn, 2);
  EXPECT_EQ(s.failed + s.trained, 6);
  const AblateSummary again = ablate(grid, d, opt);
  EXPECT_EQ(again.failed, s.failed);
  EXPECT_EQ(again.skipped, s.trained);
}

TEST(Ablate, SingleCellEqualsTrainThenEval) {
  TempDir dir("single");
  const Dataset d = memory_dataset({"cat", "dog", "sun", "map"}, 8, 8, 3);
  TrainConfig base = tiny_budget();
  base.seed = 12;
  const AblateSummary s = ablate(make_grid("single", {12}), d, {base, dir.path / "results", dir.path / "work"});
  ASSERT_EQ(s.cells.size(), 1u);
  const TrainResult t = train(base, d, dir.path / "plain");
  std::vector<std::string> labels;
  for (const auto& e : d.eval_entries) labels.push_back(e.label);
  const EvalResult ev = evaluate(load_model(t.checkpoint), d.eval_images, labels);
  EXPECT_EQ(s.cells[0].eval_word_acc, t.final_eval.word_accuracy);
  EXPECT_EQ(s.cells[0].eval_edit_dist, t.final_eval.mean_edit_distance);
  EXPECT_EQ(s.cells[0].train_loss, t.final_train_loss);
  EXPECT_NEAR(ev.metrics.mean_edit_distance, t.final_eval.mean_edit_distance, 1e-12);
}

TEST(Report, MeanStddevAndReferenceColumns) {
  std::vector<CellResult> rs;
  for (const auto& c : make_grid("table2", {0}))
    for (std::uint64_t seed : {0, 1}) rs.push_back(ok_cell("table2", c.cell, seed, 0.5 + 0.1 * seed));
  for (const auto& c : make_grid("table3", {0})) rs.push_back(ok_cell("table3", c.cell, 0, 0.8));
  for (const auto& c : make_grid("table4", {0})) rs.push_back(ok_cell("table4", c.cell, 0, 0.9));
  const Report r = make_report(rs);
  for (const char* v : {"83.8", "83.6", "83.2", "82.4", "84.1", "87.2", "87.3", "89.0"}) {
    EXPECT_NE(r.markdown.find(v), std::string::npos) << v;
    EXPECT_NE(r.csv.find(v), std::string::npos) << v;
  }
  EXPECT_NE(r.markdown.find("paper / full scale"), std::string::npos);
  EXPECT_NE(r.markdown.find("this run / toy scale"), std::string::npos);
  // Two seeds at 50% and 60%: mean 55.0, sample stddev 7.07.
  EXPECT_NE(r.markdown.find("55.0"), std::string::npos) << r.markdown;
  EXPECT_NE(r.markdown.find("7.1"), std::string::npos) << r.markdown;
}

TEST(Report, EmptyStoreIsAnError) {
  EXPECT_THROW(make_report({}), std::runtime_error);
  CellResult failed = ok_cell("table4", "Base", 0, 0);
  failed.status = "failed";
  EXPECT_THROW(make_report({failed}), std::runtime_error);
  TempDir dir("empty");
  EXPECT_TRUE(read_results(dir.path).empty());
  EXPECT_THROW(read_results(dir.path / "missing"), std::runtime_error);
}
