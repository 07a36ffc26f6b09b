// Command-line entry point. Exit codes: 0 success, 1 runtime failure, 2 usage error.
#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cstr/ablate.hpp"
#include "cstr/config.hpp"
#include "cstr/gradsuite.hpp"
#include "cstr/kernels.hpp"
#include "cstr/settings.hpp"

namespace {

using namespace cstr;

constexpr double kGradTolerance = 1e-4;

// Shared by every subcommand; later sources win: file < --set < dedicated flags.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<long long> seed;
};

Config gather(const Common& common, const std::vector<std::pair<std::string, std::string>>& flags) {
  Config c = common.config_file.empty() ? Config{} : Config::load(common.config_file);
  for (const auto& o : common.overrides) c.set(o);
  if (common.seed) c.set("seed", std::to_string(*common.seed));
  for (const auto& [key, value] : flags) {
    if (!value.empty()) c.set(key, value);
  }
  return c;
}

void print_metrics(const std::string& what, const Metrics& m) {
  std::cout << what << " word_accuracy=" << std::setprecision(6) << m.word_accuracy
            << " mean_edit_distance=" << m.mean_edit_distance << " count=" << m.count << '\n';
}

int cmd_gen_data(const Settings& s) {
  const DatasetSpec spec = s.make_dataset_spec();
  const auto entries = build_dataset(spec, s.data_dir);
  std::cout << "wrote " << entries.size() << " images (" << spec.n_train << " train, " << spec.n_eval
            << " eval, lexicon " << spec.lexicon.size() << ", " << spec.height << "x" << spec.width << ") to "
            << s.data_dir.string() << "\ndigest " << std::hex << dataset_digest(s.data_dir) << std::dec << '\n';
  return 0;
}

int cmd_train(const Settings& s, const std::string& resume) {
  const Dataset data = load_dataset(s.data_dir);
  TrainConfig tc = s.train;
  tc.quiet = false;
  std::optional<std::filesystem::path> from;
  if (!resume.empty()) from = resume;
  const TrainResult r = train(tc, data, s.run_dir, from);
  std::cout << "step " << r.final_step << (r.stopped_early ? " (early stop)" : "") << " train_loss "
            << r.final_train_loss << " wall " << std::fixed << std::setprecision(1) << r.wall_seconds << "s\n"
            << std::defaultfloat;
  print_metrics("eval", r.final_eval);
  std::cout << "checkpoint " << r.checkpoint.string() << '\n';
  return 0;
}

int cmd_eval(const Settings& s, const std::string& checkpoint, const std::string& split) {
  const Dataset data = load_dataset(s.data_dir);
  const CstrModel model = load_model(checkpoint, s.train.precision);
  const bool train_split = split == "train";
  const auto& entries = train_split ? data.train_entries : data.eval_entries;
  std::vector<std::string> labels;
  for (const auto& e : entries) labels.push_back(e.label);
  const EvalResult r =
      evaluate(model, train_split ? data.train_images : data.eval_images, labels, 100, s.train.eval_limit);
  print_metrics(split, r.metrics);
  return 0;
}

int cmd_decode(const Settings& s, const std::string& image, const std::string& checkpoint) {
  const CstrModel model = load_model(checkpoint, s.train.precision);
  const Tensor img = read_pgm(image);
  if (img.dim(1) != model.config().input_h() || img.dim(2) != model.config().input_w()) {
    throw std::invalid_argument("image is " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                                ", model expects " + std::to_string(model.config().input_h()) + "x" +
                                std::to_string(model.config().input_w()));
  }
  const EvalResult r = evaluate(model, {img}, {""});
  std::cout << r.predictions.at(0) << '\n';
  return 0;
}

int cmd_gradcheck(const Settings& s) {
  std::cout << "gemm backend " << kernels::gemm_backend() << '\n';
  bool ok = true;
  run_gradient_suite(s.seed, [&](const GradSuiteEntry& e) {
    const bool pass = e.result.max_rel_error < kGradTolerance;
    ok = ok && pass;
    std::cout << std::left << std::setw(28) << e.family << std::right << " max_rel_error " << std::scientific
              << std::setprecision(3) << e.result.max_rel_error << std::defaultfloat << "  checked "
              << e.result.checked << "  " << (pass ? "PASS" : "FAIL");
    if (!pass) std::cout << "  worst " << e.result.worst_param << '[' << e.result.worst_index << ']';
    std::cout << '\n' << std::flush;
  });
  std::cout << (ok ? "all families < 1e-4" : "gradient check FAILED") << '\n';
  return ok ? 0 : 1;
}

int cmd_ablate(const Settings& s) {
  const Dataset data = load_dataset(s.data_dir);
  auto grid = make_grid(s.grid, s.seeds);
  if (s.grid == "single") {
    // The degenerate grid is plain train + eval of the configured model.
    RunSpec& r = grid.front();
    r.head = s.train.model.head;
    r.loss = s.train.model.loss;
    r.em = s.train.model.toggles.em;
    r.sadm = s.train.model.toggles.sadm;
    r.augment = s.train.augment;
  }
  AblateOptions opt{s.train, s.results_dir, s.work_dir};
  const AblateSummary sum = ablate(grid, data, opt);
  for (const auto& c : sum.cells) {
    std::cout << c.grid << " | " << c.cell << " | seed " << c.seed << " | " << c.status;
    if (c.status == "ok") std::cout << " | acc " << c.eval_word_acc;
    else std::cout << " | " << c.error;
    std::cout << '\n';
  }
  std::cout << "trained " << sum.trained << ", skipped " << sum.skipped << ", failed " << sum.failed << '\n';
  return sum.failed == 0 ? 0 : 1;
}

int cmd_report(const Settings& s, const std::string& out_prefix) {
  const Report r = make_report(read_results(s.results_dir));
  std::cout << r.markdown;
  if (!out_prefix.empty()) {
    std::ofstream(out_prefix + ".md") << r.markdown;
    std::ofstream(out_prefix + ".csv") << r.csv;
  }
  return 0;
}

void fail(const std::string& command, const char* type, const std::string& message) {
  nlohmann::json j = {{"error", {{"command", command}, {"type", type}, {"message", message}}}};
  std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Classification-perspective text recognizer: data, training, evaluation and ablations"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_file, "Config file ([section] headers, key = value)")
      ->check(CLI::ExistingFile);
  app.add_option("--set", common.overrides, "Override a config key: section.key=value (repeatable)");
  app.add_option("--seed", common.seed, "Seed for data generation, initialisation and batching");

  std::string data_dir, run_dir, resume, checkpoint, split = "eval", image, grid, seeds, results, work, steps,
      report_out;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic word-image dataset");
  gen->add_option("--out", data_dir, "Dataset directory (data.dir)");

  auto* tr = app.add_subcommand("train", "Train a model; writes metrics.csv and checkpoints");
  tr->add_option("--data", data_dir, "Dataset directory (data.dir)");
  tr->add_option("--out", run_dir, "Run directory (train.out)");
  tr->add_option("--steps", steps, "Optimizer steps (train.steps)");
  tr->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Word accuracy of a checkpoint on a dataset split");
  ev->add_option("--data", data_dir, "Dataset directory (data.dir)");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train or eval")->check(CLI::IsMember({"train", "eval"}));

  auto* dec = app.add_subcommand("decode", "Print the word recognised in one PGM image");
  dec->add_option("image", image, "Image (binary PGM)")->required()->check(CLI::ExistingFile);
  dec->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite; exit 0 iff every family < 1e-4");

  auto* ab = app.add_subcommand("ablate", "Train every cell of an ablation grid, skipping completed cells");
  ab->add_option("--grid", grid, "table2, table3, table4 or single (ablate.grid)");
  ab->add_option("--seeds", seeds, "Comma-separated seeds (ablate.seeds)");
  ab->add_option("--data", data_dir, "Dataset directory (data.dir)");
  ab->add_option("--results", results, "Results store directory (ablate.results)");
  ab->add_option("--work", work, "Per-cell run directories (ablate.work)");
  ab->add_option("--steps", steps, "Optimizer steps per cell (train.steps)");

  auto* rep = app.add_subcommand("report", "Markdown and CSV tables from a results store");
  rep->add_option("--results", results, "Results store directory (ablate.results)");
  rep->add_option("--out", report_out, "Also write <prefix>.md and <prefix>.csv");

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    const Config config = gather(common, {{"data.dir", data_dir},
                                          {"train.out", run_dir},
                                          {"train.steps", steps},
                                          {"ablate.grid", grid},
                                          {"ablate.seeds", seeds},
                                          {"ablate.results", results},
                                          {"ablate.work", work}});
    const Settings s = resolve_settings(config);
    if (sub == gen) return cmd_gen_data(s);
    if (sub == tr) return cmd_train(s, resume);
    if (sub == ev) return cmd_eval(s, checkpoint, split);
    if (sub == dec) return cmd_decode(s, image, checkpoint);
    if (sub == gc) return cmd_gradcheck(s);
    if (sub == ab) return cmd_ablate(s);
    if (sub == rep) return cmd_report(s, report_out);
  } catch (const std::invalid_argument& e) {
    fail(name, "invalid_argument", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail(name, "runtime_error", e.what());
    return 1;
  }
  return 2;
}
