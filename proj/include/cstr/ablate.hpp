#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cstr/trainer.hpp"

namespace cstr {

struct RunSpec {
  std::string grid = "single";
  std::string cell = "single";
  HeadKind head = HeadKind::sppn;
  LossKind loss = LossKind::ce;
  bool em = true;
  bool sadm = true;
  bool augment = true;
  std::vector<std::uint64_t> seeds{0};

  // (sppn, ce, em, sadm, augment) is the full model.
  bool full_model() const;
  std::string canonical() const;
};

// table2: 3 heads x {ctc, ce}; table3: Base, Base + EM, Base + EM + SADM;
// table4: Base, Base + DA. All CE/SPPN unless the grid varies it.
std::vector<RunSpec> make_grid(const std::string& name, const std::vector<std::uint64_t>& seeds);
const std::vector<std::string>& grid_names();

// Trained-model reference value (average accuracy, %) for a cell, if the grid mirrors a published table.
std::optional<double> paper_reference(const std::string& grid, const std::string& cell);

TrainConfig cell_config(const TrainConfig& base, const RunSpec& spec, std::uint64_t seed);

// Hash of the run spec, seed, dataset digest and the training budget of `base`.
std::string cell_fingerprint(const RunSpec& spec, std::uint64_t seed, std::uint64_t dataset_digest,
                             const TrainConfig& base);

struct CellResult {
  std::string grid, cell, fingerprint;
  std::string head, loss;
  bool em = true, sadm = true, augment = true;
  std::uint64_t seed = 0;
  std::string status;  // "ok" or "failed"
  std::int64_t final_step = 0;
  double eval_word_acc = 0.0;
  double eval_edit_dist = 0.0;
  double train_loss = 0.0;
  double wall_seconds = 0.0;
  std::string error;
};

struct AblateOptions {
  TrainConfig base;
  std::filesystem::path results_dir;  // one <fingerprint>.csv per cell and seed
  std::filesystem::path work_dir;     // per-cell checkpoints and metrics
};

struct AblateSummary {
  int trained = 0;
  int skipped = 0;
  int failed = 0;
  std::vector<CellResult> cells;
};

// Completed cells (status ok) are skipped; failed cells are retried.
AblateSummary ablate(const std::vector<RunSpec>& grid, const Dataset& data, const AblateOptions& options);

std::vector<CellResult> read_results(const std::filesystem::path& results_dir);

struct Report {
  std::string markdown;
  std::string csv;
};

// Throws std::runtime_error if there is no completed cell.
Report make_report(const std::vector<CellResult>& results);

}  // namespace cstr
