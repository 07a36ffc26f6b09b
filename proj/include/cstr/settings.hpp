#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "cstr/config.hpp"
#include "cstr/trainer.hpp"

namespace cstr {

// Everything the command-line tool needs, resolved from a Config. Unknown
// keys are rejected so typos fail loudly instead of being ignored.
struct Settings {
  std::uint64_t seed = 0;

  std::filesystem::path data_dir = "data";
  std::filesystem::path lexicon_file;  // empty: built-in lexicon
  int lexicon_size = 50;
  DatasetSpec dataset;  // lexicon filled by make_dataset_spec()

  TrainConfig train;
  std::filesystem::path run_dir = "run";

  std::string grid = "single";
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path results_dir = "results";
  std::filesystem::path work_dir = "work";

  // Dataset spec with the lexicon loaded; canvas follows the model profile
  // unless data.height / data.width were given.
  DatasetSpec make_dataset_spec() const;
};

const std::set<std::string>& known_setting_keys();

// `seed` seeds data generation and training; data.seed / train.seed override it.
Settings resolve_settings(const Config& config);

}  // namespace cstr
