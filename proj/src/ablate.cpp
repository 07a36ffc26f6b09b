#include "cstr/ablate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace cstr {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string clean_field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

const char* kCsvHeader =
    "grid,cell,fingerprint,head,loss,em,sadm,augment,seed,status,final_step,eval_word_acc,eval_edit_dist,"
    "train_loss,wall_seconds,error";

void write_result(const std::filesystem::path& path, const CellResult& r) {
  std::ostringstream os;
  os << kCsvHeader << '\n'
     << r.grid << ',' << r.cell << ',' << r.fingerprint << ',' << r.head << ',' << r.loss << ',' << r.em << ','
     << r.sadm << ',' << r.augment << ',' << r.seed << ',' << r.status << ',' << r.final_step << ','
     << std::setprecision(9) << r.eval_word_acc << ',' << r.eval_edit_dist << ',' << r.train_loss << ','
     << std::fixed << std::setprecision(3) << r.wall_seconds << ',' << clean_field(r.error) << '\n';
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out << os.str();
  }
  std::filesystem::rename(tmp, path);
}

std::optional<CellResult> read_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row) || header != kCsvHeader) return std::nullopt;
  const auto f = split(row, ',');
  if (f.size() != 16) return std::nullopt;
  CellResult r;
  try {
    r.grid = f[0];
    r.cell = f[1];
    r.fingerprint = f[2];
    r.head = f[3];
    r.loss = f[4];
    r.em = f[5] == "1";
    r.sadm = f[6] == "1";
    r.augment = f[7] == "1";
    r.seed = std::stoull(f[8]);
    r.status = f[9];
    r.final_step = std::stoll(f[10]);
    r.eval_word_acc = std::stod(f[11]);
    r.eval_edit_dist = std::stod(f[12]);
    r.train_loss = std::stod(f[13]);
    r.wall_seconds = std::stod(f[14]);
    r.error = f[15];
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return r;
}

struct GridInfo {
  std::string title;
  std::vector<std::pair<std::string, double>> cells;  // canonical order with reference values
};

const std::map<std::string, GridInfo>& grid_info() {
  static const std::map<std::string, GridInfo> info = {
      {"table2",
       {"CTC vs CE per prediction network",
        {{"SHPN CTC", 83.8}, {"SHPN CE", 83.6}, {"SEPN CTC", 83.2}, {"SEPN CE", 83.2}, {"SPPN CTC", 82.4},
         {"SPPN CE", 84.1}}}},
      {"table3", {"Backbone ablation", {{"Base", 84.1}, {"Base + EM", 87.2}, {"Base + EM + SADM", 87.3}}}},
      {"table4", {"Data augmentation ablation", {{"Base", 87.3}, {"Base + DA", 89.0}}}},
  };
  return info;
}

}  // namespace

bool RunSpec::full_model() const {
  return head == HeadKind::sppn && loss == LossKind::ce && em && sadm && augment;
}

std::string RunSpec::canonical() const {
  std::ostringstream os;
  os << "head=" << to_string(head) << ";loss=" << to_string(loss) << ";em=" << em << ";sadm=" << sadm
     << ";augment=" << augment;
  return os.str();
}

const std::vector<std::string>& grid_names() {
  static const std::vector<std::string> names = {"table2", "table3", "table4", "single"};
  return names;
}

std::vector<RunSpec> make_grid(const std::string& name, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  std::vector<RunSpec> grid;
  auto cell = [&](const std::string& label) {
    RunSpec r;
    r.grid = name;
    r.cell = label;
    r.seeds = seeds;
    return r;
  };
  if (name == "table2") {
    for (HeadKind h : {HeadKind::shpn, HeadKind::sepn, HeadKind::sppn}) {
      for (LossKind l : {LossKind::ctc, LossKind::ce}) {
        std::string label = to_string(h) + " " + to_string(l);
        std::transform(label.begin(), label.end(), label.begin(), ::toupper);
        RunSpec r = cell(label);
        r.head = h;
        r.loss = l;
        r.augment = false;
        grid.push_back(r);
      }
    }
  } else if (name == "table3") {
    for (int i = 0; i < 3; ++i) {
      RunSpec r = cell(i == 0 ? "Base" : i == 1 ? "Base + EM" : "Base + EM + SADM");
      r.em = i >= 1;
      r.sadm = i == 2;
      r.augment = false;
      grid.push_back(r);
    }
  } else if (name == "table4") {
    for (bool aug : {false, true}) {
      RunSpec r = cell(aug ? "Base + DA" : "Base");
      r.augment = aug;
      grid.push_back(r);
    }
  } else if (name == "single") {
    grid.push_back(cell("single"));
  } else {
    throw std::invalid_argument("unknown grid '" + name + "' (expected table2, table3, table4 or single)");
  }
  return grid;
}

std::optional<double> paper_reference(const std::string& grid, const std::string& cell) {
  const auto it = grid_info().find(grid);
  if (it == grid_info().end()) return std::nullopt;
  for (const auto& [label, value] : it->second.cells) {
    if (label == cell) return value;
  }
  return std::nullopt;
}

TrainConfig cell_config(const TrainConfig& base, const RunSpec& spec, std::uint64_t seed) {
  TrainConfig c = base;
  if (spec.grid != "single") {
    c.model.head = spec.head;
    c.model.loss = spec.loss;
    c.model.toggles.em = spec.em;
    c.model.toggles.sadm = spec.sadm;
    c.augment = spec.augment;
  }
  c.seed = seed;
  return c;
}

std::string cell_fingerprint(const RunSpec& spec, std::uint64_t seed, std::uint64_t dataset_digest,
                             const TrainConfig& base) {
  const TrainConfig c = cell_config(base, spec, seed);
  std::ostringstream os;
  os << spec.grid << '|' << spec.cell << '|' << c.model.fingerprint() << "|augment=" << c.augment << "|seed=" << seed
     << "|data=" << dataset_digest << "|steps=" << c.steps << "|batch=" << c.batch_size
     << "|precision=" << to_string(c.precision) << "|early_stop=" << c.early_stop_accuracy;
  const std::string s = os.str();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(s.data(), s.size());
  return hex.str();
}

AblateSummary ablate(const std::vector<RunSpec>& grid, const Dataset& data, const AblateOptions& options) {
  std::filesystem::create_directories(options.results_dir);
  AblateSummary summary;
  for (const auto& spec : grid) {
    for (std::uint64_t seed : spec.seeds) {
      const std::string fp = cell_fingerprint(spec, seed, data.digest, options.base);
      const auto path = options.results_dir / (fp + ".csv");
      if (auto existing = read_result(path); existing && existing->status == "ok") {
        ++summary.skipped;
        summary.cells.push_back(*existing);
        continue;
      }
      const TrainConfig cfg = cell_config(options.base, spec, seed);
      CellResult r;
      r.grid = spec.grid;
      r.cell = spec.cell;
      r.fingerprint = fp;
      r.head = to_string(cfg.model.head);
      r.loss = to_string(cfg.model.loss);
      r.em = cfg.model.toggles.em;
      r.sadm = cfg.model.toggles.sadm;
      r.augment = cfg.augment;
      r.seed = seed;
      try {
        const auto t = train(cfg, data, options.work_dir / fp);
        r.status = "ok";
        r.final_step = t.final_step;
        r.eval_word_acc = t.final_eval.word_accuracy;
        r.eval_edit_dist = t.final_eval.mean_edit_distance;
        r.train_loss = t.final_train_loss;
        r.wall_seconds = t.wall_seconds;
        ++summary.trained;
      } catch (const std::exception& e) {
        r.status = "failed";
        r.error = e.what();
        ++summary.failed;
      }
      write_result(path, r);
      summary.cells.push_back(r);
    }
  }
  return summary;
}

std::vector<CellResult> read_results(const std::filesystem::path& results_dir) {
  if (!std::filesystem::is_directory(results_dir)) {
    throw std::runtime_error("results store '" + results_dir.string() + "' does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(results_dir)) {
    if (entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<CellResult> out;
  for (const auto& f : files) {
    if (auto r = read_result(f)) out.push_back(*r);
  }
  return out;
}

Report make_report(const std::vector<CellResult>& results) {
  struct Agg {
    std::vector<double> acc;
    int failed = 0;
  };
  std::map<std::string, std::map<std::string, Agg>> by_grid;
  bool any_ok = false;
  for (const auto& r : results) {
    auto& a = by_grid[r.grid][r.cell];
    if (r.status == "ok") {
      a.acc.push_back(100.0 * r.eval_word_acc);
      any_ok = true;
    } else {
      ++a.failed;
    }
  }
  if (!any_ok) throw std::runtime_error("results store has no completed cells");

  std::ostringstream md, csv;
  md << std::fixed << std::setprecision(1);
  csv << "grid,cell,paper_full_scale,toy_mean,toy_std,seeds,failed\n" << std::fixed << std::setprecision(2);
  md << "# Ablation report\n\n"
     << "Accuracy is eval word accuracy in percent, mean ± sample std over seeds. The paper column is the published "
        "full-scale average over real benchmarks; the toy column is this run on synthetic data. Compare directions, "
        "not magnitudes.\n";

  for (const auto& grid : grid_names()) {
    const auto git = by_grid.find(grid);
    if (git == by_grid.end()) continue;
    std::vector<std::string> order;
    if (auto info = grid_info().find(grid); info != grid_info().end()) {
      md << "\n## " << grid << ": " << info->second.title << "\n\n";
      for (const auto& c : info->second.cells) {
        if (git->second.count(c.first)) order.push_back(c.first);
      }
    } else {
      md << "\n## " << grid << "\n\n";
    }
    for (const auto& [cell, agg] : git->second) {
      if (std::find(order.begin(), order.end(), cell) == order.end()) order.push_back(cell);
    }
    md << "| Cell | paper / full scale | this run / toy scale | seeds | failed |\n|---|---|---|---|---|\n";
    for (const auto& cell : order) {
      const Agg& a = git->second.at(cell);
      const auto ref = paper_reference(grid, cell);
      double mean = 0.0, sd = 0.0;
      for (double v : a.acc) mean += v;
      if (!a.acc.empty()) mean /= static_cast<double>(a.acc.size());
      if (a.acc.size() > 1) {
        for (double v : a.acc) sd += (v - mean) * (v - mean);
        sd = std::sqrt(sd / static_cast<double>(a.acc.size() - 1));
      }
      md << "| " << cell << " | ";
      if (ref) md << *ref; else md << "n/a";
      md << " | ";
      if (a.acc.empty()) md << "n/a"; else md << mean << " ± " << sd;
      md << " | " << a.acc.size() << " | " << a.failed << " |\n";
      csv << grid << ',' << cell << ',';
      if (ref) csv << *ref;
      csv << ',';
      if (!a.acc.empty()) csv << mean << ',' << sd; else csv << ',';
      csv << ',' << a.acc.size() << ',' << a.failed << '\n';
    }
  }
  return {md.str(), csv.str()};
}

}  // namespace cstr
