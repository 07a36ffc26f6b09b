#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cstr/model.hpp"
#include "cstr/synth.hpp"

namespace cstr {

// Linear warmup 0 -> 1 over `warmup` steps, then 1, 0.1 from m1, 0.01 from m2.
struct Schedule {
  std::int64_t warmup = 0;
  std::int64_t m1 = 0;
  std::int64_t m2 = 0;
  std::int64_t total = 0;

  // warmup = 1% of total (at least 1); milestones at 150/420 and 250/420 of
  // total, nudged apart when rounding would merge them. Valid for total >= 4.
  static Schedule scaled(std::int64_t total);
  double lr_at(std::int64_t step) const;
  // Throws std::invalid_argument unless warmup < m1 < m2 < total.
  void validate() const;
};

struct AdadeltaConfig {
  double rho = 0.95;
  double eps = 1e-6;
  double lr = 1.0;
};

// E[g^2] and E[dx^2] per trainable parameter, lazily created as zeros.
struct OptimizerState {
  AdadeltaConfig config;
  std::map<std::string, Tensor> sq_grad;
  std::map<std::string, Tensor> sq_delta;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string parameter)
      : std::runtime_error("non-finite gradient for parameter '" + parameter + "'; step aborted"),
        parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

// All gradients are checked before anything is modified.
void adadelta_step(ParameterStore& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                   double lr_scale);

// Checkpoint file: "CSTR", u32 version, u64 step, u32-length fingerprint, then
// records to EOF: u32-length name, u8 rank, u64 dims, little-endian f32 payload.
// Optimizer accumulators use the names "__opt__.sq_grad.<p>" / "__opt__.sq_delta.<p>".
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  static constexpr const char* kOptPrefix = "__opt__.";

  std::uint32_t version = kVersion;
  std::uint64_t step = 0;
  std::string fingerprint;
  std::vector<std::pair<std::string, Tensor>> records;  // file order, f32

  static Checkpoint capture(std::uint64_t step, const std::string& fingerprint, const ParameterStore& params,
                            const OptimizerState* optimizer);
  // Copies parameter records into `params` (converting precision) and optimizer records into `optimizer`.
  void restore(ParameterStore& params, OptimizerState* optimizer) const;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// Rebuilds the model described by the checkpoint fingerprint and loads its parameters.
CstrModel load_model(const std::filesystem::path& checkpoint, Precision precision = Precision::f32);

struct TrainConfig {
  ModelConfig model;
  std::int64_t steps = 4000;
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool augment = false;
  AugmentConfig augmentation;
  std::optional<Schedule> schedule;  // default Schedule::scaled(steps)
  AdadeltaConfig optimizer;
  std::int64_t eval_every = 250;
  int eval_limit = 0;             // 0 = whole eval split
  double early_stop_accuracy = 0; // > 0: stop once eval accuracy reaches it
  Precision precision = Precision::f32;
  bool quiet = true;
};

struct EvalResult {
  Metrics metrics;
  std::vector<std::string> predictions;
  std::vector<std::string> references;
};

// Eval-mode forward (running batchnorm stats) in batches.
EvalResult evaluate(const CstrModel& model, const std::vector<Tensor>& images, const std::vector<std::string>& labels,
                    int batch_size = 100, int limit = 0);

struct TrainResult {
  std::int64_t final_step = 0;
  Metrics final_eval;
  double final_train_loss = 0.0;
  bool stopped_early = false;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint;
};

// Seed of the model initialization used by train() for a given run seed.
std::uint64_t model_init_seed(std::uint64_t train_seed);

// The sample indices of the training batch at `step`: a pure function of
// (seed, step) built from per-epoch seeded permutations.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, std::size_t n_train);

// Writes out_dir/metrics.csv (appended), checkpoints at the schedule milestones
// (ckpt_<step>.bin) and out_dir/final.bin. With `resume`, continues from that
// checkpoint's step, which must come from the same model fingerprint.
TrainResult train(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace cstr
