#include "cstr/trainer.hpp"

#include <chrono>
#include <cstring>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace cstr {

// ---------------------------------------------------------------------------
// Schedule

Schedule Schedule::scaled(std::int64_t total) {
  Schedule s;
  s.total = total;
  s.warmup = std::max<std::int64_t>(1, std::llround(static_cast<double>(total) * 0.01));
  s.m1 = std::llround(static_cast<double>(total) * 150.0 / 420.0);
  s.m2 = std::llround(static_cast<double>(total) * 250.0 / 420.0);
  // Rounding collapses milestones for very short runs; keep them strictly ordered.
  s.m1 = std::max(s.m1, s.warmup + 1);
  s.m2 = std::max(s.m2, s.m1 + 1);
  return s;
}

void Schedule::validate() const {
  if (!(warmup >= 0 && warmup < m1 && m1 < m2 && m2 < total)) {
    std::ostringstream os;
    os << "schedule must satisfy 0 <= warmup < m1 < m2 < total, got warmup=" << warmup << " m1=" << m1
       << " m2=" << m2 << " total=" << total;
    throw std::invalid_argument(os.str());
  }
}

double Schedule::lr_at(std::int64_t step) const {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step < warmup) return static_cast<double>(step) / static_cast<double>(warmup);
  if (step < m1) return 1.0;
  if (step < m2) return 0.1;
  return 0.01;
}

// ---------------------------------------------------------------------------
// Adadelta

void adadelta_step(ParameterStore& params, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                   double lr_scale) {
  for (const auto& [name, g] : grads) {
    if (!params.trainable(name)) throw std::invalid_argument("gradient for non-trainable '" + name + "'");
    require_shape(g, params.get(name).shape(), name.c_str());
    if (!g.all_finite()) throw NonFiniteGradient(name);
  }
  const double rho = state.config.rho, eps = state.config.eps, step = state.config.lr * lr_scale;
  for (const auto& [name, g] : grads) {
    Tensor& x = params.mutable_value(name);
    auto init = [&](std::map<std::string, Tensor>& m) -> Tensor& {
      auto it = m.find(name);
      if (it == m.end() || it->second.precision() != x.precision()) {
        it = m.insert_or_assign(name, Tensor(x.shape(), x.precision())).first;
      }
      return it->second;
    };
    Tensor& eg = init(state.sq_grad);
    Tensor& ed = init(state.sq_delta);
    dispatch(x.precision(), [&](auto tag) {
      using T = decltype(tag);
      const Tensor gc = g.to(x.precision());
      auto gs = gc.data<T>();
      auto xs = x.mutable_data<T>();
      auto egs = eg.mutable_data<T>();
      auto eds = ed.mutable_data<T>();
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const T gi = gs[i];
        egs[i] = static_cast<T>(rho * egs[i] + (1.0 - rho) * gi * gi);
        const T delta = static_cast<T>(-std::sqrt(eds[i] + eps) / std::sqrt(egs[i] + eps) * gi);
        eds[i] = static_cast<T>(rho * eds[i] + (1.0 - rho) * delta * delta);
        xs[i] = static_cast<T>(xs[i] + step * delta);
      }
    });
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::string str() {
    const auto n = static_cast<std::size_t>(uint(4));
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

const std::string kSqGrad = std::string(Checkpoint::kOptPrefix) + "sq_grad.";
const std::string kSqDelta = std::string(Checkpoint::kOptPrefix) + "sq_delta.";

}  // namespace

Checkpoint Checkpoint::capture(std::uint64_t step, const std::string& fingerprint, const ParameterStore& params,
                               const OptimizerState* optimizer) {
  Checkpoint c;
  c.step = step;
  c.fingerprint = fingerprint;
  for (const auto& [name, entry] : params) c.records.emplace_back(name, entry.value.to(Precision::f32));
  if (optimizer) {
    for (const auto& [name, t] : optimizer->sq_grad) c.records.emplace_back(kSqGrad + name, t.to(Precision::f32));
    for (const auto& [name, t] : optimizer->sq_delta) c.records.emplace_back(kSqDelta + name, t.to(Precision::f32));
  }
  return c;
}

void Checkpoint::restore(ParameterStore& params, OptimizerState* optimizer) const {
  std::size_t seen = 0;
  for (const auto& [name, t] : records) {
    if (name.rfind(kOptPrefix, 0) == 0) {
      if (!optimizer) continue;
      const bool g = name.rfind(kSqGrad, 0) == 0;
      if (!g && name.rfind(kSqDelta, 0) != 0) throw std::runtime_error("unknown optimizer record '" + name + "'");
      const std::string pname = name.substr((g ? kSqGrad : kSqDelta).size());
      const Tensor& ref = params.get(pname);
      require_shape(t, ref.shape(), name.c_str());
      (g ? optimizer->sq_grad : optimizer->sq_delta).insert_or_assign(pname, t.to(ref.precision()));
      continue;
    }
    if (!params.contains(name)) throw std::runtime_error("checkpoint parameter '" + name + "' not in model");
    params.set(name, t);
    ++seen;
  }
  if (seen != params.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(seen) + " of " + std::to_string(params.size()) +
                             " model parameters");
  }
}

std::string Checkpoint::serialize() const {
  std::string out = "CSTR";
  put_u32(out, version);
  put_u64(out, step);
  put_str(out, fingerprint);
  for (const auto& [name, t] : records) {
    put_str(out, name);
    put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    const Tensor f = t.to(Precision::f32);
    for (float v : f.data<float>()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u32(out, bits);
    }
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CSTR") != 0) throw std::runtime_error("not a checkpoint (bad magic)");
  const std::string body = bytes.substr(4);
  Reader r(body);
  Checkpoint c;
  c.version = static_cast<std::uint32_t>(r.uint(4));
  if (c.version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(c.version));
  c.step = r.uint(8);
  c.fingerprint = r.str();
  while (!r.done()) {
    std::string name = r.str();
    const auto rank = static_cast<int>(r.uint(1));
    if (rank < 1) throw std::runtime_error("checkpoint record '" + name + "' has rank 0");
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.uint(8)));
    Tensor t(shape, Precision::f32);
    for (auto& v : t.mutable_data<float>()) {
      const auto bits = static_cast<std::uint32_t>(r.uint(4));
      std::memcpy(&v, &bits, sizeof v);
    }
    c.records.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("'" + path.string() + "': " + e.what());
  }
}

CstrModel load_model(const std::filesystem::path& checkpoint, Precision precision) {
  const Checkpoint c = Checkpoint::load(checkpoint);
  CstrModel model(ModelConfig::parse(c.fingerprint), 0, precision);
  c.restore(model.params(), nullptr);
  return model;
}

// ---------------------------------------------------------------------------
// Training

namespace {

Tensor stack_images(const std::vector<const Tensor*>& images) {
  const auto h = images.front()->dim(1), w = images.front()->dim(2);
  Tensor out({static_cast<std::int64_t>(images.size()), 1, h, w}, Precision::f32);
  auto d = out.mutable_data<float>();
  std::size_t off = 0;
  for (const Tensor* img : images) {
    const Tensor f = img->to(Precision::f32);
    auto s = f.data<float>();
    std::copy(s.begin(), s.end(), d.begin() + static_cast<std::ptrdiff_t>(off));
    off += s.size();
  }
  return out;
}

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4155;
constexpr std::uint64_t kInitStream = 0x494e;

}  // namespace

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch_size, std::size_t n_train) {
  if (n_train == 0) throw std::invalid_argument("training split is empty");
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::uint64_t perm_epoch = ~0ULL;
  for (int j = 0; j < batch_size; ++j) {
    const auto q = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch_size) + static_cast<std::uint64_t>(j);
    const std::uint64_t epoch = q / n_train;
    if (epoch != perm_epoch) {
      perm.resize(n_train);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(mix_seed(mix_seed(seed, kShuffleStream), epoch));
      for (std::size_t i = n_train - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      perm_epoch = epoch;
    }
    out.push_back(perm[q % n_train]);
  }
  return out;
}

EvalResult evaluate(const CstrModel& model, const std::vector<Tensor>& images, const std::vector<std::string>& labels,
                    int batch_size, int limit) {
  if (images.size() != labels.size()) throw std::invalid_argument("evaluate: image/label count mismatch");
  const std::size_t n = limit > 0 ? std::min(images.size(), static_cast<std::size_t>(limit)) : images.size();
  EvalResult r;
  GraphOptions opt;
  opt.precision = model.precision();
  opt.training = false;
  opt.grad_enabled = false;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    std::vector<const Tensor*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&images[i]);
    Graph g(model.params(), opt);
    Var logits = model.logits(g.constant(stack_images(batch)));
    for (auto& p : model.decode(logits.value())) r.predictions.push_back(std::move(p));
  }
  r.references.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  r.metrics = compute_metrics(r.predictions, r.references);
  return r;
}

std::uint64_t model_init_seed(std::uint64_t train_seed) { return mix_seed(train_seed, kInitStream); }

TrainResult train(const TrainConfig& config, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume) {
  const auto t0 = std::chrono::steady_clock::now();
  if (config.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (config.steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (config.eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  const Schedule schedule = config.schedule ? *config.schedule : Schedule::scaled(config.steps);
  if (config.steps > 0) schedule.validate();
  if (data.height != config.model.input_h() || data.width != config.model.input_w()) {
    throw std::invalid_argument("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                                " but the model expects " + std::to_string(config.model.input_h()) + "x" +
                                std::to_string(config.model.input_w()));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());

  CstrModel model(config.model, model_init_seed(config.seed), config.precision);
  OptimizerState opt;
  opt.config = config.optimizer;
  const std::string fingerprint = config.model.fingerprint();
  std::int64_t start = 0;
  if (resume) {
    const Checkpoint c = Checkpoint::load(*resume);
    if (c.fingerprint != fingerprint) {
      throw std::runtime_error("resume checkpoint was trained with '" + c.fingerprint + "', not '" + fingerprint + "'");
    }
    c.restore(model.params(), &opt);
    start = static_cast<std::int64_t>(c.step);
  }

  std::vector<std::string> eval_labels;
  for (const auto& e : data.eval_entries) eval_labels.push_back(e.label);

  const auto metrics_path = out_dir / "metrics.csv";
  const bool fresh = !std::filesystem::exists(metrics_path) || !resume;
  std::ofstream metrics(metrics_path, fresh ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open '" + metrics_path.string() + "'");
  if (fresh) metrics << "step,lr_scale,train_loss,eval_word_acc,eval_edit_dist,wall_seconds\n";
  metrics << std::setprecision(9);

  auto seconds = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto save = [&](std::int64_t step, const std::filesystem::path& path) {
    Checkpoint::capture(static_cast<std::uint64_t>(step), fingerprint, model.params(), &opt).save(path);
  };

  TrainResult result;
  result.final_step = start;
  GraphOptions gopt;
  gopt.precision = config.precision;
  double window_loss = 0.0;
  std::int64_t window_count = 0;
  for (std::int64_t step = start; step < config.steps; ++step) {
    const auto idx = batch_indices(config.seed, step, config.batch_size, data.train_images.size());
    std::vector<Tensor> augmented;
    std::vector<const Tensor*> images;
    std::vector<std::string> words;
    augmented.reserve(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Tensor& img = data.train_images[idx[j]];
      if (config.augment) {
        const std::uint64_t s = mix_seed(mix_seed(mix_seed(config.seed, kAugmentStream), static_cast<std::uint64_t>(step)), j);
        augmented.push_back(augment(Sample{img, {}, 0}, config.augmentation, s).image);
        images.push_back(&augmented.back());
      } else {
        images.push_back(&img);
      }
      words.push_back(data.train_entries[idx[j]].label);
    }

    Graph g(model.params(), gopt);
    Var logits = model.logits(g.constant(stack_images(images)));
    Var loss = model.loss(logits, words);
    g.backward(loss);
    const double lr = schedule.lr_at(step + 1);
    adadelta_step(model.params(), g.parameter_grads(), opt, lr);
    g.commit_buffers(model.params());

    const double lv = loss.value().at(0);
    window_loss += lv;
    ++window_count;
    result.final_train_loss = lv;
    result.final_step = step + 1;

    const bool last = step + 1 == config.steps;
    if ((step + 1) % config.eval_every == 0 || last) {
      const EvalResult ev = evaluate(model, data.eval_images, eval_labels, 100, config.eval_limit);
      result.final_eval = ev.metrics;
      metrics << step + 1 << ',' << lr << ',' << window_loss / static_cast<double>(window_count) << ','
              << ev.metrics.word_accuracy << ',' << ev.metrics.mean_edit_distance << ',' << std::fixed
              << std::setprecision(3) << seconds() << std::defaultfloat << std::setprecision(9) << '\n';
      metrics.flush();
      if (!config.quiet) {
        std::cerr << "step " << step + 1 << " lr " << lr << " loss " << window_loss / static_cast<double>(window_count)
                  << " eval_acc " << ev.metrics.word_accuracy << " (" << seconds() << "s)\n";
      }
      window_loss = 0.0;
      window_count = 0;
      if (config.early_stop_accuracy > 0.0 && ev.metrics.word_accuracy >= config.early_stop_accuracy) {
        result.stopped_early = !last;
        break;
      }
    }
    if (step + 1 == schedule.m1 || step + 1 == schedule.m2) {
      save(step + 1, out_dir / ("ckpt_" + std::to_string(step + 1) + ".bin"));
    }
  }

  result.checkpoint = out_dir / "final.bin";
  save(result.final_step, result.checkpoint);
  result.wall_seconds = seconds();
  return result;
}

}  // namespace cstr
