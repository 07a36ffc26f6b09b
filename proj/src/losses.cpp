#include "cstr/losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace cstr {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Row-wise log-softmax of a rows x cols block, computed in double.
void log_softmax_rows(std::span<const double> in, std::int64_t rows, std::int64_t cols, std::span<double> out) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = kNegInf;
    for (std::int64_t c = 0; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const double lz = mx + std::log(z);
    for (std::int64_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
}

std::vector<double> as_double(const Tensor& t) { return t.to_vector(); }

void require_logits(const Var& logits, const LabelBatch& labels, const char* who) {
  if (logits.value().rank() != 3) {
    throw ShapeError(std::string(who) + ": logits must be N x P x V, got " + to_string(logits.shape()));
  }
  if (logits.dim(0) != labels.batch) {
    throw ShapeError(std::string(who) + ": logits batch " + std::to_string(logits.dim(0)) + " vs " +
                     std::to_string(labels.batch) + " labels");
  }
}

std::vector<int> argmax_rows(const Tensor& logits, std::int64_t& batch, std::int64_t& positions) {
  const Shape& s = logits.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw ShapeError("decode: logits must be P x V or N x P x V, got " + to_string(s));
  }
  batch = s.size() == 3 ? s[0] : 1;
  positions = s[s.size() - 2];
  const std::int64_t v = s.back();
  const auto x = logits.to_vector();
  std::vector<int> out(static_cast<std::size_t>(batch * positions));
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = x.data() + r * static_cast<std::size_t>(v);
    out[r] = static_cast<int>(std::max_element(row, row + v) - row);  // first maximum
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Alphabet::Alphabet() : Alphabet("0123456789abcdefghijklmnopqrstuvwxyz") {}

Alphabet::Alphabet(std::string symbols) : symbols_(std::move(symbols)) {
  std::fill(std::begin(lookup_), std::end(lookup_), -1);
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto c = static_cast<unsigned char>(symbols_[i]);
    if (c != std::tolower(c)) throw std::invalid_argument("alphabet symbols must be lowercase");
    if (lookup_[c] != -1) throw std::invalid_argument("duplicate alphabet symbol");
    lookup_[c] = static_cast<int>(i);
  }
}

bool Alphabet::valid(const std::string& word) const {
  for (char ch : word) {
    if (lookup_[std::tolower(static_cast<unsigned char>(ch))] < 0) return false;
  }
  return true;
}

std::vector<int> Alphabet::encode(const std::string& word) const {
  std::vector<int> out;
  out.reserve(word.size());
  for (char ch : word) {
    const int idx = lookup_[std::tolower(static_cast<unsigned char>(ch))];
    if (idx < 0) throw std::invalid_argument("character '" + std::string(1, ch) + "' not in alphabet");
    out.push_back(idx);
  }
  return out;
}

char Alphabet::symbol(int index) const {
  if (index < 0 || index >= static_cast<int>(symbols_.size())) {
    throw std::out_of_range("alphabet index " + std::to_string(index) + " has no symbol");
  }
  return symbols_[static_cast<std::size_t>(index)];
}

LabelBatch encode_labels(const std::vector<std::string>& words, int positions, const Alphabet& alphabet) {
  LabelBatch b;
  b.batch = static_cast<int>(words.size());
  b.positions = positions;
  b.indices.assign(words.size() * static_cast<std::size_t>(positions), alphabet.special());
  for (std::size_t n = 0; n < words.size(); ++n) {
    const auto& w = words[n];
    if (w.empty()) throw std::invalid_argument("empty label");
    if (static_cast<int>(w.size()) > positions) {
      throw std::invalid_argument("label '" + w + "' longer than " + std::to_string(positions) + " positions");
    }
    auto seq = alphabet.encode(w);
    std::copy(seq.begin(), seq.end(), b.indices.begin() + static_cast<std::ptrdiff_t>(n * positions));
    b.lengths.push_back(static_cast<int>(seq.size()));
    b.sequences.push_back(std::move(seq));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Cross-entropy

Var ce_loss(Var logits, const LabelBatch& labels, double smoothing) {
  require_logits(logits, labels, "ce_loss");
  if (logits.dim(1) != labels.positions) {
    throw ShapeError("ce_loss: logits have " + std::to_string(logits.dim(1)) + " positions, labels " +
                     std::to_string(labels.positions));
  }
  if (!(smoothing >= 0.0 && smoothing <= 1.0)) throw std::invalid_argument("ce_loss: smoothing must be in [0,1]");
  const std::int64_t rows = logits.dim(0) * logits.dim(1);
  const std::int64_t v = logits.dim(2);
  for (int idx : labels.indices) {
    if (idx < 0 || idx >= v) throw std::invalid_argument("ce_loss: label index out of range");
  }

  const auto x = as_double(logits.value());
  std::vector<double> lp(x.size());
  log_softmax_rows(x, rows, v, lp);
  const double off = smoothing / static_cast<double>(v);
  const double on = 1.0 - smoothing + off;
  auto grad = std::make_shared<std::vector<double>>(x.size());
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto target = labels.indices[static_cast<std::size_t>(r)];
    for (std::int64_t c = 0; c < v; ++c) {
      const auto i = static_cast<std::size_t>(r * v + c);
      const double t = c == target ? on : off;
      total -= t * lp[i];
      (*grad)[i] = (std::exp(lp[i]) - t) / static_cast<double>(rows);
    }
  }
  Graph& g = logits.graph();
  Tensor out = Tensor::full({1}, total / static_cast<double>(rows), g.precision());
  return g.record(std::move(out), {logits}, [logits, grad](Graph& gr, const Tensor& dy) {
    const double s = dy.at(0);
    std::vector<double> d(grad->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s * (*grad)[i];
    gr.accumulate(logits, Tensor::from_values(logits.shape(), d, gr.precision()));
  });
}

// ---------------------------------------------------------------------------
// CTC

int ctc_min_frames(std::span<const int> label) {
  int n = static_cast<int>(label.size());
  for (std::size_t i = 1; i < label.size(); ++i) n += label[i] == label[i - 1] ? 1 : 0;
  return n;
}

CtcResult ctc_forward_backward(std::span<const double> log_probs, int frames, int classes,
                               std::span<const int> label, int blank, std::span<double> grad_logits) {
  if (frames < 1 || classes < 1 || log_probs.size() != static_cast<std::size_t>(frames) * classes) {
    throw ShapeError("ctc: log_probs must be frames x classes");
  }
  if (blank < 0 || blank >= classes) throw std::invalid_argument("ctc: blank index out of range");
  for (int l : label) {
    if (l < 0 || l >= classes || l == blank) throw std::invalid_argument("ctc: label index invalid");
  }
  const int states = 2 * static_cast<int>(label.size()) + 1;
  auto sym = [&](int s) { return s % 2 == 0 ? blank : label[static_cast<std::size_t>(s / 2)]; };
  // s-2 -> s skip allowed when s is a label between two different labels
  auto skip = [&](int s) { return s >= 2 && sym(s) != blank && sym(s) != sym(s - 2); };
  auto lp = [&](int t, int c) { return log_probs[static_cast<std::size_t>(t) * classes + c]; };

  std::vector<double> alpha(static_cast<std::size_t>(frames) * states, kNegInf);
  auto A = [&](int t, int s) -> double& { return alpha[static_cast<std::size_t>(t) * states + s]; };
  A(0, 0) = lp(0, blank);
  if (states > 1) A(0, 1) = lp(0, sym(1));
  for (int t = 1; t < frames; ++t) {
    for (int s = 0; s < states; ++s) {
      double a = A(t - 1, s);
      if (s >= 1) a = log_add(a, A(t - 1, s - 1));
      if (skip(s)) a = log_add(a, A(t - 1, s - 2));
      A(t, s) = a == kNegInf ? kNegInf : a + lp(t, sym(s));
    }
  }
  double log_p = A(frames - 1, states - 1);
  if (states > 1) log_p = log_add(log_p, A(frames - 1, states - 2));

  CtcResult result;
  if (log_p == kNegInf) {
    result.loss = std::numeric_limits<double>::infinity();
    result.feasible = false;
    std::fill(grad_logits.begin(), grad_logits.end(), 0.0);
    return result;
  }
  result.loss = -log_p;
  if (grad_logits.empty()) return result;
  if (grad_logits.size() != log_probs.size()) throw ShapeError("ctc: gradient buffer size mismatch");

  // beta excludes the emission at t itself.
  std::vector<double> beta(static_cast<std::size_t>(frames) * states, kNegInf);
  auto B = [&](int t, int s) -> double& { return beta[static_cast<std::size_t>(t) * states + s]; };
  B(frames - 1, states - 1) = 0.0;
  if (states > 1) B(frames - 1, states - 2) = 0.0;
  for (int t = frames - 2; t >= 0; --t) {
    for (int s = 0; s < states; ++s) {
      double b = B(t + 1, s) + lp(t + 1, sym(s));
      if (s + 1 < states) b = log_add(b, B(t + 1, s + 1) + lp(t + 1, sym(s + 1)));
      if (s + 2 < states && skip(s + 2)) b = log_add(b, B(t + 1, s + 2) + lp(t + 1, sym(s + 2)));
      B(t, s) = b;
    }
  }
  for (int t = 0; t < frames; ++t) {
    double* g = grad_logits.data() + static_cast<std::size_t>(t) * classes;
    for (int c = 0; c < classes; ++c) g[c] = std::exp(lp(t, c));
    for (int s = 0; s < states; ++s) {
      const double occ = A(t, s) + B(t, s);
      if (occ != kNegInf) g[sym(s)] -= std::exp(occ - log_p);
    }
  }
  return result;
}

double ctc_brute_force(std::span<const double> probs, int frames, int classes, std::span<const int> label,
                       int blank) {
  if (frames < 1 || classes < 1 || probs.size() != static_cast<std::size_t>(frames) * classes) {
    throw ShapeError("ctc_brute_force: probs must be frames x classes");
  }
  double paths = 1.0;
  for (int t = 0; t < frames; ++t) paths *= classes;
  if (paths > 1e6) throw std::invalid_argument("ctc_brute_force: more than 1e6 paths");

  std::vector<int> path(static_cast<std::size_t>(frames), 0);
  std::vector<int> collapsed;
  double total = 0.0;
  for (;;) {
    collapsed.clear();
    int prev = -1;
    for (int c : path) {
      if (c != prev && c != blank) collapsed.push_back(c);
      prev = c;
    }
    if (std::equal(collapsed.begin(), collapsed.end(), label.begin(), label.end())) {
      double p = 1.0;
      for (int t = 0; t < frames; ++t) p *= probs[static_cast<std::size_t>(t) * classes + path[t]];
      total += p;
    }
    int t = frames - 1;
    while (t >= 0 && ++path[static_cast<std::size_t>(t)] == classes) path[static_cast<std::size_t>(t--)] = 0;
    if (t < 0) break;
  }
  return total > 0.0 ? -std::log(total) : std::numeric_limits<double>::infinity();
}

Var ctc_loss(Var logits, const LabelBatch& labels, const CtcOptions& options, int* infeasible) {
  require_logits(logits, labels, "ctc_loss");
  const auto n = static_cast<int>(logits.dim(0));
  const auto frames = static_cast<int>(logits.dim(1));
  const auto classes = static_cast<int>(logits.dim(2));
  const std::size_t per = static_cast<std::size_t>(frames) * classes;

  const auto x = as_double(logits.value());
  std::vector<double> lp(x.size());
  log_softmax_rows(x, static_cast<std::int64_t>(n) * frames, classes, lp);
  auto grad = std::make_shared<std::vector<double>>(x.size(), 0.0);
  double total = 0.0;
  int bad = 0;
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * per;
    const auto r = ctc_forward_backward(std::span<const double>(lp).subspan(off, per), frames, classes,
                                        labels.sequences[static_cast<std::size_t>(i)], options.blank,
                                        std::span<double>(*grad).subspan(off, per));
    if (!r.feasible) {
      ++bad;
      if (!options.zero_infinity) total = std::numeric_limits<double>::infinity();
      continue;
    }
    total += r.loss;
  }
  if (infeasible) *infeasible = bad;
  for (double& v : *grad) v /= n;

  Graph& g = logits.graph();
  Tensor out = Tensor::full({1}, total / n, g.precision());
  return g.record(std::move(out), {logits}, [logits, grad](Graph& gr, const Tensor& dy) {
    const double s = dy.at(0);
    std::vector<double> d(grad->size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = s * (*grad)[i];
    gr.accumulate(logits, Tensor::from_values(logits.shape(), d, gr.precision()));
  });
}

// ---------------------------------------------------------------------------
// Decoding and metrics

std::string decode_ce_indices(std::span<const int> argmax, const Alphabet& alphabet) {
  std::string out;
  for (int c : argmax) {
    if (c == alphabet.special()) break;
    out.push_back(alphabet.symbol(c));
  }
  return out;
}

std::string decode_ctc_indices(std::span<const int> argmax, const Alphabet& alphabet) {
  std::string out;
  int prev = -1;
  for (int c : argmax) {
    if (c != prev && c != alphabet.special()) out.push_back(alphabet.symbol(c));
    prev = c;
  }
  return out;
}

std::vector<std::string> decode_ce(const Tensor& logits, const Alphabet& alphabet) {
  std::int64_t n = 0, p = 0;
  const auto am = argmax_rows(logits, n, p);
  std::vector<std::string> out;
  for (std::int64_t i = 0; i < n; ++i) {
    out.push_back(decode_ce_indices(std::span<const int>(am).subspan(static_cast<std::size_t>(i * p),
                                                                     static_cast<std::size_t>(p)),
                                    alphabet));
  }
  return out;
}

std::vector<std::string> decode_ctc(const Tensor& logits, const Alphabet& alphabet) {
  std::int64_t n = 0, p = 0;
  const auto am = argmax_rows(logits, n, p);
  std::vector<std::string> out;
  for (std::int64_t i = 0; i < n; ++i) {
    out.push_back(decode_ctc_indices(std::span<const int>(am).subspan(static_cast<std::size_t>(i * p),
                                                                      static_cast<std::size_t>(p)),
                                     alphabet));
  }
  return out;
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

Metrics compute_metrics(const std::vector<std::string>& predictions, const std::vector<std::string>& references) {
  if (predictions.size() != references.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(references.size()) + " references");
  }
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  Metrics m;
  m.count = predictions.size();
  if (m.count == 0) return m;
  double hits = 0.0, dist = 0.0;
  for (std::size_t i = 0; i < m.count; ++i) {
    const auto p = lower(predictions[i]);
    const auto r = lower(references[i]);
    hits += p == r ? 1.0 : 0.0;
    const std::size_t len = std::max(p.size(), r.size());
    dist += len == 0 ? 0.0 : static_cast<double>(levenshtein(p, r)) / static_cast<double>(len);
  }
  m.word_accuracy = hits / static_cast<double>(m.count);
  m.mean_edit_distance = dist / static_cast<double>(m.count);
  return m;
}

}  // namespace cstr
