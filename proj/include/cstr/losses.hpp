#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cstr/autodiff.hpp"

namespace cstr {

// 10 digits then 26 lowercase letters; index size() - 1 is the special token
// (end token for CE, blank for CTC). Encoding is case-insensitive.
class Alphabet {
 public:
  Alphabet();
  explicit Alphabet(std::string symbols);

  int size() const { return static_cast<int>(symbols_.size()) + 1; }
  int special() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbols() const { return symbols_; }

  bool valid(const std::string& word) const;
  // Throws std::invalid_argument on a character outside the alphabet.
  std::vector<int> encode(const std::string& word) const;
  char symbol(int index) const;

 private:
  std::string symbols_;
  int lookup_[256];
};

// Row-major N x positions index matrix, padded with the special token.
struct LabelBatch {
  int batch = 0;
  int positions = 0;
  std::vector<int> indices;
  std::vector<int> lengths;
  std::vector<std::vector<int>> sequences;  // unpadded, for CTC
};

// Throws std::invalid_argument if a word is empty, invalid, or longer than positions.
LabelBatch encode_labels(const std::vector<std::string>& words, int positions, const Alphabet& alphabet);

// Mean over N * P positions of cross-entropy against (1 - eps) one-hot + eps / V.
Var ce_loss(Var logits, const LabelBatch& labels, double smoothing = 0.1);

struct CtcOptions {
  int blank = 36;
  // Infeasible samples contribute 0 loss and 0 gradient instead of +inf.
  bool zero_infinity = false;
};

struct CtcResult {
  double loss = 0.0;  // -ln p(label | x); +inf when infeasible
  bool feasible = true;
};

// Minimum frames needed: |label| + number of adjacent repeats.
int ctc_min_frames(std::span<const int> label);

// Single sample. log_probs is T x V row-major (normalized log-probabilities).
// If grad_logits is non-empty it receives d loss / d logits, where
// log_probs = log_softmax(logits) along V.
CtcResult ctc_forward_backward(std::span<const double> log_probs, int frames, int classes,
                               std::span<const int> label, int blank, std::span<double> grad_logits = {});

// Enumerates all classes^frames paths. Throws std::invalid_argument above 1e6 paths.
double ctc_brute_force(std::span<const double> probs, int frames, int classes, std::span<const int> label,
                       int blank);

// logits N x T x V (unnormalized). Mean over the batch of per-sample losses.
// `infeasible` (optional) receives the count of samples with no valid alignment.
Var ctc_loss(Var logits, const LabelBatch& labels, const CtcOptions& options = {}, int* infeasible = nullptr);

// Per-position argmax (lowest index on ties), truncated at the first special token.
std::vector<std::string> decode_ce(const Tensor& logits, const Alphabet& alphabet);
// Best path: per-frame argmax, collapse repeats, drop blanks.
std::vector<std::string> decode_ctc(const Tensor& logits, const Alphabet& alphabet);
std::string decode_ce_indices(std::span<const int> argmax, const Alphabet& alphabet);
std::string decode_ctc_indices(std::span<const int> argmax, const Alphabet& alphabet);

std::size_t levenshtein(const std::string& a, const std::string& b);

struct Metrics {
  double word_accuracy = 0.0;
  double mean_edit_distance = 0.0;  // Levenshtein / max(len), 0 for two empty strings
  std::size_t count = 0;
};

Metrics compute_metrics(const std::vector<std::string>& predictions, const std::vector<std::string>& references);

}  // namespace cstr
