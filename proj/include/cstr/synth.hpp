#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cstr/losses.hpp"
#include "cstr/tensor.hpp"

namespace cstr {

struct Sample {
  Tensor image;  // 1 x H x W, values in [0, 1], f32
  std::string label;
  std::uint64_t seed = 0;
};

// Rasterizes `word` with the built-in 5x7 glyphs. Scale, position and the two
// gray levels are drawn from Rng(seed). Throws std::invalid_argument if the
// word is empty, has characters outside [0-9a-zA-Z], or cannot fit.
Sample render_word(const std::string& word, int height, int width, std::uint64_t seed);

// Row-major 5x7 bitmap for a character, '#' = ink; throws for unknown characters.
const std::array<const char*, 7>& glyph(char c);

struct AugmentConfig {
  double probability = 0.5;  // applied independently per op
  std::vector<int> blur_lengths{1, 3, 5};
  std::vector<int> blur_angles{0, 45, 90, 135};
  double noise_sigma_max = 0.05;  // sigma ~ U[0, max]
  double brightness = 0.2;        // delta_b ~ U[-b, b]
  double contrast = 0.2;          // delta_c ~ U[-c, c]

  static AugmentConfig identity();
};

// Motion blur -> gaussian noise -> brightness/contrast jitter -> clamp to [0, 1].
Sample augment(const Sample& sample, const AugmentConfig& config, std::uint64_t seed);

// Normalized box kernel along `angle_deg`, sampled on the pixel grid, applied
// with clamp-to-edge borders. length 1 is the identity.
Tensor motion_blur(const Tensor& image, int length, int angle_deg);

// Binary 8-bit PGM. Values are rounded from [0, 1] to [0, 255].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

struct DatasetSpec {
  std::vector<std::string> lexicon;
  int n_train = 2000;
  int n_eval = 500;
  int height = 16;
  int width = 64;
  std::uint64_t seed = 0;
  double eval_noise = 0.0;  // sigma of gaussian noise baked into eval images
};

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  std::string label;
  std::string split;  // "train" or "eval"
  std::uint64_t seed = 0;
};

// Built-in lexicon words that fit k positions for both CE and CTC.
std::vector<std::string> default_lexicon(std::size_t count, int k = 8);
// One word per line; blank lines and lines starting with '#' are skipped.
std::vector<std::string> read_lexicon(const std::filesystem::path& path);

// Writes <dir>/manifest.tsv and <dir>/{train,eval}/NNNNNN.pgm.
std::vector<ManifestEntry> build_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

struct Dataset {
  std::filesystem::path dir;
  int height = 0;
  int width = 0;
  std::vector<ManifestEntry> train_entries, eval_entries;
  std::vector<Tensor> train_images, eval_images;  // each 1 x H x W
  std::uint64_t digest = 0;
};

// Loads every image; throws std::runtime_error naming the offending file.
Dataset load_dataset(const std::filesystem::path& dir);

// FNV-1a over manifest.tsv and every referenced image file.
std::uint64_t dataset_digest(const std::filesystem::path& dir);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace cstr
