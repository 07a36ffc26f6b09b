#include "cstr/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "cstr/params.hpp"

namespace cstr {

namespace {

using Bitmap = std::array<const char*, 7>;

const std::map<char, Bitmap>& font() {
  static const std::map<char, Bitmap> f = {
      {'0', {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "}},
      {'1', {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
      {'2', {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"}},
      {'3', {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "}},
      {'4', {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "}},
      {'5', {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "}},
      {'6', {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "}},
      {'7', {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "}},
      {'8', {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "}},
      {'9', {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "}},
      {'a', {" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
      {'b', {"#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "}},
      {'c', {" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "}},
      {'d', {"###  ", "#  # ", "#   #", "#   #", "#   #", "#  # ", "###  "}},
      {'e', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"}},
      {'f', {"#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "}},
      {'g', {" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ####"}},
      {'h', {"#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"}},
      {'i', {" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "}},
      {'j', {"  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "}},
      {'k', {"#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"}},
      {'l', {"#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"}},
      {'m', {"#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"}},
      {'n', {"#   #", "#   #", "##  #", "# # #", "#  ##", "#   #", "#   #"}},
      {'o', {" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
      {'p', {"#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "}},
      {'q', {" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"}},
      {'r', {"#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"}},
      {'s', {" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "}},
      {'t', {"#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "}},
      {'u', {"#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "}},
      {'v', {"#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "}},
      {'w', {"#   #", "#   #", "#   #", "# # #", "# # #", "# # #", " # # "}},
      {'x', {"#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"}},
      {'y', {"#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "}},
      {'z', {"#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"}},
  };
  return f;
}

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;
constexpr int kAdvance = 6;  // glyph + one blank column
constexpr int kSuper = 4;    // supersamples per axis for coverage

const char* const kBuiltinWords[] = {
    "cat",    "dog",    "sun",    "tree",   "house",  "river",  "stone",  "light",  "green",  "paper",
    "music",  "table",  "water",  "bread",  "train",  "cloud",  "north",  "south",  "plane",  "glass",
    "chair",  "smile",  "dream",  "night",  "storm",  "field",  "clock",  "apple",  "grape",  "lemon",
    "tiger",  "zebra",  "whale",  "eagle",  "horse",  "mouse",  "snake",  "robot",  "pixel",  "vector",
    "matrix", "kernel", "signal", "camera", "window", "garden", "market", "bridge", "castle", "forest",
    "island", "planet", "rocket", "silver", "winter", "summer", "spring", "yellow", "orange", "purple",
    "coffee", "letter", "bottle", "street", "hello",  "world",  "text",   "open",   "shop",   "exit",
    "route66", "zone51", "42nd",  "7eleven", "b2b",   "mp3",    "4x4",    "area9",  "tv2",    "go4it",
};

void write_file_checked(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t split_stream(const std::string& split) { return split == "train" ? 1 : 2; }

}  // namespace

const Bitmap& glyph(char c) {
  const auto it = font().find(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (it == font().end()) throw std::invalid_argument("no glyph for character '" + std::string(1, c) + "'");
  return it->second;
}

Sample render_word(const std::string& word, int height, int width, std::uint64_t seed) {
  if (word.empty()) throw std::invalid_argument("render_word: empty word");
  std::vector<const Bitmap*> glyphs;
  for (char c : word) glyphs.push_back(&glyph(c));

  const int len = static_cast<int>(word.size());
  const double s_max = std::min((height - 1.0) / kGlyphH, static_cast<double>(width) / (kAdvance * len - 1));
  if (s_max < 0.8) {
    throw std::invalid_argument("render_word: '" + word + "' does not fit a " + std::to_string(height) + "x" +
                                std::to_string(width) + " canvas");
  }
  const double s_min = std::min(s_max, std::max(0.8, 0.75 * s_max));

  Rng rng(seed);
  const double scale = rng.uniform(s_min, s_max);
  const double text_w = (kAdvance * len - 1) * scale;
  const double text_h = kGlyphH * scale;
  const double ox = rng.uniform(0.0, width - text_w);
  const double oy = rng.uniform(0.0, height - text_h);
  const double contrast = rng.uniform(0.5, 0.9);
  double bg = rng.uniform(0.0, 1.0 - contrast);
  double fg = bg + contrast;
  if (rng.uniform() < 0.5) std::swap(bg, fg);

  Tensor img({1, height, width}, Precision::f32);
  auto px = img.mutable_data<float>();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int ink = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        const double gy = (y + (sy + 0.5) / kSuper - oy) / scale;
        if (gy < 0.0 || gy >= kGlyphH) continue;
        for (int sx = 0; sx < kSuper; ++sx) {
          const double gx = (x + (sx + 0.5) / kSuper - ox) / scale;
          if (gx < 0.0) continue;
          const int cell = static_cast<int>(gx) / kAdvance;
          const int col = static_cast<int>(gx) - cell * kAdvance;
          if (cell >= len || col >= kGlyphW) continue;
          ink += (*glyphs[static_cast<std::size_t>(cell)])[static_cast<int>(gy)][col] == '#';
        }
      }
      const double cov = static_cast<double>(ink) / (kSuper * kSuper);
      px[static_cast<std::size_t>(y * width + x)] = static_cast<float>(bg + (fg - bg) * cov);
    }
  }
  std::string label = word;
  for (auto& c : label) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return {img, label, seed};
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.blur_lengths = {1};
  c.noise_sigma_max = 0.0;
  c.brightness = 0.0;
  c.contrast = 0.0;
  return c;
}

Tensor motion_blur(const Tensor& image, int length, int angle_deg) {
  if (length < 1) throw std::invalid_argument("motion_blur: length must be >= 1");
  require_rank(image, 3, "motion_blur");
  if (length == 1) return image;
  const auto h = image.dim(1), w = image.dim(2);
  const double rad = angle_deg * 3.14159265358979323846 / 180.0;
  std::vector<std::pair<int, int>> taps;
  for (int i = 0; i < length; ++i) {
    const double t = i - (length - 1) / 2.0;
    taps.emplace_back(static_cast<int>(std::lround(-t * std::sin(rad))), static_cast<int>(std::lround(t * std::cos(rad))));
  }
  const auto src = image.to_vector();
  Tensor out(image.shape(), Precision::f32);
  auto dst = out.mutable_data<float>();
  const double wgt = 1.0 / length;
  for (std::int64_t c = 0; c < image.dim(0); ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (const auto& [dy, dx] : taps) {
          const auto yy = std::clamp<std::int64_t>(y + dy, 0, h - 1);
          const auto xx = std::clamp<std::int64_t>(x + dx, 0, w - 1);
          acc += src[static_cast<std::size_t>((c * h + yy) * w + xx)];
        }
        dst[static_cast<std::size_t>((c * h + y) * w + x)] = static_cast<float>(acc * wgt);
      }
    }
  }
  return out;
}

Sample augment(const Sample& sample, const AugmentConfig& config, std::uint64_t seed) {
  if (config.blur_lengths.empty() || config.blur_angles.empty()) {
    throw std::invalid_argument("augment: blur length and angle sets must be non-empty");
  }
  if (config.noise_sigma_max < 0.0) throw std::invalid_argument("augment: noise sigma must be >= 0");
  Rng rng(seed);
  Tensor img = sample.image.to(Precision::f32);

  if (rng.uniform() < config.probability) {
    const int len = config.blur_lengths[rng.below(config.blur_lengths.size())];
    const int ang = config.blur_angles[rng.below(config.blur_angles.size())];
    img = motion_blur(img, len, ang);
  }
  auto px = img.mutable_data<float>();
  if (rng.uniform() < config.probability) {
    const double sigma = rng.uniform(0.0, config.noise_sigma_max);
    for (auto& p : px) p = static_cast<float>(p + sigma * rng.normal());
  }
  if (rng.uniform() < config.probability) {
    const double db = rng.uniform(-config.brightness, config.brightness);
    const double dc = rng.uniform(-config.contrast, config.contrast);
    for (auto& p : px) p = static_cast<float>(p * (1.0 + dc) + db);
  }
  for (auto& p : px) p = std::clamp(p, 0.0f, 1.0f);
  return {img, sample.label, sample.seed};
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("write_pgm: expected 1 x H x W, got " + to_string(image.shape()));
  const auto h = image.dim(1), w = image.dim(2);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : image.to_vector()) {
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  write_file_checked(path, bytes);
}

Tensor read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> void {
    throw std::runtime_error("'" + path.string() + "' is not a valid 8-bit P5 PGM: " + why);
  };
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") fail("bad magic");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail("bad header");
  }
  if (w < 1 || h < 1 || maxval != 255) fail("unsupported dimensions or maxval");
  ++pos;  // single whitespace before the raster
  if (bytes.size() - pos < static_cast<std::size_t>(w) * h) fail("truncated raster");
  Tensor img({1, h, w}, Precision::f32);
  auto px = img.mutable_data<float>();
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i]) / 255.0);
  }
  return img;
}

std::vector<std::string> default_lexicon(std::size_t count, int k) {
  std::vector<std::string> out;
  for (const char* w : kBuiltinWords) {
    const std::string word(w);
    const auto enc = Alphabet().encode(word);
    if (ctc_min_frames(enc) <= k && static_cast<int>(word.size()) <= k) out.push_back(word);
    if (out.size() == count) return out;
  }
  throw std::invalid_argument("built-in lexicon has only " + std::to_string(out.size()) + " words fitting k=" +
                              std::to_string(k));
}

std::vector<std::string> read_lexicon(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::vector<ManifestEntry> build_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  if (spec.lexicon.empty()) throw std::invalid_argument("build_dataset: empty lexicon");
  if (spec.n_train < 0 || spec.n_eval < 0) throw std::invalid_argument("build_dataset: negative sample count");
  const Alphabet alphabet;
  for (const auto& w : spec.lexicon) {
    if (w.empty() || !alphabet.valid(w)) throw std::invalid_argument("build_dataset: invalid lexicon word '" + w + "'");
  }
  std::error_code ec;
  for (const char* sub : {"train", "eval"}) {
    std::filesystem::create_directories(dir / sub, ec);
    if (ec) throw std::runtime_error("cannot create '" + (dir / sub).string() + "': " + ec.message());
  }

  std::vector<ManifestEntry> manifest;
  for (const std::string split : {"train", "eval"}) {
    const int n = split == "train" ? spec.n_train : spec.n_eval;
    const std::uint64_t stream = mix_seed(spec.seed, split_stream(split));
    for (int i = 0; i < n; ++i) {
      const std::uint64_t seed = mix_seed(stream, static_cast<std::uint64_t>(i));
      Rng pick(seed);
      const std::string& word = spec.lexicon[pick.below(spec.lexicon.size())];
      Sample s = render_word(word, spec.height, spec.width, mix_seed(seed, 1));
      if (split == "eval" && spec.eval_noise > 0.0) {
        Rng noise(mix_seed(seed, 2));
        auto px = s.image.mutable_data<float>();
        for (auto& p : px) p = std::clamp(static_cast<float>(p + spec.eval_noise * noise.normal()), 0.0f, 1.0f);
      }
      std::ostringstream name;
      name << split << "/" << std::setw(6) << std::setfill('0') << i << ".pgm";
      write_pgm(dir / name.str(), s.image);
      manifest.push_back({name.str(), s.label, split, seed});
    }
  }

  std::ostringstream tsv;
  tsv << "relative_path\tlabel\tsplit\tseed\n";
  for (const auto& e : manifest) tsv << e.path << '\t' << e.label << '\t' << e.split << '\t' << e.seed << '\n';
  write_file_checked(dir / "manifest.tsv", tsv.str());
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.tsv";
  std::istringstream in(read_file(path));
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("relative_path", 0) == 0) continue;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string seed;
    if (!std::getline(ls, e.path, '\t') || !std::getline(ls, e.label, '\t') || !std::getline(ls, e.split, '\t') ||
        !std::getline(ls, seed) || (e.split != "train" && e.split != "eval")) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed manifest row");
    }
    try {
      e.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad seed '" + seed + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.dir = dir;
  const Alphabet alphabet;
  for (auto& e : read_manifest(dir)) {
    if (e.label.empty() || !alphabet.valid(e.label)) {
      throw std::runtime_error("manifest label '" + e.label + "' is not decodable");
    }
    Tensor img = read_pgm(dir / e.path);
    if (ds.height == 0) {
      ds.height = static_cast<int>(img.dim(1));
      ds.width = static_cast<int>(img.dim(2));
    } else if (img.dim(1) != ds.height || img.dim(2) != ds.width) {
      throw std::runtime_error("'" + (dir / e.path).string() + "' has size " + to_string(img.shape()) +
                               ", expected 1x" + std::to_string(ds.height) + "x" + std::to_string(ds.width));
    }
    if (e.split == "train") {
      ds.train_entries.push_back(std::move(e));
      ds.train_images.push_back(std::move(img));
    } else {
      ds.eval_entries.push_back(std::move(e));
      ds.eval_images.push_back(std::move(img));
    }
  }
  ds.digest = dataset_digest(dir);
  return ds;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t dataset_digest(const std::filesystem::path& dir) {
  const std::string manifest = read_file(dir / "manifest.tsv");
  std::uint64_t h = fnv1a(manifest.data(), manifest.size());
  for (const auto& e : read_manifest(dir)) {
    const std::string bytes = read_file(dir / e.path);
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return h;
}

}  // namespace cstr
