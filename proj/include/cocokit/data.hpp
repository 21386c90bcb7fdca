#pragma once

// Datasets on disk and in memory, the synthetic fine-grained generator,
// stratified folds and accuracy reports.
//
// On-disk image (".ckim"): the 4 bytes "CKIM", then u16 little-endian
// height, width, channels, then height*width*channels u8 intensities in
// (y, x, c) order. Pixel value v maps to v / 255.
//
// Manifest CSV: optional "#classes=name0;name1;..." line, optional
// "relative_path,label" header, then one "path,label" row per image with
// paths relative to the manifest and integer labels in [0, classes).
//
// Feature CSV: optional header starting with "label", then rows
// "label,f1,...,fd".

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cocokit/crc.hpp"
#include "cocokit/error.hpp"
#include "cocokit/image.hpp"

namespace cocokit {

struct LabeledImageSet {
  std::vector<Image> images;
  std::vector<ClassId> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  std::vector<std::size_t> class_sizes() const {
    std::vector<std::size_t> sizes(class_names.size(), 0);
    for (ClassId c : labels) ++sizes.at(static_cast<std::size_t>(c));
    return sizes;
  }

  void validate() const {
    detail::require(images.size() == labels.size(), "dataset: image and label counts differ");
    detail::require(!images.empty(), "dataset: no samples");
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Image& im = images[i];
      detail::require(im.same_shape(images.front()), "dataset: images have different dimensions");
      detail::require(im.pixels.size() == static_cast<std::size_t>(im.height) * im.width * im.channels,
                      "dataset: pixel buffer size mismatch");
      detail::require(labels[i] >= 0 && labels[i] < num_classes(), "dataset: label out of range");
    }
  }

  LabeledImageSet subset(std::span<const std::size_t> indices) const {
    LabeledImageSet out;
    out.class_names = class_names;
    out.images.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Bilinear resampling with pixel centres aligned; identity for equal sizes.
inline Image resize_bilinear(const Image& in, int height, int width) {
  detail::require(height > 0 && width > 0, "resize: target must be non-empty");
  if (in.height == height && in.width == width) return in;
  Image out{height, width, in.channels, std::vector<double>(static_cast<std::size_t>(height) * width * in.channels)};
  const double sy = static_cast<double>(in.height) / height, sx = static_cast<double>(in.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, in.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, in.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, in.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, in.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < in.channels; ++c) {
        const double top = in.at(y0, x0, c) * (1 - tx) + in.at(y0, x1, c) * tx;
        const double bottom = in.at(y1, x0, c) * (1 - tx) + in.at(y1, x1, c) * tx;
        out.at(y, x, c) = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic fine-grained data

struct SynthConfig {
  int classes = 8;
  int per_class = 100;
  int image_size = 32;
  int channels = 3;
  int background_textures = 6;
  int glyph_size = 7;
  double glyph_contrast = 0.5;
  int jitter = 6;          // max glyph offset from the centre, pixels
  double flip_fraction = 0.3;  // share of glyph cells each class flips
  double noise = 0.03;
  bool long_tail = false;
  double tail_decay = 0.75;
  std::uint64_t seed = 1;
};

/// Class sizes: per_class each, or per_class * decay^c (at least 5) with a long tail.
inline std::vector<int> synth_class_sizes(const SynthConfig& cfg) {
  std::vector<int> sizes(static_cast<std::size_t>(cfg.classes), cfg.per_class);
  if (cfg.long_tail)
    for (int c = 0; c < cfg.classes; ++c)
      sizes[c] = std::max(5, static_cast<int>(std::lround(cfg.per_class * std::pow(cfg.tail_decay, c))));
  return sizes;
}

/// Every image is a crop of one of a few shared background textures plus a
/// small low-contrast glyph near the centre. All classes share a base glyph
/// and differ only in a few flipped cells, so the discriminative signal is a
/// small fraction of the image energy.
inline LabeledImageSet synth_finegrained(const SynthConfig& cfg) {
  detail::require(cfg.classes >= 2, "synth: need at least 2 classes");
  detail::require(cfg.per_class >= 1, "synth: per_class must be >= 1");
  detail::require(cfg.image_size >= 2 && cfg.channels >= 1, "synth: bad image dimensions");
  detail::require(cfg.background_textures >= 1, "synth: need at least one background texture");
  detail::require(cfg.glyph_size >= 1 && cfg.jitter >= 0, "synth: bad glyph geometry");
  detail::require(cfg.glyph_size + 2 * cfg.jitter <= cfg.image_size, "synth: glyph (with jitter) larger than image");
  detail::require(cfg.glyph_contrast >= 0.0, "synth: contrast must be >= 0");

  const int s = cfg.image_size, g = cfg.glyph_size, ch = cfg.channels;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Textures are 2s x 2s sums of random gratings, rescaled to [0.15, 0.85].
  const int t = 2 * s;
  std::vector<std::vector<double>> textures(static_cast<std::size_t>(cfg.background_textures));
  for (auto& tex : textures) {
    tex.assign(static_cast<std::size_t>(t) * t * ch, 0.0);
    for (int c = 0; c < ch; ++c) {
      for (int wave = 0; wave < 6; ++wave) {
        const double freq = (1.0 + 5.0 * unit(rng)) * 2.0 * std::numbers::pi / s;
        const double angle = unit(rng) * std::numbers::pi;
        const double phase = unit(rng) * 2.0 * std::numbers::pi;
        const double amp = 0.5 + unit(rng);
        const double kx = freq * std::cos(angle), ky = freq * std::sin(angle);
        for (int y = 0; y < t; ++y)
          for (int x = 0; x < t; ++x) tex[(static_cast<std::size_t>(y) * t + x) * ch + c] += amp * std::sin(kx * x + ky * y + phase);
      }
    }
    const auto [lo, hi] = std::minmax_element(tex.begin(), tex.end());
    const double lo_v = *lo, span = std::max(*hi - *lo, 1e-12);
    for (double& v : tex) v = 0.15 + 0.7 * (v - lo_v) / span;
  }

  std::vector<double> base(static_cast<std::size_t>(g) * g);
  for (double& v : base) v = unit(rng) < 0.5 ? -1.0 : 1.0;
  std::vector<double> tint(static_cast<std::size_t>(ch));
  for (double& v : tint) v = 0.6 + 0.4 * unit(rng);
  std::vector<std::vector<double>> glyphs(static_cast<std::size_t>(cfg.classes), base);
  for (auto& glyph : glyphs)
    for (double& v : glyph)
      if (unit(rng) < cfg.flip_fraction) v = -v;

  LabeledImageSet out;
  for (int c = 0; c < cfg.classes; ++c) out.class_names.push_back("class_" + std::to_string(c));
  const auto sizes = synth_class_sizes(cfg);
  std::uniform_int_distribution<int> pick_texture(0, cfg.background_textures - 1);
  std::uniform_int_distribution<int> offset(0, s - 1);
  std::uniform_int_distribution<int> shift(-cfg.jitter, cfg.jitter);
  const int centre = (s - g) / 2;
  for (int c = 0; c < cfg.classes; ++c) {
    for (int k = 0; k < sizes[c]; ++k) {
      const auto& tex = textures[pick_texture(rng)];
      const int oy = offset(rng), ox = offset(rng);
      const double brightness = 0.2 * (unit(rng) - 0.5);
      const int gy = centre + shift(rng), gx = centre + shift(rng);
      Image im{s, s, ch, std::vector<double>(static_cast<std::size_t>(s) * s * ch)};
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          for (int cc = 0; cc < ch; ++cc) {
            double v = tex[(static_cast<std::size_t>(y + oy) * t + (x + ox)) * ch + cc] + brightness;
            const int py = y - gy, px = x - gx;
            if (py >= 0 && py < g && px >= 0 && px < g) v += cfg.glyph_contrast * tint[cc] * glyphs[c][py * g + px];
            v += cfg.noise * gauss(rng);
            im.at(y, x, cc) = quantize(v) / 255.0;
          }
      out.images.push_back(std::move(im));
      out.labels.push_back(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

inline std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(a, b - a + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && !s.empty();
}

// strtod accepts the exponent forms written by operator<<.
inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

}  // namespace detail

inline void write_image(const std::filesystem::path& path, const Image& im) {
  detail::require(im.height > 0 && im.height <= 65535 && im.width > 0 && im.width <= 65535 && im.channels > 0 &&
                      im.channels <= 65535,
                  "write_image: dimensions out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("CKIM", 4);
  detail::put_u16(out, static_cast<std::uint16_t>(im.height));
  detail::put_u16(out, static_cast<std::uint16_t>(im.width));
  detail::put_u16(out, static_cast<std::uint16_t>(im.channels));
  std::vector<char> bytes(im.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(quantize(im.pixels[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != "CKIM") throw IoError(path.string() + ": bad image header");
  Image im;
  im.height = detail::get_u16(in);
  im.width = detail::get_u16(in);
  im.channels = detail::get_u16(in);
  if (!in || im.height == 0 || im.width == 0 || im.channels == 0) throw IoError(path.string() + ": bad image header");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(im.height) * im.width * im.channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after pixel data");
  im.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) im.pixels[i] = bytes[i] / 255.0;
  return im;
}

/// Writes `dir/manifest.csv` and `dir/images/NNNNN.ckim`; returns the manifest path.
inline std::filesystem::path save_dataset(const LabeledImageSet& set, const std::filesystem::path& dir) {
  set.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  const auto manifest = dir / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << "#classes=";
  for (std::size_t c = 0; c < set.class_names.size(); ++c) out << (c ? ";" : "") << set.class_names[c];
  out << "\nrelative_path,label\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(5) << std::setfill('0') << i << ".ckim";
    write_image(dir / name.str(), set.images[i]);
    out << name.str() << ',' << set.labels[i] << '\n';
  }
  if (!out) throw IoError("write failed for " + manifest.string());
  return manifest;
}

inline LabeledImageSet load_dataset(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  const auto root = manifest.parent_path();
  LabeledImageSet set;
  int declared = -1;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw IoError(manifest.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.rfind("#classes=", 0) == 0) {
      set.class_names = detail::split(t.substr(9), ';');
      declared = static_cast<int>(set.class_names.size());
      continue;
    }
    if (t[0] == '#') continue;
    if (t == "relative_path,label") continue;
    const auto fields = detail::split(t, ',');
    if (fields.size() != 2 || fields[0].empty()) fail("expected 'relative_path,label'");
    int label = -1;
    if (!detail::parse_number(fields[1], label)) fail("label is not an integer: '" + fields[1] + "'");
    if (label < 0 || (declared >= 0 && label >= declared)) fail("unknown label " + fields[1]);
    Image im;
    try {
      im = read_image(root / fields[0]);
    } catch (const IoError& e) {
      fail(e.what());
    }
    if (!set.images.empty() && !im.same_shape(set.images.front())) fail("image dimensions differ from the first image");
    set.images.push_back(std::move(im));
    set.labels.push_back(label);
  }
  if (set.images.empty()) throw IoError(manifest.string() + ": no samples");
  if (declared < 0) {
    const int classes = *std::max_element(set.labels.begin(), set.labels.end()) + 1;
    for (int c = 0; c < classes; ++c) set.class_names.push_back("class_" + std::to_string(c));
  }
  return set;
}

inline void save_feature_csv(const LabeledFeatures& lf, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "label";
  for (Eigen::Index i = 0; i < lf.features.rows(); ++i) out << ",f" << i + 1;
  out << '\n' << std::setprecision(17);
  for (Eigen::Index j = 0; j < lf.features.cols(); ++j) {
    out << lf.labels[j];
    for (Eigen::Index i = 0; i < lf.features.rows(); ++i) out << ',' << lf.features(i, j);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline LabeledFeatures load_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::vector<ClassId> labels;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.rfind("label", 0) == 0) continue;
    const auto fields = detail::split(t, ',');
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (fields.size() < 2) throw IoError(where + "expected 'label,f1,...,fd'");
    int label = -1;
    if (!detail::parse_number(fields[0], label) || label < 0) throw IoError(where + "bad label '" + fields[0] + "'");
    std::vector<double> row(fields.size() - 1);
    for (std::size_t i = 1; i < fields.size(); ++i)
      if (!detail::parse_double(fields[i], row[i - 1])) throw IoError(where + "bad value '" + fields[i] + "'");
    if (!rows.empty() && row.size() != rows.front().size()) throw IoError(where + "inconsistent feature dimension");
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  if (rows.empty()) throw IoError(path.string() + ": no samples");
  LabeledFeatures lf{Mat(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size())),
                     std::move(labels)};
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < rows[j].size(); ++i) lf.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
  return lf;
}

// ---------------------------------------------------------------------------
// Folds and reports

/// Test-index sets of k stratified folds. Each class is shuffled and dealt
/// round-robin, continuing where the previous class stopped, so per-class
/// and total fold sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const ClassId> labels, int k,
                                                              std::uint64_t seed) {
  detail::require(k >= 1, "stratified_kfold: k must be >= 1");
  detail::require(!labels.empty(), "stratified_kfold: no samples");
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
  std::mt19937_64 rng(seed);
  std::size_t next = 0;
  for (auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k)
      throw InvalidArgument("stratified_kfold: class " + std::to_string(label) + " has fewer than k samples");
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t idx : members) folds[next++ % k].push_back(idx);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

/// Indices in [0, n) that are not in `held_out` (which must be sorted).
inline std::vector<std::size_t> complement(std::size_t n, std::span<const std::size_t> held_out) {
  std::vector<std::size_t> out;
  out.reserve(n - held_out.size());
  std::size_t h = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (h < held_out.size() && held_out[h] == i) {
      ++h;
      continue;
    }
    out.push_back(i);
  }
  return out;
}

struct EvalReport {
  std::vector<double> folds;  // accuracy per fold, percent
  double mean = 0.0;
  double std = 0.0;           // sample standard deviation
  std::string config_hash;
};

inline double evaluate(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  return accuracy_percent(predicted, truth);
}

inline EvalReport aggregate(std::vector<double> folds, std::string config_hash = {}) {
  detail::require(!folds.empty(), "aggregate: no folds");
  EvalReport r;
  r.folds = std::move(folds);
  r.mean = std::accumulate(r.folds.begin(), r.folds.end(), 0.0) / static_cast<double>(r.folds.size());
  if (r.folds.size() > 1) {
    double ss = 0.0;
    for (double f : r.folds) ss += (f - r.mean) * (f - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(r.folds.size() - 1));
  }
  r.config_hash = std::move(config_hash);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return nlohmann::json{{"folds", r.folds}, {"mean", r.mean}, {"std", r.std}, {"config_hash", r.config_hash}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.folds = j.at("folds").get<std::vector<double>>();
  r.mean = j.at("mean").get<double>();
  r.std = j.at("std").get<double>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fingerprint(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

}  // namespace cocokit
