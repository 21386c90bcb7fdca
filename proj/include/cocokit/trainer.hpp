#pragma once

// Training modes built on the feature network:
//
//   softmax_baseline  feature net + softmax head, cross-entropy
//   cascade_crc       softmax training, then CRC on frozen features
//   cascade_procrc    softmax training, then ProCRC on frozen features
//   coconet           softmax training, then the collaborative head drives
//                     fine-tuning of the feature net; CRC at test time
//
// Every mode starts with the same softmax phase, so a single softmax run can
// be shared (see train_modes).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cocokit/collab_head.hpp"
#include "cocokit/crc.hpp"
#include "cocokit/data.hpp"
#include "cocokit/featnet.hpp"
#include "cocokit/procrc.hpp"

namespace cocokit {

enum class TrainMode { kSoftmax, kCascadeCrc, kCascadeProcrc, kCoconet };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kSoftmax: return "softmax_baseline";
    case TrainMode::kCascadeCrc: return "cascade_crc";
    case TrainMode::kCascadeProcrc: return "cascade_procrc";
    case TrainMode::kCoconet: return "coconet";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "softmax_baseline" || s == "softmax") return TrainMode::kSoftmax;
  if (s == "cascade_crc") return TrainMode::kCascadeCrc;
  if (s == "cascade_procrc") return TrainMode::kCascadeProcrc;
  if (s == "coconet") return TrainMode::kCoconet;
  throw InvalidArgument("unknown mode '" + s + "'");
}

inline constexpr int kEpochCap = 1000;

struct TrainConfig {
  TrainMode mode = TrainMode::kCoconet;
  double lr_initial = 1e-3;
  double lr_reduced = 1e-4;
  int max_epochs = kEpochCap;      // per phase
  int softmax_epochs = kEpochCap;  // shared first phase
  int collab_epochs = kEpochCap;   // coconet fine-tuning phase
  int plateau_window = 10;
  double plateau_tolerance = 1e-4;
  double lambda = 1.0;
  double gamma = 0.0;
  double procrc_gamma = 1e-2;
  bool tune_lambda = true;
  double partition_fraction = 0.5;
  std::uint64_t seed = 1;
  bool enable_grad_Y = false;
  int batch_size = 32;
  int feature_dim = 64;
  int image_size = 128;
  double eta_W = 1e-3;
  double eta_A = 1e-3;
  ResidualWeighting weighting = ResidualWeighting::kMixed;
  int fast_threshold = 512;
  double divergence_factor = 1e3;

  /// 32x32 inputs and short phases, sized for a laptop.
  static TrainConfig desk() {
    TrainConfig c;
    c.image_size = 32;
    c.softmax_epochs = 40;
    c.collab_epochs = 20;
    c.max_epochs = 100;
    return c;
  }

  void validate() const {
    auto req = [](bool ok, const std::string& what) {
      if (!ok) throw InvalidArgument("config: " + what);
    };
    req(lr_initial > 0.0 && lr_reduced > 0.0 && lr_reduced < lr_initial, "need 0 < lr_reduced < lr_initial");
    req(max_epochs >= 1 && max_epochs <= kEpochCap, "max_epochs must be in [1, 1000]");
    req(softmax_epochs >= 0 && softmax_epochs <= max_epochs, "softmax_epochs must be in [0, max_epochs]");
    req(collab_epochs >= 0 && collab_epochs <= max_epochs, "collab_epochs must be in [0, max_epochs]");
    req(plateau_window >= 1, "plateau_window must be >= 1");
    req(plateau_tolerance >= 0.0, "plateau_tolerance must be >= 0");
    req(lambda > 0.0 && std::isfinite(lambda), "lambda must be > 0");
    req(gamma >= 0.0 && std::isfinite(gamma), "gamma must be >= 0");
    req(procrc_gamma >= 0.0 && std::isfinite(procrc_gamma), "procrc_gamma must be >= 0");
    req(partition_fraction > 0.0 && partition_fraction < 1.0, "partition_fraction must be in (0, 1)");
    req(batch_size >= 1, "batch_size must be >= 1");
    req(feature_dim >= 1, "feature_dim must be >= 1");
    req(image_size >= 4 && image_size % 4 == 0, "image_size must be a positive multiple of 4");
    req(eta_W > 0.0 && eta_A > 0.0, "eta_W and eta_A must be > 0");
    req(fast_threshold >= 1, "fast_threshold must be >= 1");
    req(divergence_factor > 1.0, "divergence_factor must be > 1");
  }

  /// key=value lines in a fixed order; parse(serialize()) round-trips exactly.
  std::string serialize() const {
    std::ostringstream out;
    for (const auto& [key, value] : entries()) out << key << '=' << value << '\n';
    return out.str();
  }

  /// Applies one key=value setting.
  void set(const std::string& key, const std::string& value) {
    auto as_double = [&] {
      double v;
      if (!detail::parse_double(value, v)) throw InvalidArgument("config: " + key + ": not a number: '" + value + "'");
      return v;
    };
    auto as_int = [&] {
      long long v;
      if (!detail::parse_number(value, v) || v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw InvalidArgument("config: " + key + ": not an integer: '" + value + "'");
      return static_cast<int>(v);
    };
    auto as_bool = [&] {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw InvalidArgument("config: " + key + ": expected true or false");
    };
    if (key == "mode") mode = parse_mode(value);
    else if (key == "lr_initial") lr_initial = as_double();
    else if (key == "lr_reduced") lr_reduced = as_double();
    else if (key == "max_epochs") max_epochs = as_int();
    else if (key == "softmax_epochs") softmax_epochs = as_int();
    else if (key == "collab_epochs") collab_epochs = as_int();
    else if (key == "plateau_window") plateau_window = as_int();
    else if (key == "plateau_tolerance") plateau_tolerance = as_double();
    else if (key == "lambda") lambda = as_double();
    else if (key == "gamma") gamma = as_double();
    else if (key == "procrc_gamma") procrc_gamma = as_double();
    else if (key == "tune_lambda") tune_lambda = as_bool();
    else if (key == "partition_fraction") partition_fraction = as_double();
    else if (key == "seed") {
      if (!detail::parse_number(value, seed)) throw InvalidArgument("config: seed: not an unsigned integer");
    } else if (key == "enable_grad_Y") enable_grad_Y = as_bool();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "feature_dim") feature_dim = as_int();
    else if (key == "image_size") image_size = as_int();
    else if (key == "eta_W") eta_W = as_double();
    else if (key == "eta_A") eta_A = as_double();
    else if (key == "weighting") {
      if (value == "mixed") weighting = ResidualWeighting::kMixed;
      else if (value == "per_column") weighting = ResidualWeighting::kPerColumn;
      else throw InvalidArgument("config: weighting must be mixed or per_column");
    } else if (key == "fast_threshold") fast_threshold = as_int();
    else if (key == "divergence_factor") divergence_factor = as_double();
    else throw InvalidArgument("config: unknown key '" + key + "'");
  }

  /// Reads key=value lines over the current values. Blank lines and lines
  /// starting with '#' are skipped.
  void merge(std::istream& in, const std::string& source = "config") {
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      const std::string where = source + ":" + std::to_string(line_no) + ": ";
      if (eq == std::string::npos) throw InvalidArgument(where + "expected key=value");
      try {
        set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
      } catch (const InvalidArgument& e) {
        throw InvalidArgument(where + e.what());
      }
    }
  }

  static TrainConfig parse(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    base.merge(in);
    return base;
  }

  static TrainConfig parse(const std::string& text) { return parse(text, TrainConfig()); }

  std::string fingerprint() const { return cocokit::fingerprint(serialize()); }

 private:
  static std::string num(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  }

  std::vector<std::pair<std::string, std::string>> entries() const {
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {
        {"mode", to_string(mode)},
        {"lr_initial", num(lr_initial)},
        {"lr_reduced", num(lr_reduced)},
        {"max_epochs", std::to_string(max_epochs)},
        {"softmax_epochs", std::to_string(softmax_epochs)},
        {"collab_epochs", std::to_string(collab_epochs)},
        {"plateau_window", std::to_string(plateau_window)},
        {"plateau_tolerance", num(plateau_tolerance)},
        {"lambda", num(lambda)},
        {"gamma", num(gamma)},
        {"procrc_gamma", num(procrc_gamma)},
        {"tune_lambda", b(tune_lambda)},
        {"partition_fraction", num(partition_fraction)},
        {"seed", std::to_string(seed)},
        {"enable_grad_Y", b(enable_grad_Y)},
        {"batch_size", std::to_string(batch_size)},
        {"feature_dim", std::to_string(feature_dim)},
        {"image_size", std::to_string(image_size)},
        {"eta_W", num(eta_W)},
        {"eta_A", num(eta_A)},
        {"weighting", weighting == ResidualWeighting::kMixed ? "mixed" : "per_column"},
        {"fast_threshold", std::to_string(fast_threshold)},
        {"divergence_factor", num(divergence_factor)},
    };
  }
};

// ---------------------------------------------------------------------------
// Partitions and schedule

struct PartitionIndices {
  std::vector<std::size_t> p1;
  std::vector<std::size_t> p2;
};

/// Per-class random split: round(fraction * n_c), clamped to [1, n_c - 1],
/// samples of class c go to p1 and the rest to p2. Both lists are sorted.
inline PartitionIndices split_partitions(std::span<const ClassId> labels, double fraction, std::uint64_t seed) {
  detail::require(fraction > 0.0 && fraction < 1.0, "split_partitions: fraction must be in (0, 1)");
  detail::require(!labels.empty(), "split_partitions: no samples");
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  PartitionIndices out;
  for (auto& [label, members] : by_class) {
    const auto n = static_cast<long>(members.size());
    if (n < 2)
      throw InvalidArgument("split_partitions: class " + std::to_string(label) +
                            " has a single sample; each class needs >= 2");
    const long n1 = std::clamp(std::lround(fraction * static_cast<double>(n)), 1L, n - 1);
    std::shuffle(members.begin(), members.end(), rng);
    out.p1.insert(out.p1.end(), members.begin(), members.begin() + n1);
    out.p2.insert(out.p2.end(), members.begin() + n1, members.end());
  }
  std::sort(out.p1.begin(), out.p1.end());
  std::sort(out.p2.begin(), out.p2.end());
  return out;
}

/// Learning-rate schedule: lr_initial until the loss stops moving, then
/// lr_reduced; when the loss stops moving again the run is over.
///
/// "Stops moving" means |L_t - L_{t-window}| <= tolerance * |L_{t-window}|.
/// The history restarts after the drop.
class PlateauSchedule {
 public:
  enum class Event { kNone, kReduced, kStop };

  PlateauSchedule(double lr_initial, double lr_reduced, int window, double tolerance)
      : lr_(lr_initial), lr_reduced_(lr_reduced), window_(window), tolerance_(tolerance) {
    detail::require(window >= 1, "PlateauSchedule: window must be >= 1");
  }

  double lr() const { return lr_; }
  bool reduced() const { return reduced_; }

  Event observe(double loss) {
    history_.push_back(loss);
    if (static_cast<int>(history_.size()) <= window_) return Event::kNone;
    const double past = history_[history_.size() - 1 - static_cast<std::size_t>(window_)];
    if (std::abs(loss - past) > tolerance_ * std::abs(past)) return Event::kNone;
    if (reduced_) return Event::kStop;
    reduced_ = true;
    lr_ = lr_reduced_;
    history_.clear();
    return Event::kReduced;
  }

 private:
  double lr_;
  double lr_reduced_;
  int window_;
  double tolerance_;
  bool reduced_ = false;
  std::vector<double> history_;
};

// ---------------------------------------------------------------------------
// Loss log

struct LogRow {
  int epoch = 0;
  std::string phase;
  double cost = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

/// Collects rows and, when given a path, appends each row to that CSV as it
/// arrives (header written once for a new file).
class LossLog {
 public:
  LossLog() = default;
  explicit LossLog(const std::filesystem::path& path) : path_(path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw IoError("cannot open loss log " + path.string());
    if (fresh) out_ << "epoch,phase,cost,accuracy,lr\n" << std::flush;
  }

  void add(LogRow row) {
    if (out_.is_open()) {
      out_ << row.epoch << ',' << row.phase << ',' << std::setprecision(17) << row.cost << ','
           << std::setprecision(6) << row.accuracy << ',' << row.lr << '\n'
           << std::flush;
      if (!out_) throw IoError("write failed for " + path_.string());
    }
    rows_.push_back(std::move(row));
  }

  const std::vector<LogRow>& rows() const { return rows_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::vector<LogRow> rows_;
};

// ---------------------------------------------------------------------------
// Trained model

struct TrainedModel {
  TrainMode mode = TrainMode::kSoftmax;
  std::string config;  // serialized TrainConfig
  FeatNet net;
  std::optional<SoftmaxHead> head;     // softmax_baseline only
  LabeledFeatures dictionary;           // CRC-family modes
  double lambda = 1.0;
  double procrc_gamma = 0.0;
  std::optional<CollabState> collab;    // coconet only
  int num_classes = 0;
};

namespace detail {

inline void write_mat(std::ostream& out, const Mat& m) {
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  write_raw(out, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

inline Mat read_mat(std::istream& in) {
  const auto rows = read_pod<std::uint64_t>(in);
  const auto cols = read_pod<std::uint64_t>(in);
  if (rows > (1u << 24) || cols > (1u << 24) || rows * cols > (1ull << 30)) throw IoError("checkpoint: implausible matrix size");
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  read_raw(in, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  return m;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  write_raw(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1u << 20)) throw IoError("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_raw(in, s.data(), n);
  return s;
}

}  // namespace detail

// Model checkpoint layout (little-endian):
//   "CKMD" u32 version=1, u8 mode, string config, u32 num_classes
//   feature network (CKFN block)
//   u8 has_head [u32 classes, u32 dim, params, adam step/m/v]
//   matrix dictionary features, u64 n, n x i32 labels, f64 lambda, f64 procrc_gamma
//   u8 has_collab [matrix A, vec W, f64 lambda, f64 gamma, u8 weighting]
// where matrix = u64 rows, u64 cols, column-major f64 and string = u64 length + bytes.
inline void save_model(const TrainedModel& m, std::ostream& out) {
  detail::write_raw(out, "CKMD", 4);
  detail::write_pod<std::uint32_t>(out, 1);
  detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(m.mode));
  detail::write_string(out, m.config);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.num_classes));
  m.net.save(out);
  detail::write_pod<std::uint8_t>(out, m.head ? 1 : 0);
  if (m.head) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.head->classes()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.head->dim()));
    detail::write_vec(out, m.head->params());
    detail::write_pod<std::uint64_t>(out, m.head->adam_state().step);
    detail::write_vec(out, m.head->adam_state().m);
    detail::write_vec(out, m.head->adam_state().v);
  }
  detail::write_mat(out, m.dictionary.features);
  detail::write_pod<std::uint64_t>(out, m.dictionary.labels.size());
  for (ClassId c : m.dictionary.labels) detail::write_pod<std::int32_t>(out, c);
  detail::write_pod<double>(out, m.lambda);
  detail::write_pod<double>(out, m.procrc_gamma);
  detail::write_pod<std::uint8_t>(out, m.collab ? 1 : 0);
  if (m.collab) {
    detail::write_mat(out, m.collab->A);
    detail::write_vec(out, m.collab->W);
    detail::write_pod<double>(out, m.collab->lambda);
    detail::write_pod<double>(out, m.collab->gamma);
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(m.collab->weighting));
  }
}

inline TrainedModel load_model(std::istream& in) {
  char magic[4];
  detail::read_raw(in, magic, 4);
  if (std::string_view(magic, 4) != "CKMD") throw IoError("checkpoint: bad model magic");
  if (detail::read_pod<std::uint32_t>(in) != 1) throw IoError("checkpoint: unsupported model version");
  TrainedModel m;
  const auto mode = detail::read_pod<std::uint8_t>(in);
  if (mode > 3) throw IoError("checkpoint: unknown mode");
  m.mode = static_cast<TrainMode>(mode);
  m.config = detail::read_string(in);
  m.num_classes = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  m.net = FeatNet::load(in);
  if (detail::read_pod<std::uint8_t>(in)) {
    const auto classes = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    const auto dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    try {
      m.head.emplace(classes, dim);
    } catch (const InvalidArgument& e) {
      throw IoError(std::string("checkpoint: ") + e.what());
    }
    const auto limit = static_cast<std::uint64_t>(m.head->params().size());
    Vec p = detail::read_vec(in, limit);
    if (p.size() != m.head->params().size()) throw IoError("checkpoint: softmax head size mismatch");
    m.head->mutable_params() = std::move(p);
    AdamState adam;
    adam.step = detail::read_pod<std::uint64_t>(in);
    adam.m = detail::read_vec(in, limit);
    adam.v = detail::read_vec(in, limit);
    m.head->set_adam_state(std::move(adam));
  }
  m.dictionary.features = detail::read_mat(in);
  const auto n = detail::read_pod<std::uint64_t>(in);
  if (n != static_cast<std::uint64_t>(m.dictionary.features.cols())) throw IoError("checkpoint: dictionary label count mismatch");
  m.dictionary.labels.resize(n);
  for (auto& c : m.dictionary.labels) c = detail::read_pod<std::int32_t>(in);
  m.lambda = detail::read_pod<double>(in);
  m.procrc_gamma = detail::read_pod<double>(in);
  if (detail::read_pod<std::uint8_t>(in)) {
    CollabState st;
    st.A = detail::read_mat(in);
    st.W = detail::read_vec(in, static_cast<std::uint64_t>(st.A.cols()));
    st.lambda = detail::read_pod<double>(in);
    st.gamma = detail::read_pod<double>(in);
    const auto w = detail::read_pod<std::uint8_t>(in);
    if (w > 1) throw IoError("checkpoint: unknown weighting");
    st.weighting = static_cast<ResidualWeighting>(w);
    m.collab = std::move(st);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint: trailing bytes");
  return m;
}

/// Writes to `path.tmp` and renames over `path`.
inline void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    save_model(m, out);
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return load_model(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline std::vector<Image> prepare_images(const LabeledImageSet& set, int size) {
  std::vector<Image> out;
  out.reserve(set.size());
  for (const Image& im : set.images) out.push_back(resize_bilinear(im, size, size));
  return out;
}

inline std::vector<Image> gather(const std::vector<Image>& images, std::span<const std::size_t> idx) {
  std::vector<Image> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(images[i]);
  return out;
}

inline std::vector<ClassId> gather(const std::vector<ClassId>& labels, std::span<const std::size_t> idx) {
  std::vector<ClassId> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kNetInit = 1, kHeadInit, kShuffle, kPartition, kFolds };

}  // namespace detail

struct SoftmaxRun {
  FeatNet net;
  SoftmaxHead head;
  int epochs_run = 0;
};

/// Feature net + softmax head trained with Adam on shuffled mini-batches.
/// Starts from `start` when given, otherwise from a He-initialised net.
inline SoftmaxRun train_softmax_phase(const TrainConfig& cfg, const std::vector<Image>& images,
                                      const std::vector<ClassId>& labels, int num_classes, LossLog& log,
                                      const FeatNet* start = nullptr) {
  detail::require(!images.empty() && images.size() == labels.size(), "train: empty or mismatched training set");
  SoftmaxRun run;
  if (start) {
    run.net = *start;
    run.net.reset_adam();
  } else {
    run.net = FeatNet({images.front().height, images.front().width, images.front().channels},
                      default_layers(cfg.feature_dim));
    run.net.init_he(detail::derive_seed(cfg.seed, detail::kNetInit));
  }
  run.head = SoftmaxHead(num_classes, run.net.feature_dim());
  run.head.init(detail::derive_seed(cfg.seed, detail::kHeadInit));

  std::mt19937_64 rng(detail::derive_seed(cfg.seed, detail::kShuffle));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  PlateauSchedule schedule(cfg.lr_initial, cfg.lr_reduced, cfg.plateau_window, cfg.plateau_tolerance);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.softmax_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const AdamOptions opt{schedule.lr()};
    double loss = 0.0;
    std::size_t hits = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t count = std::min(bs, order.size() - begin);
      const auto idx = std::span<const std::size_t>(order).subspan(begin, count);
      const auto batch = detail::gather(images, idx);
      const auto batch_labels = detail::gather(labels, idx);
      auto fwd = run.net.forward(batch);
      const auto lg = run.head.loss_and_grads(fwd.features, batch_labels);
      if (!std::isfinite(lg.loss)) throw Divergence("softmax phase: non-finite loss at epoch " + std::to_string(epoch));
      const auto pred = run.head.predict(fwd.features);
      for (std::size_t j = 0; j < count; ++j) hits += pred[j] == batch_labels[j];
      loss += lg.loss * static_cast<double>(count);
      const Vec net_grads = run.net.backward(fwd.cache, lg.feature_grads);
      run.net.adam_step(net_grads, opt);
      run.head.adam_step(lg.param_grads, opt);
    }
    loss /= static_cast<double>(order.size());
    log.add({epoch, "softmax", loss, 100.0 * static_cast<double>(hits) / static_cast<double>(order.size()), opt.lr});
    run.epochs_run = epoch;
    if (schedule.observe(loss) == PlateauSchedule::Event::kStop) break;
  }
  return run;
}

struct CoconetRun {
  FeatNet net;
  CollabState state;
  int epochs_run = 0;
};

/// Collaborative fine-tuning. Each epoch extracts X (p1) and Y (p2), takes
/// one backtracking W/A pass of the collaborative head, and back-propagates
/// grad_X (and grad_Y when enabled) through the feature net in mini-batches.
/// A and W are initialised on the first epoch from the class sizes and the
/// closed-form reconstruction. The run is aborted as diverged once the cost
/// exceeds divergence_factor times the cost of the empty reconstruction
/// (A = 0) on the first epoch.
inline CoconetRun train_coconet_phase(const TrainConfig& cfg, FeatNet net, const std::vector<Image>& images,
                                      const std::vector<ClassId>& labels, LossLog& log) {
  const auto parts = split_partitions(labels, cfg.partition_fraction, detail::derive_seed(cfg.seed, detail::kPartition));
  const auto im1 = detail::gather(images, parts.p1);
  const auto im2 = detail::gather(images, parts.p2);
  PartitionPair pp;
  pp.labels_p1 = detail::gather(labels, parts.p1);
  pp.labels_p2 = detail::gather(labels, parts.p2);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  CoconetRun run{std::move(net), {}, 0};
  run.net.reset_adam();
  run.state.lambda = cfg.lambda;
  run.state.gamma = cfg.gamma;
  run.state.weighting = cfg.weighting;
  PlateauSchedule schedule(cfg.lr_initial, cfg.lr_reduced, cfg.plateau_window, cfg.plateau_tolerance);
  const BacktrackOptions bt{cfg.eta_W, cfg.eta_A, 20};
  double initial_cost = 0.0;

  auto push_back = [&](const std::vector<Image>& part, const Mat& grads, const AdamOptions& opt) {
    for (std::size_t begin = 0; begin < part.size(); begin += bs) {
      const std::size_t count = std::min(bs, part.size() - begin);
      auto fwd = run.net.forward(std::span<const Image>(part).subspan(begin, count));
      const Vec g = run.net.backward(fwd.cache, grads.middleCols(static_cast<Eigen::Index>(begin),
                                                                 static_cast<Eigen::Index>(count)));
      run.net.adam_step(g, opt);
    }
  };

  for (int epoch = 1; epoch <= cfg.collab_epochs; ++epoch) {
    pp.X = run.net.extract(im1, bs);
    pp.Y = run.net.extract(im2, bs);
    if (epoch == 1) {
      run.state.W = init_weights(pp.labels_p2);
      run.state.A = Mat::Zero(pp.m(), pp.n());
      initial_cost = collab_cost(pp, run.state);
      run.state.A = init_A(pp, run.state.W, cfg.lambda, SolverPath::kAuto, cfg.fast_threshold);
    }
    const auto step = backtracking_update(pp, run.state, bt);
    run.state = step.state;
    const double cost = step.cost_after;
    if (!std::isfinite(cost) || cost > cfg.divergence_factor * std::max(initial_cost, 1e-300))
      throw Divergence("coconet phase: collaborative cost " + std::to_string(cost) + " at epoch " +
                       std::to_string(epoch) + " exceeds " + std::to_string(cfg.divergence_factor) +
                       " x initial " + std::to_string(initial_cost));

    const AdamOptions opt{schedule.lr()};
    const Mat gx = grad_X(pp, run.state);
    const Mat gy = cfg.enable_grad_Y ? grad_Y(pp, run.state) : Mat();
    push_back(im1, gx, opt);
    if (cfg.enable_grad_Y) push_back(im2, gy, opt);

    const CrcModel probe(Dictionary(pp.X, pp.labels_p1), cfg.lambda);
    const double acc = accuracy_percent(probe.classify_batch(pp.Y), pp.labels_p2);
    log.add({epoch, "coconet", cost, acc, opt.lr});
    run.epochs_run = epoch;
    if (schedule.observe(cost) == PlateauSchedule::Event::kStop) break;
  }
  if (run.state.W.size() == 0) {
    pp.X = run.net.extract(im1, bs);
    pp.Y = run.net.extract(im2, bs);
    run.state.W = init_weights(pp.labels_p2);
    run.state.A = init_A(pp, run.state.W, cfg.lambda, SolverPath::kAuto, cfg.fast_threshold);
  }
  return run;
}

inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  return grid;
}

/// Regularizer for the CRC-family heads: cfg.lambda, or the value picked by
/// tune_lambda with a p1 dictionary validated on p2.
inline double choose_lambda(const TrainConfig& cfg, const Mat& features, const std::vector<ClassId>& labels) {
  if (!cfg.tune_lambda) return cfg.lambda;
  const auto parts = split_partitions(labels, cfg.partition_fraction, detail::derive_seed(cfg.seed, detail::kPartition));
  const Dictionary dict(features(Eigen::all, parts.p1), detail::gather(labels, parts.p1));
  const LabeledFeatures val{features(Eigen::all, parts.p2), detail::gather(labels, parts.p2)};
  return tune_lambda(dict, val, lambda_grid());
}

namespace detail {

inline TrainedModel finish_model(const TrainConfig& cfg, TrainMode mode, FeatNet net,
                                 const std::vector<Image>& images, const std::vector<ClassId>& labels,
                                 int num_classes) {
  TrainedModel m;
  m.mode = mode;
  TrainConfig resolved = cfg;
  resolved.mode = mode;
  m.config = resolved.serialize();
  m.num_classes = num_classes;
  m.procrc_gamma = cfg.procrc_gamma;
  const Mat features = net.extract(images, static_cast<std::size_t>(cfg.batch_size));
  m.lambda = choose_lambda(cfg, features, labels);
  m.dictionary = {features, labels};
  m.net = std::move(net);
  return m;
}

}  // namespace detail

/// Trains every requested mode on one training set, sharing the softmax
/// phase between them.
inline std::map<TrainMode, TrainedModel> train_modes(const TrainConfig& cfg, const LabeledImageSet& data,
                                                     std::span<const TrainMode> modes,
                                                     const std::filesystem::path& log_path = {},
                                                     const FeatNet* start = nullptr) {
  cfg.validate();
  data.validate();
  detail::require(!modes.empty(), "train: no modes requested");
  const auto images = detail::prepare_images(data, cfg.image_size);
  const int classes = data.num_classes();
  LossLog log = log_path.empty() ? LossLog() : LossLog(log_path);

  if (start) detail::require(start->input_shape() == InputShape{cfg.image_size, cfg.image_size, images.front().channels},
                             "train: starting network expects a different input shape");
  SoftmaxRun base = train_softmax_phase(cfg, images, data.labels, classes, log, start);

  std::map<TrainMode, TrainedModel> out;
  for (TrainMode mode : modes) {
    if (out.contains(mode)) continue;
    switch (mode) {
      case TrainMode::kSoftmax: {
        TrainedModel m;
        m.mode = mode;
        TrainConfig resolved = cfg;
        resolved.mode = mode;
        m.config = resolved.serialize();
        m.num_classes = classes;
        m.net = base.net;
        m.head = base.head;
        out.emplace(mode, std::move(m));
        break;
      }
      case TrainMode::kCascadeCrc:
      case TrainMode::kCascadeProcrc:
        out.emplace(mode, detail::finish_model(cfg, mode, base.net, images, data.labels, classes));
        break;
      case TrainMode::kCoconet: {
        CoconetRun run = train_coconet_phase(cfg, base.net, images, data.labels, log);
        TrainedModel m = detail::finish_model(cfg, mode, std::move(run.net), images, data.labels, classes);
        m.collab = std::move(run.state);
        out.emplace(mode, std::move(m));
        break;
      }
    }
  }
  return out;
}

inline TrainedModel train(const TrainConfig& cfg, const LabeledImageSet& data,
                          const std::filesystem::path& log_path = {}) {
  const TrainMode mode = cfg.mode;
  auto models = train_modes(cfg, data, std::span<const TrainMode>(&mode, 1), log_path);
  return std::move(models.at(mode));
}

inline TrainedModel train_baseline(const TrainConfig& cfg, const LabeledImageSet& data,
                                   const std::filesystem::path& log_path = {}) {
  detail::require(cfg.mode != TrainMode::kCoconet, "train_baseline: coconet is not a baseline mode");
  return train(cfg, data, log_path);
}

inline TrainedModel train_coconet(TrainConfig cfg, const LabeledImageSet& data,
                                  const std::filesystem::path& log_path = {}) {
  cfg.mode = TrainMode::kCoconet;
  return train(cfg, data, log_path);
}

/// Trains on each stage in turn, carrying the feature net over. Earlier
/// stages use softmax training; the configured mode applies to the last.
inline TrainedModel pretrain_then_finetune(std::span<const LabeledImageSet> stages, const TrainConfig& cfg,
                                           const std::filesystem::path& log_path = {}) {
  detail::require(!stages.empty(), "pretrain_then_finetune: no stages");
  for (const auto& s : stages) s.validate();
  for (const auto& s : stages)
    detail::require(s.images.front().same_shape(stages.front().images.front()),
                    "pretrain_then_finetune: image dimensions differ between stages");
  std::optional<FeatNet> carried;
  for (std::size_t i = 0; i + 1 < stages.size(); ++i) {
    TrainConfig stage_cfg = cfg;
    stage_cfg.mode = TrainMode::kSoftmax;
    const TrainMode mode = TrainMode::kSoftmax;
    auto m = train_modes(stage_cfg, stages[i], std::span<const TrainMode>(&mode, 1), log_path,
                         carried ? &*carried : nullptr);
    carried = std::move(m.at(mode).net);
  }
  const TrainMode mode = cfg.mode;
  auto m = train_modes(cfg, stages.back(), std::span<const TrainMode>(&mode, 1), log_path,
                       carried ? &*carried : nullptr);
  return std::move(m.at(mode));
}

/// Class ids for `images`: the softmax head for softmax_baseline, ProCRC for
/// cascade_procrc, CRC over the stored dictionary otherwise.
inline std::vector<ClassId> infer_features(const TrainedModel& m, const Mat& features) {
  switch (m.mode) {
    case TrainMode::kSoftmax:
      detail::require(m.head.has_value(), "infer: softmax model without a head");
      return m.head->predict(features);
    case TrainMode::kCascadeProcrc:
      return ProCrcModel(Dictionary(m.dictionary), m.lambda, m.procrc_gamma).classify_batch(features);
    case TrainMode::kCascadeCrc:
    case TrainMode::kCoconet:
      return CrcModel(Dictionary(m.dictionary), m.lambda).classify_batch(features);
  }
  return {};
}

inline std::vector<ClassId> infer(const TrainedModel& m, std::span<const Image> images) {
  if (images.empty()) return {};
  const InputShape& s = m.net.input_shape();
  std::vector<Image> prepared;
  prepared.reserve(images.size());
  for (const Image& im : images) {
    detail::require(im.channels == s.channels, "infer: channel count differs from the model");
    prepared.push_back(resize_bilinear(im, s.height, s.width));
  }
  return infer_features(m, m.net.extract(prepared));
}

inline double evaluate(const TrainedModel& m, const LabeledImageSet& test) {
  detail::require(test.size() > 0, "evaluate: empty test set");
  return evaluate(infer(m, test.images), test.labels);
}

// ---------------------------------------------------------------------------
// Cross-validation

/// Stratified k-fold evaluation of every mode; within a fold all modes share
/// one softmax run. `log_dir`, when set, receives one loss CSV per fold.
inline std::map<TrainMode, EvalReport> crossval(const TrainConfig& cfg, const LabeledImageSet& data, int k,
                                                std::span<const TrainMode> modes,
                                                const std::filesystem::path& log_dir = {},
                                                const std::function<void(int, TrainMode, double)>& on_fold = {}) {
  cfg.validate();
  data.validate();
  const auto folds = stratified_kfold(data.labels, k, detail::derive_seed(cfg.seed, detail::kFolds));
  std::map<TrainMode, std::vector<double>> acc;
  for (int f = 0; f < k; ++f) {
    const auto& test_idx = folds[static_cast<std::size_t>(f)];
    const auto train_idx = k == 1 ? test_idx : complement(data.size(), test_idx);
    const auto train_set = data.subset(train_idx);
    const auto test_set = data.subset(test_idx);
    std::filesystem::path log_path;
    if (!log_dir.empty()) log_path = log_dir / ("fold" + std::to_string(f + 1) + ".csv");
    const auto models = train_modes(cfg, train_set, modes, log_path);
    for (const auto& [mode, model] : models) {
      const double a = evaluate(model, test_set);
      acc[mode].push_back(a);
      if (on_fold) on_fold(f + 1, mode, a);
    }
  }
  std::map<TrainMode, EvalReport> out;
  for (auto& [mode, folds_acc] : acc) {
    TrainConfig resolved = cfg;
    resolved.mode = mode;
    out.emplace(mode, aggregate(std::move(folds_acc),
                                fingerprint(resolved.serialize() + "k=" + std::to_string(k) + "\n")));
  }
  return out;
}

}  // namespace cocokit
