#pragma once

// Small convolutional feature extractor with hand-written forward and
// backward passes.
//
// Activations of a batch travel in one of two layouts:
//   spatial: (batch * height * width) x channels, row b*H*W + y*W + x
//   flat:    features x batch, one sample per column
// `flatten` converts the first into the second (feature index c*H*W + y*W + x).
//
// All trainable values live in one flat parameter vector. A conv3x3 layer owns
// a (in_channels*9) x out_channels weight block (row ci*9 + ky*3 + kx) and an
// out_channels bias; a dense layer owns a units x fan_in block and a units
// bias. Blocks are column-major and appear in layer order, weight before bias.

#include <Eigen/Dense>

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cocokit/error.hpp"
#include "cocokit/image.hpp"
#include "cocokit/linalg.hpp"
#include "cocokit/parallel.hpp"

namespace cocokit {

enum class LayerKind : std::uint8_t { kConv3x3 = 1, kRelu = 2, kMaxPool2 = 3, kFlatten = 4, kDense = 5 };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  int units = 0;  // output channels for conv3x3, output units for dense

  static LayerSpec conv3x3(int channels) { return {LayerKind::kConv3x3, channels}; }
  static LayerSpec relu() { return {LayerKind::kRelu, 0}; }
  static LayerSpec maxpool2() { return {LayerKind::kMaxPool2, 0}; }
  static LayerSpec flatten() { return {LayerKind::kFlatten, 0}; }
  static LayerSpec dense(int units) { return {LayerKind::kDense, units}; }

  bool operator==(const LayerSpec&) const = default;
};

inline std::string to_string(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::kConv3x3: return "conv3x3(" + std::to_string(l.units) + ")";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2: return "maxpool2";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDense: return "dense(" + std::to_string(l.units) + ")";
  }
  return "?";
}

/// conv3x3(8)-relu-pool-conv3x3(16)-relu-pool-flatten-dense(feature_dim)
inline std::vector<LayerSpec> default_layers(int feature_dim = 64) {
  return {LayerSpec::conv3x3(8), LayerSpec::relu(),    LayerSpec::maxpool2(),          LayerSpec::conv3x3(16),
          LayerSpec::relu(),     LayerSpec::maxpool2(), LayerSpec::flatten(), LayerSpec::dense(feature_dim)};
}

struct InputShape {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool operator==(const InputShape&) const = default;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m;
  Vec v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update of `params` in place.
inline void adam_update(Vec& params, const Vec& grads, AdamState& state, const AdamOptions& opt) {
  detail::require(opt.lr > 0.0, "adam: learning rate must be > 0");
  detail::require(grads.size() == params.size(), "adam: gradient size mismatch");
  if (!grads.allFinite()) throw Divergence("adam: non-finite gradient");
  if (state.m.size() != params.size()) {
    state.m = Vec::Zero(params.size());
    state.v = Vec::Zero(params.size());
  }
  ++state.step;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grads;
  state.v = opt.beta2 * state.v + (1.0 - opt.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  params.array() -= opt.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + opt.eps);
}

/// Stored forward activations of one batch; valid for exactly one backward
/// call against unchanged parameters.
struct ActivationCache {
  std::uint64_t generation = 0;
  Eigen::Index batch = 0;
  bool consumed = false;
  std::vector<Mat> stored;                          // per layer, meaning depends on the kind
  std::vector<std::vector<Eigen::Index>> argmax;    // per layer, max-pool winners
};

namespace detail {

inline std::uint64_t next_generation() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

struct Stage {
  LayerSpec spec;
  bool spatial = true;  // layout of the layer's input
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
  Eigen::Index in_features = 0, out_features = 0;  // flat layouts
  Eigen::Index w_off = 0, w_rows = 0, w_cols = 0, b_off = 0, b_size = 0;
};

// Column r = ci*9 + ky*3 + kx holds input channel ci shifted by (ky-1, kx-1),
// zero outside the image.
inline Mat im2col(const Mat& act, Eigen::Index batch, int h, int w, int c) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Mat cols = Mat::Zero(batch * hw, static_cast<Eigen::Index>(c) * 9);
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        const int len = x1 - x0;
        const Eigen::Index r = ci * 9 + ky * 3 + kx;
        double* dst = cols.col(r).data();
        const double* src = act.col(ci).data();
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int y = 0; y < h; ++y) {
            const int ys = y + dy;
            if (ys < 0 || ys >= h) continue;
            std::memcpy(dst + b * hw + y * w + x0, src + b * hw + ys * w + x0 + dx, sizeof(double) * len);
          }
        }
      }
    }
  }
  return cols;
}

inline Mat col2im(const Mat& cols, Eigen::Index batch, int h, int w, int c) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Mat act = Mat::Zero(batch * hw, c);
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        const Eigen::Index r = ci * 9 + ky * 3 + kx;
        const double* src = cols.col(r).data();
        double* dst = act.col(ci).data();
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int y = 0; y < h; ++y) {
            const int ys = y + dy;
            if (ys < 0 || ys >= h) continue;
            const double* s = src + b * hw + y * w;
            double* d = dst + b * hw + ys * w + dx;
            for (int x = x0; x < x1; ++x) d[x] += s[x];
          }
        }
      }
    }
  }
  return act;
}

inline void write_raw(std::ostream& out, const void* data, std::size_t bytes) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("checkpoint: write failed");
}

inline void read_raw(std::istream& in, void* data, std::size_t bytes) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("checkpoint: truncated stream");
}

template <class T>
void write_pod(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  write_raw(out, &v, sizeof v);
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  read_raw(in, &v, sizeof v);
  return v;
}

inline void write_vec(std::ostream& out, const Vec& v) {
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  write_raw(out, v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

inline Vec read_vec(std::istream& in, std::uint64_t max_size) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > max_size) throw IoError("checkpoint: implausible array length");
  Vec v(static_cast<Eigen::Index>(n));
  read_raw(in, v.data(), sizeof(double) * n);
  return v;
}

}  // namespace detail

struct ForwardResult {
  Mat features;  // feature_dim x batch
  ActivationCache cache;
};

class FeatNet {
 public:
  FeatNet() = default;

  FeatNet(InputShape input, std::vector<LayerSpec> layers) : input_(input), layers_(std::move(layers)) {
    build();
    params_ = Vec::Zero(num_params_);
    generation_ = detail::next_generation();
  }

  /// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
  void init_he(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    params_.setZero();
    for (const auto& s : stages_) {
      if (s.w_rows == 0) continue;
      const Eigen::Index fan_in = s.spec.kind == LayerKind::kConv3x3 ? s.w_rows : s.w_cols;
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (Eigen::Index k = 0; k < s.w_rows * s.w_cols; ++k) params_[s.w_off + k] = normal(rng);
    }
    adam_ = AdamState{};
    generation_ = detail::next_generation();
  }

  const InputShape& input_shape() const { return input_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  int feature_dim() const { return static_cast<int>(stages_.back().out_features); }
  Eigen::Index num_params() const { return num_params_; }
  const Vec& params() const { return params_; }
  const AdamState& adam_state() const { return adam_; }

  void set_params(const Vec& p) {
    detail::require(p.size() == num_params_, "FeatNet::set_params: size mismatch");
    params_ = p;
    generation_ = detail::next_generation();
  }

  /// Parameter-range of layer i's weight block as (offset, count); count is 0
  /// for layers without parameters.
  std::pair<Eigen::Index, Eigen::Index> weight_block(std::size_t layer) const {
    const auto& s = stages_.at(layer);
    return {s.w_off, s.w_rows * s.w_cols};
  }

  ForwardResult forward(std::span<const Image> images) const {
    ForwardResult out;
    out.cache.generation = generation_;
    out.cache.batch = static_cast<Eigen::Index>(images.size());
    out.cache.stored.resize(stages_.size());
    out.cache.argmax.resize(stages_.size());
    out.features = run(images, &out.cache);
    return out;
  }

  /// Features for many images, batch by batch, without keeping activations.
  Mat extract(std::span<const Image> images, std::size_t batch_size = 32) const {
    Mat features(feature_dim(), static_cast<Eigen::Index>(images.size()));
    const std::size_t batches = (images.size() + batch_size - 1) / batch_size;
    parallel_for(batches, [&](std::size_t b) {
      const std::size_t begin = b * batch_size;
      const std::size_t count = std::min(batch_size, images.size() - begin);
      features.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) =
          run(images.subspan(begin, count), nullptr);
    });
    return features;
  }

  /// Gradient of a loss with respect to every parameter, given dLoss/dFeatures
  /// for the batch recorded in `cache`.
  Vec backward(ActivationCache& cache, const Mat& feature_grads) const {
    if (cache.consumed) throw InvalidArgument("FeatNet::backward: activation cache already consumed");
    if (cache.generation != generation_) throw InvalidArgument("FeatNet::backward: stale activation cache");
    detail::require(feature_grads.rows() == feature_dim() && feature_grads.cols() == cache.batch,
                    "FeatNet::backward: feature gradient shape mismatch");
    cache.consumed = true;
    Vec grads = Vec::Zero(num_params_);
    const Eigen::Index batch = cache.batch;
    Mat g = feature_grads;
    for (std::size_t li = stages_.size(); li-- > 0;) {
      const auto& s = stages_[li];
      Mat& stored = cache.stored[li];
      switch (s.spec.kind) {
        case LayerKind::kConv3x3: {
          Eigen::Map<Mat> dw(grads.data() + s.w_off, s.w_rows, s.w_cols);
          dw.noalias() += stored.transpose() * g;
          grads.segment(s.b_off, s.b_size) += g.colwise().sum().transpose();
          if (li > 0) {
            const Eigen::Map<const Mat> w(params_.data() + s.w_off, s.w_rows, s.w_cols);
            const Mat gcols = g * w.transpose();
            g = detail::col2im(gcols, batch, s.in_h, s.in_w, s.in_c);
          }
          break;
        }
        case LayerKind::kRelu:
          g = (stored.array() > 0.0).select(g, 0.0);
          break;
        case LayerKind::kMaxPool2: {
          Mat gin = Mat::Zero(batch * s.in_h * s.in_w, s.in_c);
          const auto& winners = cache.argmax[li];
          for (Eigen::Index c = 0; c < g.cols(); ++c)
            for (Eigen::Index r = 0; r < g.rows(); ++r) gin(winners[c * g.rows() + r], c) += g(r, c);
          g = std::move(gin);
          break;
        }
        case LayerKind::kFlatten: {
          const Eigen::Index hw = static_cast<Eigen::Index>(s.in_h) * s.in_w;
          Mat gin(batch * hw, s.in_c);
          for (Eigen::Index b = 0; b < batch; ++b)
            for (int c = 0; c < s.in_c; ++c) gin.col(c).segment(b * hw, hw) = g.col(b).segment(c * hw, hw);
          g = std::move(gin);
          break;
        }
        case LayerKind::kDense: {
          Eigen::Map<Mat> dw(grads.data() + s.w_off, s.w_rows, s.w_cols);
          dw.noalias() += g * stored.transpose();
          grads.segment(s.b_off, s.b_size) += g.rowwise().sum();
          if (li > 0) {
            const Eigen::Map<const Mat> w(params_.data() + s.w_off, s.w_rows, s.w_cols);
            g = w.transpose() * g;
          }
          break;
        }
      }
      stored.resize(0, 0);
    }
    return grads;
  }

  /// One Adam update; invalidates outstanding activation caches.
  void adam_step(const Vec& grads, const AdamOptions& opt) {
    adam_update(params_, grads, adam_, opt);
    generation_ = detail::next_generation();
  }

  void reset_adam() { adam_ = AdamState{}; }

  // Checkpoint layout (little-endian):
  //   "CKFN" u32 version=1
  //   u32 height, width, channels, u32 layer_count, layer_count x (u8 kind, u32 units)
  //   u64 n, n x f64 params
  //   u64 adam_step, u64 n, n x f64 first moments, u64 n, n x f64 second moments
  void save(std::ostream& out) const {
    detail::write_raw(out, "CKFN", 4);
    detail::write_pod<std::uint32_t>(out, 1);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(input_.height));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(input_.width));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(input_.channels));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(layers_.size()));
    for (const auto& l : layers_) {
      detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(l.kind));
      detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(l.units));
    }
    detail::write_vec(out, params_);
    detail::write_pod<std::uint64_t>(out, adam_.step);
    detail::write_vec(out, adam_.m);
    detail::write_vec(out, adam_.v);
  }

  static FeatNet load(std::istream& in) {
    char magic[4];
    detail::read_raw(in, magic, 4);
    if (std::memcmp(magic, "CKFN", 4) != 0) throw IoError("checkpoint: bad feature-network magic");
    if (detail::read_pod<std::uint32_t>(in) != 1) throw IoError("checkpoint: unsupported feature-network version");
    InputShape shape;
    shape.height = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    shape.width = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    shape.channels = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    const auto count = detail::read_pod<std::uint32_t>(in);
    if (count > 1024) throw IoError("checkpoint: implausible layer count");
    std::vector<LayerSpec> layers(count);
    for (auto& l : layers) {
      const auto kind = detail::read_pod<std::uint8_t>(in);
      if (kind < 1 || kind > 5) throw IoError("checkpoint: unknown layer kind");
      l.kind = static_cast<LayerKind>(kind);
      l.units = static_cast<int>(detail::read_pod<std::uint32_t>(in));
    }
    FeatNet net;
    try {
      net = FeatNet(shape, std::move(layers));
    } catch (const InvalidArgument& e) {
      throw IoError(std::string("checkpoint: ") + e.what());
    }
    const auto limit = static_cast<std::uint64_t>(net.num_params_);
    net.params_ = detail::read_vec(in, limit);
    if (net.params_.size() != net.num_params_) throw IoError("checkpoint: parameter count mismatch");
    net.adam_.step = detail::read_pod<std::uint64_t>(in);
    net.adam_.m = detail::read_vec(in, limit);
    net.adam_.v = detail::read_vec(in, limit);
    if (net.adam_.m.size() != net.adam_.v.size() || (net.adam_.m.size() != 0 && net.adam_.m.size() != net.num_params_))
      throw IoError("checkpoint: Adam moment size mismatch");
    net.generation_ = detail::next_generation();
    return net;
  }

 private:
  void build() {
    detail::require(input_.height > 0 && input_.width > 0 && input_.channels > 0, "FeatNet: empty input shape");
    detail::require(!layers_.empty() && layers_.back().kind == LayerKind::kDense,
                    "FeatNet: the final layer must be dense");
    stages_.clear();
    bool spatial = true;
    int c = input_.channels, h = input_.height, w = input_.width;
    Eigen::Index features = 0;
    Eigen::Index offset = 0;
    for (const auto& spec : layers_) {
      detail::Stage s;
      s.spec = spec;
      s.spatial = spatial;
      s.in_c = c;
      s.in_h = h;
      s.in_w = w;
      s.in_features = features;
      switch (spec.kind) {
        case LayerKind::kConv3x3:
          detail::require(spatial, "FeatNet: conv3x3 after flatten");
          detail::require(spec.units > 0, "FeatNet: conv3x3 needs channels > 0");
          s.w_rows = static_cast<Eigen::Index>(c) * 9;
          s.w_cols = spec.units;
          s.b_size = spec.units;
          c = spec.units;
          break;
        case LayerKind::kRelu:
          break;
        case LayerKind::kMaxPool2:
          detail::require(spatial, "FeatNet: maxpool2 after flatten");
          detail::require(h % 2 == 0 && w % 2 == 0, "FeatNet: maxpool2 needs even spatial dimensions");
          h /= 2;
          w /= 2;
          break;
        case LayerKind::kFlatten:
          detail::require(spatial, "FeatNet: flatten applied twice");
          spatial = false;
          features = static_cast<Eigen::Index>(c) * h * w;
          break;
        case LayerKind::kDense:
          detail::require(!spatial, "FeatNet: dense before flatten");
          detail::require(spec.units > 0, "FeatNet: dense needs units > 0");
          s.w_rows = spec.units;
          s.w_cols = features;
          s.b_size = spec.units;
          features = spec.units;
          break;
      }
      if (s.w_rows > 0) {
        s.w_off = offset;
        offset += s.w_rows * s.w_cols;
        s.b_off = offset;
        offset += s.b_size;
      }
      s.out_c = c;
      s.out_h = h;
      s.out_w = w;
      s.out_features = features;
      stages_.push_back(s);
    }
    num_params_ = offset;
  }

  Mat to_spatial(std::span<const Image> images) const {
    const Eigen::Index hw = static_cast<Eigen::Index>(input_.height) * input_.width;
    Mat act(static_cast<Eigen::Index>(images.size()) * hw, input_.channels);
    for (std::size_t b = 0; b < images.size(); ++b) {
      const Image& im = images[b];
      if (im.height != input_.height || im.width != input_.width || im.channels != input_.channels ||
          im.pixels.size() != static_cast<std::size_t>(hw * input_.channels))
        throw InvalidArgument("FeatNet: image shape does not match the network input");
      for (Eigen::Index p = 0; p < hw; ++p)
        for (int c = 0; c < input_.channels; ++c) act(static_cast<Eigen::Index>(b) * hw + p, c) = im.pixels[p * input_.channels + c];
    }
    return act;
  }

  Mat run(std::span<const Image> images, ActivationCache* cache) const {
    detail::require(!images.empty(), "FeatNet: empty batch");
    const Eigen::Index batch = static_cast<Eigen::Index>(images.size());
    Mat act = to_spatial(images);
    for (std::size_t li = 0; li < stages_.size(); ++li) {
      const auto& s = stages_[li];
      switch (s.spec.kind) {
        case LayerKind::kConv3x3: {
          Mat cols = detail::im2col(act, batch, s.in_h, s.in_w, s.in_c);
          const Eigen::Map<const Mat> w(params_.data() + s.w_off, s.w_rows, s.w_cols);
          const Eigen::Map<const Vec> bias(params_.data() + s.b_off, s.b_size);
          act.noalias() = cols * w;
          act.rowwise() += bias.transpose();
          if (cache) cache->stored[li] = std::move(cols);
          break;
        }
        case LayerKind::kRelu:
          act = act.cwiseMax(0.0);
          if (cache) cache->stored[li] = act;
          break;
        case LayerKind::kMaxPool2: {
          const int oh = s.out_h, ow = s.out_w, iw = s.in_w;
          const Eigen::Index ihw = static_cast<Eigen::Index>(s.in_h) * iw, ohw = static_cast<Eigen::Index>(oh) * ow;
          Mat out(batch * ohw, s.in_c);
          std::vector<Eigen::Index> winners;
          if (cache) winners.resize(static_cast<std::size_t>(out.size()));
          for (int c = 0; c < s.in_c; ++c) {
            for (Eigen::Index b = 0; b < batch; ++b) {
              for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                  Eigen::Index best = b * ihw + (2 * y) * iw + 2 * x;
                  for (Eigen::Index cand : {best + 1, best + iw, best + iw + 1})
                    if (act(cand, c) > act(best, c)) best = cand;
                  const Eigen::Index r = b * ohw + y * ow + x;
                  out(r, c) = act(best, c);
                  if (cache) winners[static_cast<std::size_t>(c * out.rows() + r)] = best;
                }
              }
            }
          }
          if (cache) cache->argmax[li] = std::move(winners);
          act = std::move(out);
          break;
        }
        case LayerKind::kFlatten: {
          const Eigen::Index hw = static_cast<Eigen::Index>(s.in_h) * s.in_w;
          Mat flat(s.out_features, batch);
          for (Eigen::Index b = 0; b < batch; ++b)
            for (int c = 0; c < s.in_c; ++c) flat.col(b).segment(c * hw, hw) = act.col(c).segment(b * hw, hw);
          act = std::move(flat);
          break;
        }
        case LayerKind::kDense: {
          const Eigen::Map<const Mat> w(params_.data() + s.w_off, s.w_rows, s.w_cols);
          const Eigen::Map<const Vec> bias(params_.data() + s.b_off, s.b_size);
          Mat out = w * act;
          out.colwise() += bias;
          if (cache) cache->stored[li] = std::move(act);
          act = std::move(out);
          break;
        }
      }
    }
    return act;
  }

  InputShape input_;
  std::vector<LayerSpec> layers_;
  std::vector<detail::Stage> stages_;
  Eigen::Index num_params_ = 0;
  Vec params_;
  AdamState adam_;
  std::uint64_t generation_ = 0;
};

/// Linear classifier with softmax cross-entropy, used only by the baseline
/// and pretraining modes. Parameters: classes x dim weights (column-major)
/// followed by a classes bias.
class SoftmaxHead {
 public:
  SoftmaxHead() = default;
  SoftmaxHead(int classes, int dim) : classes_(classes), dim_(dim) {
    detail::require(classes >= 2 && dim >= 1, "SoftmaxHead: need >= 2 classes and dim >= 1");
    params_ = Vec::Zero(static_cast<Eigen::Index>(classes) * dim + classes);
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / dim_));
    params_.setZero();
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(classes_) * dim_; ++k) params_[k] = normal(rng);
    adam_ = AdamState{};
  }

  int classes() const { return classes_; }
  int dim() const { return dim_; }
  const Vec& params() const { return params_; }
  Vec& mutable_params() { return params_; }
  const AdamState& adam_state() const { return adam_; }
  void set_adam_state(AdamState s) { adam_ = std::move(s); }

  Mat logits(const Mat& features) const {
    detail::require(features.rows() == dim_, "SoftmaxHead: feature dimension mismatch");
    Mat z = weights() * features;
    z.colwise() += bias();
    return z;
  }

  std::vector<int> predict(const Mat& features) const {
    const Mat z = logits(features);
    std::vector<int> out(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      Eigen::Index best;
      z.col(j).maxCoeff(&best);
      out[j] = static_cast<int>(best);
    }
    return out;
  }

  struct LossGrad {
    double loss = 0.0;
    Vec param_grads;
    Mat feature_grads;
  };

  /// Mean cross-entropy over the batch and its gradients.
  LossGrad loss_and_grads(const Mat& features, std::span<const int> labels) const {
    detail::require(static_cast<Eigen::Index>(labels.size()) == features.cols(), "SoftmaxHead: label count mismatch");
    const Mat z = logits(features);
    Mat p(z.rows(), z.cols());
    LossGrad out;
    const double inv_b = 1.0 / static_cast<double>(labels.size());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double zmax = z.col(j).maxCoeff();
      p.col(j) = (z.col(j).array() - zmax).exp();
      const double sum = p.col(j).sum();
      p.col(j) /= sum;
      detail::require(labels[j] >= 0 && labels[j] < classes_, "SoftmaxHead: label out of range");
      out.loss -= (z(labels[j], j) - zmax - std::log(sum)) * inv_b;
      p(labels[j], j) -= 1.0;
    }
    p *= inv_b;
    out.param_grads = Vec(params_.size());
    Eigen::Map<Mat>(out.param_grads.data(), classes_, dim_) = p * features.transpose();
    out.param_grads.tail(classes_) = p.rowwise().sum();
    out.feature_grads = weights().transpose() * p;
    return out;
  }

  void adam_step(const Vec& grads, const AdamOptions& opt) { adam_update(params_, grads, adam_, opt); }

 private:
  Eigen::Map<const Mat> weights() const { return {params_.data(), classes_, dim_}; }
  Eigen::Map<const Vec> bias() const { return {params_.data() + static_cast<Eigen::Index>(classes_) * dim_, classes_}; }

  int classes_ = 0;
  int dim_ = 0;
  Vec params_;
  AdamState adam_;
};

}  // namespace cocokit
