#pragma once

// Central finite-difference checks of the collaborative-head gradients and of
// feature-network back-propagation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cocokit/collab_head.hpp"
#include "cocokit/featnet.hpp"

namespace cocokit {

struct GradientReport {
  std::string name;
  double max_rel_error = 0.0;
};

/// Central differences of f at every entry of `at`, step h * max(1, |x|).
inline Mat central_difference(const std::function<double(const Mat&)>& f, const Mat& at, double h = 1e-6) {
  Mat g(at.rows(), at.cols());
  Mat probe = at;
  for (Eigen::Index j = 0; j < at.cols(); ++j)
    for (Eigen::Index i = 0; i < at.rows(); ++i) {
      const double step = h * std::max(1.0, std::abs(at(i, j)));
      probe(i, j) = at(i, j) + step;
      const double up = f(probe);
      probe(i, j) = at(i, j) - step;
      const double down = f(probe);
      probe(i, j) = at(i, j);
      g(i, j) = (up - down) / (2.0 * step);
    }
  return g;
}

/// ||a - b|| / max(||a||, ||b||, 1e-12)
inline double relative_error(const Mat& a, const Mat& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

struct CollabCheckOptions {
  int d = 8, m = 10, n = 6;
  bool random_sizes = false;  // draw each of d, m, n uniformly from [1, given]
  int trials = 50;
  std::uint64_t seed = 1;
  ResidualWeighting weighting = ResidualWeighting::kMixed;
  bool corrupt = false;       // flip the sign of grad_W's data term
};

/// Max relative error of grad_W, grad_A, grad_X, grad_Y against central
/// differences of P / 2 over random instances.
inline std::vector<GradientReport> check_collab_gradients(const CollabCheckOptions& o) {
  detail::require(o.d >= 1 && o.m >= 1 && o.n >= 1 && o.trials >= 1, "gradcheck: sizes and trials must be >= 1");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto fill = [&](Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
    return m;
  };
  std::vector<GradientReport> out{{"grad_W", 0.0}, {"grad_A", 0.0}, {"grad_X", 0.0}, {"grad_Y", 0.0}};
  for (int t = 0; t < o.trials; ++t) {
    auto draw = [&](int hi) { return o.random_sizes ? std::uniform_int_distribution<int>(1, hi)(rng) : hi; };
    const int d = draw(o.d), m = draw(o.m), n = draw(o.n);
    PartitionPair pp;
    pp.X = fill(d, m);
    pp.Y = fill(d, n);
    CollabState st;
    st.A = 0.5 * fill(m, n);
    st.W = Vec(n);
    for (Eigen::Index j = 0; j < n; ++j) st.W[j] = 0.5 + unit(rng);
    st.lambda = 0.1 + unit(rng);
    st.gamma = 0.1 + unit(rng);
    st.weighting = o.weighting;

    Vec gw = grad_W(pp, st);
    if (o.corrupt) gw = 2.0 * st.gamma * st.W - gw;
    const Vec fw = central_difference([&](const Mat& w) {
      CollabState s = st;
      s.W = w.col(0);
      return 0.5 * collab_cost(pp, s);
    }, st.W);
    const Mat fa = central_difference([&](const Mat& a) {
      CollabState s = st;
      s.A = a;
      return 0.5 * collab_cost(pp, s);
    }, st.A);
    const Mat fx = central_difference([&](const Mat& x) {
      PartitionPair p = pp;
      p.X = x;
      return 0.5 * collab_cost(p, st);
    }, pp.X);
    const Mat fy = central_difference([&](const Mat& y) {
      PartitionPair p = pp;
      p.Y = y;
      return 0.5 * collab_cost(p, st);
    }, pp.Y);
    out[0].max_rel_error = std::max(out[0].max_rel_error, relative_error(gw, fw));
    out[1].max_rel_error = std::max(out[1].max_rel_error, relative_error(grad_A(pp, st), fa));
    out[2].max_rel_error = std::max(out[2].max_rel_error, relative_error(grad_X(pp, st), fx));
    out[3].max_rel_error = std::max(out[3].max_rel_error, relative_error(grad_Y(pp, st), fy));
  }
  return out;
}

struct FeatnetCheckOptions {
  InputShape shape{8, 8, 2};
  int feature_dim = 6;
  int batch = 2;
  std::uint64_t seed = 1;
  bool corrupt = false;  // scale the analytic gradient by 1.001
};

/// Per-parameter relative error of back-propagation for the loss
/// L = sum(G .* features) with random G, the default layer stack and
/// slightly perturbed He weights. The denominator is floored at 1e-3 times the
/// largest analytic entry.
inline GradientReport check_featnet_gradients(const FeatnetCheckOptions& o) {
  FeatNet net(o.shape, default_layers(o.feature_dim));
  net.init_he(o.seed);
  std::mt19937_64 rng(o.seed ^ 0x5eedull);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vec p = net.params();
  for (Eigen::Index k = 0; k < p.size(); ++k) p[k] += 0.05 * normal(rng);
  net.set_params(p);
  std::vector<Image> images(static_cast<std::size_t>(o.batch));
  for (auto& im : images) {
    im = Image{o.shape.height, o.shape.width, o.shape.channels,
               std::vector<double>(static_cast<std::size_t>(o.shape.height) * o.shape.width * o.shape.channels)};
    for (double& v : im.pixels) v = unit(rng);
  }
  Mat weights(o.feature_dim, o.batch);
  for (Eigen::Index k = 0; k < weights.size(); ++k) weights.data()[k] = normal(rng);

  auto fr = net.forward(images);
  Vec analytic = net.backward(fr.cache, weights);
  if (o.corrupt) analytic *= 1.001;
  const Vec base = net.params();
  FeatNet probe = net;
  double worst = 0.0;
  const double floor = 1e-3 * std::max(analytic.cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index k = 0; k < base.size(); ++k) {
    const double h = 1e-6 * std::max(1.0, std::abs(base[k]));
    Vec q = base;
    q[k] += h;
    probe.set_params(q);
    const double up = (probe.extract(images).array() * weights.array()).sum();
    q[k] = base[k] - h;
    probe.set_params(q);
    const double down = (probe.extract(images).array() * weights.array()).sum();
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
  }
  return {"featnet", worst};
}

}  // namespace cocokit
