#pragma once

// Collaborative layer. Partition p2 features Y (d x n) are reconstructed from
// partition p1 features X (d x m) through A (m x n); W (n) re-weights the p2
// samples by class size:
//
//   P(A, W, X) = ||(Y - X A) W||^2 + lambda ||A||_F^2 + gamma ||W||^2
//
// All gradients below drop the common factor 2 of the squared norms; step
// sizes absorb it.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cocokit/crc.hpp"
#include "cocokit/error.hpp"
#include "cocokit/linalg.hpp"

namespace cocokit {

/// How W enters the data term.
enum class ResidualWeighting {
  /// (Y - XA) W, a d-vector: the weighted sum of the p2 residual columns.
  kMixed,
  /// (Y - XA) diag(W): each residual column scaled by its own weight.
  kPerColumn,
};

struct CollabState {
  Mat A;  // m x n
  Vec W;  // n
  double lambda = 1.0;
  double gamma = 0.0;
  ResidualWeighting weighting = ResidualWeighting::kMixed;
};

struct PartitionPair {
  Mat X;  // d x m, partition p1
  Mat Y;  // d x n, partition p2
  std::vector<ClassId> labels_p1;
  std::vector<ClassId> labels_p2;

  Eigen::Index dim() const { return X.rows(); }
  Eigen::Index m() const { return X.cols(); }
  Eigen::Index n() const { return Y.cols(); }
};

struct CollabGrads {
  Vec W;  // n
  Mat A;  // m x n
};

namespace detail {

inline void check_dims(const PartitionPair& pp, const CollabState& st, const char* who) {
  const std::string w(who);
  require(pp.X.rows() == pp.Y.rows(), w + ": X and Y feature dimensions differ");
  require(st.A.rows() == pp.m() && st.A.cols() == pp.n(), w + ": A must be m x n");
  require(st.W.size() == pp.n(), w + ": W must have n entries");
}

inline Mat residual(const PartitionPair& pp, const CollabState& st) { return pp.Y - pp.X * st.A; }

// Data-term weighting applied to the residual: R W W^T for the mixed form,
// R diag(W)^2 for the per-column form. Both are d x n.
inline Mat weighted_residual(const Mat& r, const CollabState& st) {
  if (st.weighting == ResidualWeighting::kMixed) return (r * st.W) * st.W.transpose();
  return r * st.W.array().square().matrix().asDiagonal();
}

}  // namespace detail

inline double collab_cost(const PartitionPair& pp, const CollabState& st) {
  detail::check_dims(pp, st, "collab_cost");
  const Mat r = detail::residual(pp, st);
  const double data = st.weighting == ResidualWeighting::kMixed
                          ? (r * st.W).squaredNorm()
                          : (r * st.W.asDiagonal()).squaredNorm();
  return data + st.lambda * st.A.squaredNorm() + st.gamma * st.W.squaredNorm();
}

/// w_j = size(class of sample j) / mean class size.
inline Vec init_weights(std::span<const ClassId> labels_p2) {
  detail::require(!labels_p2.empty(), "init_weights: no samples");
  std::map<ClassId, std::size_t> sizes;
  for (ClassId c : labels_p2) {
    detail::require(c >= 0, "init_weights: negative label");
    ++sizes[c];
  }
  const ClassId classes = sizes.rbegin()->first + 1;
  detail::require(static_cast<std::size_t>(classes) == sizes.size(), "init_weights: empty class");
  const double mean = static_cast<double>(labels_p2.size()) / classes;
  Vec w(static_cast<Eigen::Index>(labels_p2.size()));
  for (std::size_t j = 0; j < labels_p2.size(); ++j) w[j] = sizes[labels_p2[j]] / mean;
  return w;
}

/// Variant taking explicit per-class counts; sizes[c] is used for every
/// sample labelled c.
inline Vec init_weights(std::span<const std::size_t> class_sizes, std::span<const ClassId> labels_p2) {
  detail::require(!class_sizes.empty(), "init_weights: no classes");
  double total = 0.0;
  for (std::size_t s : class_sizes) {
    detail::require(s >= 1, "init_weights: empty class");
    total += static_cast<double>(s);
  }
  const double mean = total / static_cast<double>(class_sizes.size());
  Vec w(static_cast<Eigen::Index>(labels_p2.size()));
  for (std::size_t j = 0; j < labels_p2.size(); ++j) {
    const ClassId c = labels_p2[j];
    detail::require(c >= 0 && static_cast<std::size_t>(c) < class_sizes.size(), "init_weights: label out of range");
    w[j] = static_cast<double>(class_sizes[c]) / mean;
  }
  return w;
}

enum class SolverPath { kAuto, kDirect, kFast };

/// A = [X^T X (W^T W) + lambda I]^-1 X^T Y W W^T, the starting point for the
/// coordinate updates. kAuto switches to the SVD path when m exceeds
/// `fast_threshold`.
inline Mat init_A(const PartitionPair& pp, const Vec& w, double lambda, SolverPath path = SolverPath::kAuto,
                  Eigen::Index fast_threshold = 512) {
  detail::require(lambda > 0.0, "init_A: lambda must be > 0");
  detail::require(pp.X.rows() == pp.Y.rows(), "init_A: X and Y feature dimensions differ");
  detail::require(w.size() == pp.n(), "init_A: W must have n entries");
  const double s = w.squaredNorm();
  detail::require(s > 0.0, "init_A: W must be non-zero");
  const Mat rhs = (pp.X.transpose() * (pp.Y * w)) * w.transpose();
  const bool fast = path == SolverPath::kFast || (path == SolverPath::kAuto && pp.m() > fast_threshold);
  return fast ? ridge_gram_inverse_apply_fast(pp.X, s, lambda, rhs) : ridge_gram_inverse_apply(pp.X, s, lambda, rhs);
}

/// Gradient of P with respect to W (halved): R^T R W + gamma W for the mixed
/// form, w_j ||r_j||^2 + gamma w_j per column otherwise.
inline Vec grad_W(const PartitionPair& pp, const CollabState& st) {
  detail::check_dims(pp, st, "grad_W");
  const Mat r = detail::residual(pp, st);
  if (st.weighting == ResidualWeighting::kMixed) return r.transpose() * (r * st.W) + st.gamma * st.W;
  return (r.colwise().squaredNorm().transpose().array() * st.W.array()).matrix() + st.gamma * st.W;
}

/// -X^T (Y - XA) W W^T + lambda A (halved).
inline Mat grad_A(const PartitionPair& pp, const CollabState& st) {
  detail::check_dims(pp, st, "grad_A");
  return -pp.X.transpose() * detail::weighted_residual(detail::residual(pp, st), st) + st.lambda * st.A;
}

/// -(Y - XA) W W^T A^T (halved): the error fed back into the feature network
/// for the p1 samples.
inline Mat grad_X(const PartitionPair& pp, const CollabState& st) {
  detail::check_dims(pp, st, "grad_X");
  return -detail::weighted_residual(detail::residual(pp, st), st) * st.A.transpose();
}

/// (Y - XA) W W^T (halved): the matching signal for the p2 samples.
inline Mat grad_Y(const PartitionPair& pp, const CollabState& st) {
  detail::check_dims(pp, st, "grad_Y");
  return detail::weighted_residual(detail::residual(pp, st), st);
}

inline constexpr double kMinWeight = 1e-6;

/// W <- W - eta_W grad_W, A <- A - eta_A grad_A, weights clamped at kMinWeight.
inline CollabState update_step(const CollabState& st, const CollabGrads& grads, double eta_W, double eta_A) {
  detail::require(eta_W > 0.0 && eta_A > 0.0, "update_step: step sizes must be > 0");
  detail::require(grads.W.size() == st.W.size(), "update_step: grad_W has wrong size");
  detail::require(grads.A.rows() == st.A.rows() && grads.A.cols() == st.A.cols(), "update_step: grad_A has wrong shape");
  if (!grads.W.allFinite()) throw Divergence("update_step: non-finite grad_W");
  if (!grads.A.allFinite()) throw Divergence("update_step: non-finite grad_A");
  CollabState next = st;
  next.W = (st.W - eta_W * grads.W).cwiseMax(kMinWeight);
  next.A = st.A - eta_A * grads.A;
  return next;
}

struct BacktrackOptions {
  double eta_W = 1e-3;
  double eta_A = 1e-3;
  int max_halvings = 20;
};

struct BacktrackResult {
  CollabState state;
  double cost_before = 0.0;
  double cost_after = 0.0;
  double eta_W = 0.0;  // 0 when the W step was rejected
  double eta_A = 0.0;  // 0 when the A step was rejected
};

/// One block-coordinate pass: W first with {A, X} fixed, then A with the new
/// W. Each step starts at its configured size and is halved until the cost
/// drops; after max_halvings failures that block stays unchanged, so the cost
/// never increases.
inline BacktrackResult backtracking_update(const PartitionPair& pp, const CollabState& st,
                                           const BacktrackOptions& opts = {}) {
  BacktrackResult out{st, collab_cost(pp, st), 0.0, 0.0, 0.0};
  double current = out.cost_before;

  const Vec gw = grad_W(pp, out.state);
  if (!gw.allFinite()) throw Divergence("collaborative head: non-finite grad_W");
  double eta = opts.eta_W;
  for (int h = 0; h <= opts.max_halvings && gw.squaredNorm() > 0.0; ++h, eta *= 0.5) {
    CollabState trial = out.state;
    trial.W = (out.state.W - eta * gw).cwiseMax(kMinWeight);
    const double c = collab_cost(pp, trial);
    if (c < current) {
      out.state = std::move(trial);
      out.eta_W = eta;
      current = c;
      break;
    }
  }

  const Mat ga = grad_A(pp, out.state);
  if (!ga.allFinite()) throw Divergence("collaborative head: non-finite grad_A");
  eta = opts.eta_A;
  for (int h = 0; h <= opts.max_halvings && ga.squaredNorm() > 0.0; ++h, eta *= 0.5) {
    CollabState trial = out.state;
    trial.A = out.state.A - eta * ga;
    const double c = collab_cost(pp, trial);
    if (c < current) {
      out.state = std::move(trial);
      out.eta_A = eta;
      current = c;
      break;
    }
  }
  out.cost_after = current;
  return out;
}

}  // namespace cocokit
