#pragma once

// Dense primitives shared by every solver in the library.
//
// Matrices are Eigen::MatrixXd: column-major, 64-bit IEEE doubles, so a
// d x m feature matrix stores one sample per contiguous column.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cocokit/error.hpp"

namespace cocokit {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Thin singular value decomposition M = U * diag(S) * V^T with
/// r = min(rows, cols), S sorted descending.
struct ThinSVD {
  Mat U;  // rows x r
  Vec S;  // r
  Mat V;  // cols x r
};

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

inline void require_finite(const Eigen::Ref<const Mat>& m, const char* what) {
  if (!m.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite entries");
}

inline double relative_frobenius(const Eigen::Ref<const Mat>& got,
                                 const Eigen::Ref<const Mat>& want) {
  const double denom = std::max(want.norm(), 1e-300);
  return (got - want).norm() / denom;
}

namespace detail {

// SVD of a tall (rows >= cols) matrix: Householder QR reduces it to a small
// square R, whose SVD is computed with two-sided Jacobi.
inline ThinSVD tall_svd(const Mat& m) {
  const Eigen::Index cols = m.cols();
  Eigen::HouseholderQR<Mat> qr(m);
  Mat q = qr.householderQ() * Mat::Identity(m.rows(), cols);
  Mat r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<Mat> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ThinSVD out{q * svd.matrixU(), svd.singularValues(), svd.matrixV()};
  return out;
}

}  // namespace detail

/// Thin SVD of an arbitrary finite matrix.
inline ThinSVD thin_svd(const Mat& m) {
  detail::require(m.rows() >= 1 && m.cols() >= 1, "thin_svd: empty matrix");
  require_finite(m, "thin_svd");
  if (m.rows() >= m.cols()) return detail::tall_svd(m);
  ThinSVD t = detail::tall_svd(m.transpose());
  return ThinSVD{std::move(t.V), std::move(t.S), std::move(t.U)};
}

namespace detail {

inline void check_ridge_args(const Mat& x, double s, double lambda, const Mat& b) {
  require(lambda > 0.0 && std::isfinite(lambda), "ridge_gram_inverse: lambda must be > 0");
  require(s > 0.0 && std::isfinite(s), "ridge_gram_inverse: scale s must be > 0");
  require(x.cols() == b.rows(), "ridge_gram_inverse: B must have X.cols() rows");
  require(x.rows() >= 1 && x.cols() >= 1, "ridge_gram_inverse: empty X");
  require_finite(x, "ridge_gram_inverse X");
  require_finite(b, "ridge_gram_inverse B");
}

}  // namespace detail

/// Solves (s * X^T X + lambda * I) R = B by forming the m x m system and
/// factorizing it with Cholesky.
inline Mat ridge_gram_inverse_apply(const Mat& x, double s, double lambda, const Mat& b) {
  detail::check_ridge_args(x, s, lambda, b);
  const Eigen::Index m = x.cols();
  Mat gram = Mat::Zero(m, m);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), s);
  gram.diagonal().array() += lambda;
  Eigen::LLT<Mat> llt(gram.selfadjointView<Eigen::Lower>());
  if (llt.info() != Eigen::Success) throw Divergence("ridge_gram_inverse_apply: factorization failed");
  return llt.solve(b);
}

/// Same contract as ridge_gram_inverse_apply, evaluated through the thin SVD
/// X = U S V^T and the Woodbury identity:
///
///   (s X^T X + lambda I)^-1 = V diag(1 / (s sigma_i^2 + lambda)) V^T
///                             + (1 / lambda) (I - V V^T)
///
/// Only the r x r diagonal is inverted (r = min(d, m)); no m x m matrix is
/// ever formed, and zero singular values need no special casing.
inline Mat ridge_gram_inverse_apply_fast(const Mat& x, double s, double lambda, const Mat& b) {
  detail::check_ridge_args(x, s, lambda, b);
  const ThinSVD svd = thin_svd(x);
  const Vec shrink = ((s * svd.S.array().square() + lambda).inverse() - 1.0 / lambda).matrix();
  Mat coeff = svd.V.transpose() * b;  // r x k
  coeff = shrink.asDiagonal() * coeff;
  Mat out = b / lambda;
  out.noalias() += svd.V * coeff;
  return out;
}

}  // namespace cocokit
