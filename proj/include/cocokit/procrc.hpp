#pragma once

// Probabilistic CRC: the ridge code is additionally pulled towards codes in
// which every class alone reproduces the full reconstruction.
//
//   J(alpha) = ||y - X alpha||^2 + lambda ||alpha||^2
//              + (gamma / K) sum_k ||X alpha - X E_k alpha||^2
//
// E_k selects the columns of class k and K is the number of classes.

#include <cmath>
#include <vector>

#include "cocokit/crc.hpp"

namespace cocokit {

class ProCrcModel {
 public:
  ProCrcModel() = default;
  ProCrcModel(Dictionary dict, double lambda, double gamma)
      : dict_(std::move(dict)), lambda_(lambda), gamma_(gamma) {
    detail::require(lambda_ > 0.0 && std::isfinite(lambda_), "ProCrcModel: lambda must be > 0");
    detail::require(gamma_ >= 0.0 && std::isfinite(gamma_), "ProCrcModel: gamma must be >= 0");
    Eigen::LLT<Mat> llt(system_matrix());
    if (llt.info() != Eigen::Success) throw Divergence("ProCrcModel: system matrix not positive definite");
    projection_ = llt.solve(dict_.X().transpose());
  }

  const Dictionary& dictionary() const { return dict_; }
  double lambda() const { return lambda_; }
  double gamma() const { return gamma_; }

  /// X^T X + lambda I + (gamma/K) sum_k (I - E_k) X^T X (I - E_k).
  ///
  /// Entry (i, j) of the sum collects G_ij once for every class that owns
  /// neither column: K - 1 times within a class, K - 2 times across classes.
  Mat system_matrix() const {
    const Mat gram = dict_.X().transpose() * dict_.X();
    const int k = dict_.num_classes();
    Mat m = gram;
    if (gamma_ > 0.0) {
      const double scale = gamma_ / k;
      const auto& labels = dict_.labels();
      for (Eigen::Index j = 0; j < gram.cols(); ++j) {
        for (Eigen::Index i = 0; i < gram.rows(); ++i) {
          const int count = labels[i] == labels[j] ? k - 1 : k - 2;
          m(i, j) += scale * count * gram(i, j);
        }
      }
    }
    m.diagonal().array() += lambda_;
    return m;
  }

  Vec encode(const Vec& y) const {
    detail::require(y.size() == dict_.dim(), "procrc_encode: query dimension mismatch");
    return projection_ * y;
  }

  /// ||X alpha - X_k alpha_k||^2 per class.
  Vec consistency_residuals(const Vec& alpha) const {
    const Vec full = dict_.X() * alpha;
    Vec r(dict_.num_classes());
    for (int c = 0; c < dict_.num_classes(); ++c) {
      const auto& range = dict_.class_ranges()[c];
      r[c] = (full - dict_.class_block(c) * alpha.segment(range.begin, range.size())).squaredNorm();
    }
    return r;
  }

  ClassId classify(const Vec& y) const { return argmin_lowest(consistency_residuals(encode(y))); }

  std::vector<ClassId> classify_batch(const Mat& queries) const {
    std::vector<ClassId> out(static_cast<std::size_t>(queries.cols()));
    for (Eigen::Index j = 0; j < queries.cols(); ++j) out[j] = classify(queries.col(j));
    return out;
  }

 private:
  Dictionary dict_;
  double lambda_ = 1.0;
  double gamma_ = 0.0;
  Mat projection_;  // n x d
};

inline double procrc_cost(const ProCrcModel& model, const Vec& y, const Vec& alpha) {
  const Dictionary& dict = model.dictionary();
  detail::require(y.size() == dict.dim(), "procrc_cost: y has wrong dimension");
  detail::require(alpha.size() == dict.size(), "procrc_cost: alpha has wrong dimension");
  const double base = crc_cost(dict, y, alpha, model.lambda());
  if (model.gamma() == 0.0) return base;
  return base + model.gamma() / dict.num_classes() * model.consistency_residuals(alpha).sum();
}

inline Vec procrc_encode(const ProCrcModel& model, const Vec& y) { return model.encode(y); }

inline ClassId procrc_classify(const ProCrcModel& model, const Vec& y) { return model.classify(y); }

}  // namespace cocokit
