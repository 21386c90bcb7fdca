#pragma once

// Collaborative representation classifier: every training column takes part
// in a ridge reconstruction of the query, and the class whose share of the
// code reconstructs the query best (normalized by that share's energy) wins.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "cocokit/error.hpp"
#include "cocokit/linalg.hpp"

namespace cocokit {

using ClassId = int;

/// Feature columns paired with class labels, in any order.
struct LabeledFeatures {
  Mat features;  // d x n
  std::vector<ClassId> labels;

  Eigen::Index size() const { return features.cols(); }
};

/// Half-open column span [begin, end) owned by one class.
struct ColumnRange {
  Eigen::Index begin = 0;
  Eigen::Index end = 0;
  Eigen::Index size() const { return end - begin; }
};

/// Training features with class-contiguous columns.
class Dictionary {
 public:
  Dictionary() = default;

  /// Columns are stably reordered so that each class occupies one contiguous
  /// range. Labels must cover 0..c-1 with no gaps.
  Dictionary(const Mat& features, std::span<const ClassId> labels) {
    detail::require(features.cols() == static_cast<Eigen::Index>(labels.size()),
                    "Dictionary: column count must equal label count");
    detail::require(features.cols() >= 1 && features.rows() >= 1, "Dictionary: empty feature matrix");
    require_finite(features, "Dictionary");
    const ClassId max_label = *std::max_element(labels.begin(), labels.end());
    const ClassId min_label = *std::min_element(labels.begin(), labels.end());
    detail::require(min_label >= 0, "Dictionary: negative label");
    const int classes = max_label + 1;

    std::vector<Eigen::Index> order(labels.size());
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return labels[a] < labels[b]; });

    x_.resize(features.rows(), features.cols());
    labels_.resize(labels.size());
    source_index_ = order;
    for (std::size_t j = 0; j < order.size(); ++j) {
      x_.col(static_cast<Eigen::Index>(j)) = features.col(order[j]);
      labels_[j] = labels[order[j]];
    }
    ranges_.assign(static_cast<std::size_t>(classes), ColumnRange{});
    Eigen::Index j = 0;
    for (int c = 0; c < classes; ++c) {
      ranges_[c].begin = j;
      while (j < static_cast<Eigen::Index>(labels_.size()) && labels_[j] == c) ++j;
      ranges_[c].end = j;
      if (ranges_[c].size() == 0) throw InvalidArgument("Dictionary: class " + std::to_string(c) + " has no columns");
    }
  }

  explicit Dictionary(const LabeledFeatures& lf) : Dictionary(lf.features, lf.labels) {}

  const Mat& X() const { return x_; }
  const std::vector<ClassId>& labels() const { return labels_; }
  const std::vector<ColumnRange>& class_ranges() const { return ranges_; }
  /// Column j of X() came from column source_index()[j] of the input.
  const std::vector<Eigen::Index>& source_index() const { return source_index_; }

  Eigen::Index dim() const { return x_.rows(); }
  Eigen::Index size() const { return x_.cols(); }
  int num_classes() const { return static_cast<int>(ranges_.size()); }

  auto class_block(int c) const { return x_.middleCols(ranges_[c].begin, ranges_[c].size()); }

 private:
  Mat x_;
  std::vector<ClassId> labels_;
  std::vector<ColumnRange> ranges_;
  std::vector<Eigen::Index> source_index_;
};

/// ||y - X alpha||^2 + lambda ||alpha||^2
inline double crc_cost(const Dictionary& dict, const Vec& y, const Vec& alpha, double lambda) {
  detail::require(y.size() == dict.dim(), "crc_cost: y has wrong dimension");
  detail::require(alpha.size() == dict.size(), "crc_cost: alpha has wrong dimension");
  return (y - dict.X() * alpha).squaredNorm() + lambda * alpha.squaredNorm();
}

/// Ridge code (X^T X + lambda I)^-1 X^T y for every column of `queries`.
inline Mat crc_encode_batch(const Dictionary& dict, const Mat& queries, double lambda) {
  detail::require(lambda > 0.0, "crc_encode: lambda must be > 0");
  detail::require(queries.rows() == dict.dim(), "crc_encode: query dimension mismatch");
  return ridge_gram_inverse_apply(dict.X(), 1.0, lambda, dict.X().transpose() * queries);
}

inline Vec crc_encode(const Dictionary& dict, const Vec& y, double lambda) {
  return crc_encode_batch(dict, y, lambda).col(0);
}

/// Per-class residual ||y - X_i alpha_i||^2 / ||alpha_i||^2. A class whose
/// code block is exactly zero gets +infinity.
inline Vec class_residuals(const Dictionary& dict, const Vec& y, const Vec& alpha) {
  detail::require(y.size() == dict.dim(), "class_residuals: y has wrong dimension");
  detail::require(alpha.size() == dict.size(), "class_residuals: alpha has wrong dimension");
  Vec r(dict.num_classes());
  for (int c = 0; c < dict.num_classes(); ++c) {
    const auto& range = dict.class_ranges()[c];
    const auto a = alpha.segment(range.begin, range.size());
    const double energy = a.squaredNorm();
    if (energy == 0.0) {
      r[c] = std::numeric_limits<double>::infinity();
      continue;
    }
    r[c] = (y - dict.class_block(c) * a).squaredNorm() / energy;
  }
  return r;
}

/// Index of the smallest entry, lowest index on ties. NaN entries never win.
inline ClassId argmin_lowest(const Vec& v) {
  ClassId best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  bool found = false;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!found || v[i] < best_value) {
      if (std::isnan(v[i])) continue;
      best = static_cast<ClassId>(i);
      best_value = v[i];
      found = true;
    }
  }
  return best;
}

/// Dictionary plus regularizer, with the ridge projection (X^T X + lambda I)^-1 X^T
/// cached so that classification is a matrix-vector product.
class CrcModel {
 public:
  CrcModel() = default;
  CrcModel(Dictionary dict, double lambda) : dict_(std::move(dict)), lambda_(lambda) {
    detail::require(lambda_ > 0.0 && std::isfinite(lambda_), "CrcModel: lambda must be > 0");
    projection_ = ridge_gram_inverse_apply(dict_.X(), 1.0, lambda_, dict_.X().transpose());
  }

  const Dictionary& dictionary() const { return dict_; }
  double lambda() const { return lambda_; }

  Vec encode(const Vec& y) const {
    detail::require(y.size() == dict_.dim(), "CrcModel::encode: query dimension mismatch");
    return projection_ * y;
  }

  ClassId classify(const Vec& y) const { return argmin_lowest(class_residuals(dict_, y, encode(y))); }

  std::vector<ClassId> classify_batch(const Mat& queries) const {
    std::vector<ClassId> out(static_cast<std::size_t>(queries.cols()));
    for (Eigen::Index j = 0; j < queries.cols(); ++j) out[j] = classify(queries.col(j));
    return out;
  }

 private:
  Dictionary dict_;
  double lambda_ = 1.0;
  Mat projection_;  // n x d
};

inline ClassId crc_classify(const CrcModel& model, const Vec& y) { return model.classify(y); }

inline double accuracy_percent(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  detail::require(predicted.size() == truth.size() && !truth.empty(), "accuracy: empty or mismatched sets");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// Picks the grid value with the highest validation accuracy (first one on
/// ties), then runs up to 20 golden-section steps on log(lambda) between the
/// winner's neighbours in the sorted grid. A refined value replaces the grid
/// winner only if it is strictly more accurate.
inline double tune_lambda(const Dictionary& dict, const LabeledFeatures& validation,
                          std::span<const double> grid) {
  detail::require(!grid.empty(), "tune_lambda: empty grid");
  detail::require(validation.size() > 0, "tune_lambda: empty validation set");
  detail::require(validation.labels.size() == static_cast<std::size_t>(validation.size()),
                  "tune_lambda: validation labels mismatch");
  for (double l : grid) detail::require(l > 0.0, "tune_lambda: grid values must be > 0");

  auto score = [&](double lambda) {
    CrcModel model(dict, lambda);
    return accuracy_percent(model.classify_batch(validation.features), validation.labels);
  };

  double best_lambda = grid[0];
  double best_acc = -1.0;
  for (double l : grid) {
    const double acc = score(l);
    if (acc > best_acc) {
      best_acc = acc;
      best_lambda = l;
    }
  }
  if (grid.size() < 2 || best_acc >= 100.0) return best_lambda;

  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const auto pos = std::lower_bound(sorted.begin(), sorted.end(), best_lambda) - sorted.begin();
  double lo = std::log(sorted[pos > 0 ? pos - 1 : pos]);
  double hi = std::log(sorted[pos + 1 < static_cast<long>(sorted.size()) ? pos + 1 : pos]);
  if (hi <= lo) return best_lambda;

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - inv_phi * (hi - lo);
  double b = lo + inv_phi * (hi - lo);
  double fa = score(std::exp(a));
  double fb = score(std::exp(b));
  auto consider = [&](double log_l, double acc) {
    if (acc > best_acc) {
      best_acc = acc;
      best_lambda = std::exp(log_l);
    }
  };
  consider(a, fa);
  consider(b, fb);
  for (int step = 2; step < 20; ++step) {
    if (fa >= fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = score(std::exp(a));
      consider(a, fa);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = score(std::exp(b));
      consider(b, fb);
    }
  }
  return best_lambda;
}

}  // namespace cocokit
