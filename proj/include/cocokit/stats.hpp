#pragma once

// Significance helpers for win/loss tallies across repeated experiments.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cocokit/error.hpp"

namespace cocokit {

namespace detail {

inline double log_binomial_pmf(long k, long n, double p) {
  const double log_choose = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  // 0 * log(0) contributes nothing.
  const double success = k == 0 ? 0.0 : k * std::log(p);
  const double failure = n - k == 0 ? 0.0 : (n - k) * std::log1p(-p);
  return log_choose + success + failure;
}

// log(sum_{k=lo}^{hi} pmf(k)) by log-sum-exp.
inline double log_binomial_range(long lo, long hi, long n, double p) {
  if (lo > hi) return -std::numeric_limits<double>::infinity();
  double peak = -std::numeric_limits<double>::infinity();
  for (long k = lo; k <= hi; ++k) peak = std::max(peak, log_binomial_pmf(k, n, p));
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (long k = lo; k <= hi; ++k) sum += std::exp(log_binomial_pmf(k, n, p) - peak);
  return peak + std::log(sum);
}

inline void check_binomial_args(long successes, long trials, double null_p) {
  require(trials >= 0, "binomial test: trials must be >= 0");
  require(successes >= -1 && successes <= trials + 1, "binomial test: successes out of range");
  require(null_p > 0.0 && null_p < 1.0, "binomial test: null probability must be in (0, 1)");
}

}  // namespace detail

/// One-sided sign test: P(X >= successes) for X ~ Binomial(trials, null_p).
inline double binomial_sign_test(long successes, long trials, double null_p = 0.5) {
  detail::require(successes >= 0 && successes <= trials, "binomial_sign_test: need 0 <= successes <= trials");
  detail::check_binomial_args(successes, trials, null_p);
  if (successes == 0) return 1.0;
  const double upper = std::exp(detail::log_binomial_range(successes, trials, trials, null_p));
  return std::min(1.0, upper);
}

/// P(X <= successes); successes = -1 gives 0.
inline double binomial_lower_tail(long successes, long trials, double null_p = 0.5) {
  detail::check_binomial_args(successes, trials, null_p);
  detail::require(successes <= trials, "binomial_lower_tail: successes > trials");
  if (successes < 0) return 0.0;
  if (successes == trials) return 1.0;
  return std::min(1.0, std::exp(detail::log_binomial_range(0, successes, trials, null_p)));
}

/// Per-comparison significance level for `comparisons` simultaneous tests.
inline double bonferroni(double alpha, int comparisons) {
  detail::require(comparisons >= 1, "bonferroni: need at least one comparison");
  detail::require(alpha > 0.0 && alpha < 1.0, "bonferroni: alpha must be in (0, 1)");
  return alpha / comparisons;
}

}  // namespace cocokit
