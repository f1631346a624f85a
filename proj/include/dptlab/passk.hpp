// pass@k analytics: the generalized Bayes-optimal binary policy, the
// three-classifier coverage example, and the combinatorial estimator.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dptlab/core.hpp"

namespace dptlab {

struct BinaryTask {
  double p = 0.5;  // P(y = 1 | x)

  void validate() const { require(p >= 0.0 && p <= 1.0, "binary task: p must be in [0,1]"); }
};

struct Policy {
  double alpha = 0.5;  // mass on class 1
  double beta = 0.5;   // mass on class 0

  static Policy of(double alpha) { return {alpha, 1.0 - alpha}; }

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0 && beta >= 0.0 && beta <= 1.0, "policy: masses must be in [0,1]");
    require(std::abs(alpha + beta - 1.0) <= 1e-12, "policy: alpha + beta must equal 1");
  }
};

inline double passk_value(const BinaryTask& task, const Policy& policy, int k) {
  require(k >= 1, "passk_value: k must be >= 1");
  task.validate();
  policy.validate();
  return task.p * (1.0 - std::pow(policy.beta, k)) + (1.0 - task.p) * (1.0 - std::pow(policy.alpha, k));
}

// Multi-class form: sum_y p(y) (1 - (1 - q(y))^k).
inline double passk_categorical(std::span<const double> truth, std::span<const double> policy, int k) {
  require(k >= 1, "passk_categorical: k must be >= 1");
  require(truth.size() == policy.size(), "passk_categorical: size mismatch");
  double v = 0.0;
  for (std::size_t y = 0; y < truth.size(); ++y) v += truth[y] * (1.0 - std::pow(1.0 - policy[y], k));
  return v;
}

// Maximizer of passk_value over alpha. k = 1 gives the classical Bayes rule;
// p in {0, 1} returns the boundary limit alpha = p.
inline double optimal_alpha(double p, int k) {
  require(k >= 1, "optimal_alpha: k must be >= 1");
  require(p >= 0.0 && p <= 1.0, "optimal_alpha: p must be in [0,1]");
  if (p == 0.0 || p == 1.0) return p;
  if (k == 1) return p > 0.5 ? 1.0 : 0.0;
  // r^(1/(k-1)) / (1 + r^(1/(k-1))) is a logistic of the scaled log-odds.
  const double z = (std::log(p) - std::log1p(-p)) / (k - 1);
  return 1.0 / (1.0 + std::exp(-z));
}

inline bool optimal_alpha_is_limit(double p) { return p == 0.0 || p == 1.0; }

// The three-option example: true p = (1/2 + eps, 1/2 - eps, 0).
struct CoverageRow {
  int k = 0;
  double c1 = 0.0;  // all mass on class 0
  double c2 = 0.0;  // half on 0, half on 1
  double c3 = 0.0;  // half on 0, half on 2
};

struct CoverageExample {
  double epsilon = 0.0;
  std::vector<CoverageRow> rows;
};

inline std::vector<double> coverage_truth(double epsilon) { return {0.5 + epsilon, 0.5 - epsilon, 0.0}; }

inline CoverageRow coverage_row(double epsilon, int k) {
  const auto truth = coverage_truth(epsilon);
  const std::vector<double> q1{1.0, 0.0, 0.0}, q2{0.5, 0.5, 0.0}, q3{0.5, 0.0, 0.5};
  return {k, passk_categorical(truth, q1, k), passk_categorical(truth, q2, k), passk_categorical(truth, q3, k)};
}

inline CoverageExample coverage_table(double epsilon, const std::vector<int>& ks) {
  require(epsilon > 0.0 && epsilon < 0.5, "coverage example: epsilon must be in (0, 1/2)");
  CoverageExample ex{epsilon, {}};
  for (int k : ks) ex.rows.push_back(coverage_row(epsilon, k));
  return ex;
}

struct Crossover {
  int k = 0;  // smallest k with C2 > C1
  CoverageExample table;
};

// The first k with 1 - 2^-k > 1/2 + eps, plus the curves for k = 1..max(k, max_k).
inline Crossover crossover_point(double epsilon, int max_k = 32) {
  require(epsilon > 0.0 && epsilon < 0.5, "crossover_point: epsilon must be in (0, 1/2)");
  int k = 1;
  while (!(1.0 - std::ldexp(1.0, -k) > 0.5 + epsilon)) ++k;
  std::vector<int> ks;
  for (int i = 1; i <= std::max(k, max_k); ++i) ks.push_back(i);
  return {k, coverage_table(epsilon, ks)};
}

namespace detail {

// C(n, k) as an exact integer, or nullopt past 2^62.
inline std::optional<std::uint64_t> binomial_exact(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 r = 1;
  for (std::int64_t i = 1; i <= k; ++i) {
    r = r * static_cast<unsigned __int128>(n - k + i) / static_cast<unsigned __int128>(i);
    if (r > (static_cast<unsigned __int128>(1) << 62)) return std::nullopt;
  }
  return static_cast<std::uint64_t>(r);
}

}  // namespace detail

// Unbiased 1 - C(n-c, k) / C(n, k). Exact integer arithmetic while the
// binomials fit, otherwise a log1p product.
inline double estimate_passk(std::int64_t n, std::int64_t c, std::int64_t k) {
  require(n >= 0 && c >= 0 && c <= n, "estimate_passk: need 0 <= c <= n");
  require(k >= 1 && k <= n, "estimate_passk: need 1 <= k <= n");
  if (n - c < k) return 1.0;
  if (c == 0) return 0.0;
  auto all = detail::binomial_exact(n, k);
  if (all) {
    auto miss = *detail::binomial_exact(n - c, k);
    return static_cast<double>(*all - miss) / static_cast<double>(*all);
  }
  // C(n-c,k)/C(n,k) = prod_{i=n-c+1}^{n} (1 - k/i)
  double log_ratio = 0.0;
  for (std::int64_t i = n - c + 1; i <= n; ++i) log_ratio += std::log1p(-static_cast<double>(k) / static_cast<double>(i));
  return -std::expm1(log_ratio);
}

enum class CurveSource : std::uint8_t { analytic = 0, estimated = 1 };

struct PassKPoint {
  int k = 0;
  double value = 0.0;
};

struct PassKCurve {
  CurveSource source = CurveSource::analytic;
  double temperature = 0.0;
  int n = 0;                          // samples per item (estimated curves)
  std::vector<std::int32_t> correct;  // per-item correct counts (estimated curves)
  std::vector<PassKPoint> points;

  double at(int k) const {
    for (const auto& p : points)
      if (p.k == k) return p.value;
    throw ValidationError("pass@k curve has no entry for k=" + std::to_string(k));
  }
};

inline PassKCurve analytic_curve(const BinaryTask& task, const Policy& policy, const std::vector<int>& ks) {
  PassKCurve c;
  for (int k : ks) c.points.push_back({k, passk_value(task, policy, k)});
  return c;
}

// Item-averaged estimated curve from per-item correct counts.
inline PassKCurve estimated_curve(std::vector<std::int32_t> correct, int n, const std::vector<int>& ks, double temperature) {
  require(!correct.empty(), "pass@k curve: no items");
  PassKCurve curve;
  curve.source = CurveSource::estimated;
  curve.temperature = temperature;
  curve.n = n;
  for (int k : ks) {
    require(k >= 1 && k <= n, "pass@k curve: every k must satisfy 1 <= k <= n");
    KahanSum s;
    for (auto c : correct) s.add(estimate_passk(n, c, k));
    curve.points.push_back({k, s.value() / static_cast<double>(correct.size())});
  }
  curve.correct = std::move(correct);
  return curve;
}

}  // namespace dptlab
