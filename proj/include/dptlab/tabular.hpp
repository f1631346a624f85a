// Tabular bigram estimators (from scratch vs. distilled) and the Monte-Carlo
// machinery behind their sample-complexity comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/markov.hpp"

namespace dptlab {

struct ScratchEstimate {
  TransitionMatrix matrix;
  RowCounts counts;
  std::vector<int> unseen_rows;  // rows with n_i = 0, filled uniformly
};

struct DistillEstimate {
  TransitionMatrix matrix;
  std::vector<int> observed_rows;
  std::string teacher_id;
};

namespace detail {

inline void fill_uniform(std::vector<double>& probs, int k, int row) {
  for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(row) * k + j] = 1.0 / k;
}

}  // namespace detail

// Maximum-likelihood rows n_ij / n_i; unseen rows fall back to uniform.
inline ScratchEstimate fit_scratch(const RowCounts& counts) {
  const int k = counts.k;
  require(counts.counts.size() == static_cast<std::size_t>(k) * k && counts.totals.size() == static_cast<std::size_t>(k),
          "fit_scratch: counts must be k x k");
  std::vector<double> probs(static_cast<std::size_t>(k) * k, 0.0);
  ScratchEstimate est;
  for (int i = 0; i < k; ++i) {
    if (counts.totals[i] == 0) {
      est.unseen_rows.push_back(i);
      detail::fill_uniform(probs, k, i);
      continue;
    }
    const auto n = static_cast<double>(counts.totals[i]);
    for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] = static_cast<double>(counts(i, j)) / n;
  }
  est.matrix = TransitionMatrix::from_rows(k, std::move(probs));
  est.counts = counts;
  return est;
}

// Rows of every observed current token are copied verbatim from the teacher.
inline DistillEstimate fit_distill(std::span<const int> observed_rows, const TransitionMatrix& teacher) {
  const int k = teacher.k();
  std::vector<char> seen(k, 0);
  for (int i : observed_rows) {
    require(i >= 0 && i < k, "fit_distill: observed token out of range");
    seen[i] = 1;
  }
  std::vector<double> probs(static_cast<std::size_t>(k) * k);
  DistillEstimate est;
  for (int i = 0; i < k; ++i) {
    if (seen[i]) {
      est.observed_rows.push_back(i);
      auto r = teacher.row(i);
      std::copy(r.begin(), r.end(), probs.begin() + static_cast<std::ptrdiff_t>(i) * k);
    } else {
      detail::fill_uniform(probs, k, i);
    }
  }
  est.matrix = TransitionMatrix::from_rows(k, std::move(probs), teacher.thresholds());
  est.teacher_id = teacher.id();
  return est;
}

inline DistillEstimate fit_distill(const SequenceDataset& data, const TransitionMatrix& teacher) {
  require(data.size() == 0 || data.k == teacher.k(), "fit_distill: vocabulary size mismatch between dataset and teacher");
  std::vector<int> observed;
  std::vector<char> seen(teacher.k(), 0);
  for (std::size_t s = 0; s < data.size(); ++s) {
    auto seq = data.sequence(s);
    for (int j = 0; j + 1 < data.length; ++j) seen[seq[j]] = 1;
  }
  for (int i = 0; i < teacher.k(); ++i)
    if (seen[i]) observed.push_back(i);
  return fit_distill(observed, teacher);
}

// Uniform draws over k coupons until each has at least `copies` copies.
inline std::int64_t coupon_trial(int k, int copies, std::uint64_t seed) {
  require(k >= 1 && copies >= 1, "coupon_trial: k and copies must be >= 1");
  Rng rng(seed);
  std::vector<int> have(k, 0);
  int incomplete = k;
  std::int64_t draws = 0;
  while (incomplete > 0) {
    auto c = rng.below(k);
    ++draws;
    if (++have[c] == copies) --incomplete;
  }
  return draws;
}

// k * H_k, the expected single-copy collection time.
inline double coupon_expected_draws(int k) {
  double h = 0.0;
  for (int i = 1; i <= k; ++i) h += 1.0 / i;
  return k * h;
}

// Draw threshold k log k + k log(1/delta) exceeded with probability < delta.
inline double coupon_tail_threshold(int k, double delta) {
  return k * std::log(static_cast<double>(k)) + k * std::log(1.0 / delta);
}

// Markov-inequality threshold for m copies of every coupon.
inline double coupon_multi_threshold(int k, int m, double delta) {
  double kk = k;
  return (kk * std::log(kk) + (m - 1) * kk * std::log(std::log(kk))) / delta;
}

// L1 error of the empirical row after exactly `n` draws from `row`.
inline double mle_row_error(std::span<const double> row, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int64_t> counts(row.size(), 0);
  for (int t = 0; t < n; ++t) ++counts[rng.categorical(row)];
  double err = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) err += std::abs(static_cast<double>(counts[j]) / n - row[j]);
  return err;
}

// Matrix whose rows each carry `p` nonzeros with Dirichlet(1) weights.
inline TransitionMatrix sparse_random_matrix(int k, int p, std::uint64_t seed) {
  require(p >= 1 && p <= k, "sparse_random_matrix: need 1 <= p <= k");
  std::vector<double> probs(static_cast<std::size_t>(k) * k, 0.0);
  for (int i = 0; i < k; ++i) {
    Rng rng(seed, static_cast<std::uint64_t>(i));
    auto w = p == 1 ? std::vector<double>{1.0} : detail::dirichlet(rng, p, 1.0);
    auto tok = detail::choose_tokens(rng, k, p);
    double s = 0.0;
    for (double x : w) s += x;
    for (int j = 0; j < p; ++j) probs[static_cast<std::size_t>(i) * k + tok[j]] = w[j] / s;
  }
  return TransitionMatrix::from_rows(k, std::move(probs));
}

enum class Estimator : std::uint8_t { scratch = 0, distill = 1 };

inline const char* to_string(Estimator e) { return e == Estimator::scratch ? "scratch" : "distill"; }

struct ComplexityTrial {
  int k = 0;
  int p = 0;
  double epsilon = 0.0;
  double delta = 0.0;
  Estimator estimator = Estimator::scratch;
  std::int64_t samples_used = 0;
  std::vector<double> achieved_error;  // per row, trial-averaged L1
  std::vector<double> error_stderr;    // per row
  bool success = false;                // every row's mean L1 <= epsilon
};

// One line of the emitted sweep table.
struct SweepRecord {
  int k = 0;
  int p = 0;
  double epsilon = 0.0;
  std::int64_t n_samples = 0;
  int trial = 0;
  Estimator estimator = Estimator::scratch;
  double mean_l1 = 0.0;  // averaged over rows within the trial
  bool success = false;  // every row within epsilon in this trial
};

struct SweepConfig {
  int k = 64;
  int p = 64;
  double epsilon = 0.2;
  double delta = 0.1;
  std::vector<std::int64_t> grid;
  int trials = 20;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::vector<ComplexityTrial> points;  // scratch, distill per grid point
  std::vector<SweepRecord> records;

  // Smallest grid size at which the estimator succeeds; -1 if never.
  std::int64_t first_success(Estimator e) const {
    for (const auto& pt : points)
      if (pt.estimator == e && pt.success) return pt.samples_used;
    return -1;
  }
};

// Length-2 sequences: first token uniform, second from its row. The teacher
// handed to the distilled estimator is the true matrix.
inline SweepResult run_complexity_sweep(const SweepConfig& cfg) {
  require(!cfg.grid.empty(), "complexity sweep: sample grid is empty");
  require(cfg.epsilon > 0.0 && cfg.epsilon <= 2.0, "complexity sweep: epsilon must be in (0,2]");
  require(cfg.trials >= 1, "complexity sweep: trials must be >= 1");
  const int k = cfg.k;
  const auto truth = sparse_random_matrix(k, cfg.p, derive_seed(cfg.seed, "sweep.matrix"));
  SweepResult res;

  for (std::size_t g = 0; g < cfg.grid.size(); ++g) {
    const auto n = cfg.grid[g];
    require(n >= 1, "complexity sweep: grid sizes must be >= 1");
    std::vector<std::vector<double>> errs[2];
    errs[0].assign(k, {});
    errs[1].assign(k, {});

    for (int t = 0; t < cfg.trials; ++t) {
      Rng rng(derive_seed(cfg.seed, "sweep.samples"), g * 1000003ULL + static_cast<std::uint64_t>(t));
      auto counts = RowCounts::zeros(k);
      for (std::int64_t s = 0; s < n; ++s) {
        auto cur = static_cast<TokenId>(rng.below(k));
        auto nxt = static_cast<TokenId>(rng.categorical(truth.row(cur)));
        counts.add(cur, nxt);
      }
      std::vector<int> observed;
      for (int i = 0; i < k; ++i)
        if (counts.totals[i] > 0) observed.push_back(i);
      const TransitionMatrix est[2] = {fit_scratch(counts).matrix, fit_distill(observed, truth).matrix};

      for (int e = 0; e < 2; ++e) {
        SweepRecord rec{k, cfg.p, cfg.epsilon, n, t, static_cast<Estimator>(e), 0.0, true};
        double total = 0.0;
        for (int i = 0; i < k; ++i) {
          double d = l1_distance(est[e].row(i), truth.row(i));
          errs[e][i].push_back(d);
          total += d;
          rec.success = rec.success && d <= cfg.epsilon;
        }
        rec.mean_l1 = total / k;
        res.records.push_back(rec);
      }
    }

    for (int e = 0; e < 2; ++e) {
      ComplexityTrial pt;
      pt.k = k;
      pt.p = cfg.p;
      pt.epsilon = cfg.epsilon;
      pt.delta = cfg.delta;
      pt.estimator = static_cast<Estimator>(e);
      pt.samples_used = n;
      pt.success = true;
      for (int i = 0; i < k; ++i) {
        auto ms = mean_stderr(errs[e][i]);
        pt.achieved_error.push_back(ms.mean);
        pt.error_stderr.push_back(ms.stderr_);
        pt.success = pt.success && ms.mean <= cfg.epsilon;
      }
      res.points.push_back(std::move(pt));
    }
  }
  return res;
}

}  // namespace dptlab
