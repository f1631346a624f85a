// Entropy-stratified bigram chains, trigger-token induction data, and corpora.
//
// Convention throughout: row = current token, column = next token.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"

namespace dptlab {

enum class EntropyClass : std::uint8_t { low = 0, medium = 1, high = 2 };

inline const char* to_string(EntropyClass c) {
  switch (c) {
    case EntropyClass::low: return "low";
    case EntropyClass::medium: return "medium";
    case EntropyClass::high: return "high";
  }
  return "?";
}

inline EntropyClass entropy_class_from_string(std::string_view s) {
  if (s == "low") return EntropyClass::low;
  if (s == "medium") return EntropyClass::medium;
  if (s == "high") return EntropyClass::high;
  throw ValidationError("unknown entropy class '" + std::string(s) + "'");
}

// Class boundaries as fractions of log(k) nats.
struct EntropyThresholds {
  double low_fraction = 1.0 / 3.0;
  double high_fraction = 2.0 / 3.0;

  double low_nats(int k) const { return low_fraction * std::log(static_cast<double>(k)); }
  double high_nats(int k) const { return high_fraction * std::log(static_cast<double>(k)); }

  EntropyClass classify(double h, int k) const {
    if (h < low_nats(k)) return EntropyClass::low;
    if (h < high_nats(k)) return EntropyClass::medium;
    return EntropyClass::high;
  }
};

class TransitionMatrix {
 public:
  TransitionMatrix() = default;

  // Validates stochasticity and derives sparsity and entropy class per row.
  static TransitionMatrix from_rows(int k, std::vector<double> probs, EntropyThresholds thr = {}) {
    require(k >= 2, "transition matrix needs k >= 2");
    require(probs.size() == static_cast<std::size_t>(k) * k, "transition matrix must be k*k");
    TransitionMatrix m;
    m.k_ = k;
    m.probs_ = std::move(probs);
    m.thresholds_ = thr;
    m.sparsity_.resize(k);
    m.classes_.resize(k);
    for (int i = 0; i < k; ++i) m.refresh_row(i);
    return m;
  }

  int k() const { return k_; }
  std::span<const double> row(int i) const { return {probs_.data() + static_cast<std::size_t>(i) * k_, static_cast<std::size_t>(k_)}; }
  double operator()(int i, int j) const { return probs_[static_cast<std::size_t>(i) * k_ + j]; }
  const std::vector<double>& data() const { return probs_; }
  int row_sparsity(int i) const { return sparsity_[i]; }
  EntropyClass entropy_class(int i) const { return classes_[i]; }
  const std::vector<EntropyClass>& entropy_classes() const { return classes_; }
  const EntropyThresholds& thresholds() const { return thresholds_; }
  double row_entropy(int i) const { return entropy(row(i)); }

  TransitionMatrix with_row(int i, std::span<const double> values) const {
    TransitionMatrix m = *this;
    std::copy(values.begin(), values.end(), m.probs_.begin() + static_cast<std::ptrdiff_t>(i) * k_);
    m.refresh_row(i);
    return m;
  }

  std::string serialize() const {
    io::Writer w;
    w.put_magic("DPTMAT01");
    w.put<std::int32_t>(k_);
    w.put<double>(thresholds_.low_fraction);
    w.put<double>(thresholds_.high_fraction);
    w.put_array<double>(probs_);
    return w.bytes();
  }

  static TransitionMatrix deserialize(std::string bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("DPTMAT01");
    int k = r.get<std::int32_t>();
    EntropyThresholds thr;
    thr.low_fraction = r.get<double>();
    thr.high_fraction = r.get<double>();
    auto probs = r.get_array<double>();
    return from_rows(k, std::move(probs), thr);
  }

  // Content id used by datasets to reference their generating matrix.
  std::string id() const { return io::sha256_hex(serialize()).substr(0, 16); }

  bool operator==(const TransitionMatrix& o) const { return k_ == o.k_ && probs_ == o.probs_; }

 private:
  void refresh_row(int i) {
    auto r = row(i);
    double sum = 0.0;
    int nnz = 0;
    for (double x : r) {
      require(x >= 0.0 && x <= 1.0, "transition entry outside [0,1] in row " + std::to_string(i));
      sum += x;
      nnz += x > 0.0;
    }
    require(std::abs(sum - 1.0) <= 1e-12, "row " + std::to_string(i) + " does not sum to 1");
    sparsity_[i] = nnz;
    classes_[i] = thresholds_.classify(entropy(r), k_);
  }

  int k_ = 0;
  std::vector<double> probs_;
  std::vector<int> sparsity_;
  std::vector<EntropyClass> classes_;
  EntropyThresholds thresholds_;
};

struct RowPlan {
  EntropyClass cls = EntropyClass::high;
  int support = 0;  // 0 = class default
};

struct MatrixOptions {
  EntropyThresholds thresholds;
  int low_support_min = 3;
  int low_support_max = 5;
  double medium_ratio = 0.7;
  double high_concentration = 50.0;
  double low_margin = 0.02;  // nats kept below the low cutoff when sharpening
};

namespace detail {

inline std::vector<double> normalized(std::vector<double> w) {
  double s = 0.0;
  for (double x : w) s += x;
  for (double& x : w) x /= s;
  return w;
}

inline std::vector<double> powered(const std::vector<double>& w, double gamma) {
  std::vector<double> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = std::pow(w[i], gamma);
  return normalized(std::move(out));
}

inline std::vector<double> geometric(int support, double ratio) {
  std::vector<double> w(support);
  double v = 1.0;
  for (auto& x : w) {
    x = v;
    v *= ratio;
  }
  return normalized(std::move(w));
}

inline std::vector<double> dirichlet(Rng& rng, int n, double concentration) {
  std::vector<double> w(n);
  for (auto& x : w) x = std::max(rng.gamma(concentration), 1e-300);
  return normalized(std::move(w));
}

// Picks `n` distinct tokens uniformly from [0, k).
inline std::vector<int> choose_tokens(Rng& rng, int k, int n) {
  std::vector<int> all(k);
  std::iota(all.begin(), all.end(), 0);
  for (int i = 0; i < n; ++i) {
    auto j = i + static_cast<int>(rng.below(k - i));
    std::swap(all[i], all[j]);
  }
  all.resize(n);
  return all;
}

// Smallest exponent gamma (by doubling, then bisection) with H(w^gamma) < target.
inline std::vector<double> sharpen_below(const std::vector<double>& w, double target) {
  if (entropy(w) < target) return w;
  double lo = 1.0, hi = 2.0;
  while (entropy(powered(w, hi)) >= target) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e6) throw ValidationError("cannot sharpen row below entropy target");
  }
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    (entropy(powered(w, mid)) >= target ? lo : hi) = mid;
  }
  return powered(w, hi);
}

// Geometric ratio in (0,1] whose profile over `support` tokens has entropy `target`.
inline double ratio_for_entropy(int support, double target) {
  double lo = 1e-9, hi = 1.0;
  for (int it = 0; it < 80; ++it) {
    double mid = 0.5 * (lo + hi);
    (entropy(geometric(support, mid)) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Each row gets its own RNG stream keyed by (seed, row), so rows are
// independent of each other's plans.
inline TransitionMatrix build_matrix(int k, std::span<const RowPlan> plan, std::uint64_t seed,
                                     const MatrixOptions& opt = {}) {
  require(k >= 2, "build_matrix: k must be >= 2, got " + std::to_string(k));
  require(plan.size() == static_cast<std::size_t>(k),
          "build_matrix: class plan has " + std::to_string(plan.size()) + " rows, expected " + std::to_string(k));
  const double low_thr = opt.thresholds.low_nats(k);
  const double high_thr = opt.thresholds.high_nats(k);
  std::vector<double> probs(static_cast<std::size_t>(k) * k, 0.0);

  for (int i = 0; i < k; ++i) {
    Rng rng(seed, static_cast<std::uint64_t>(i));
    const RowPlan& rp = plan[i];
    int support = 0;
    std::vector<double> weights;

    switch (rp.cls) {
      case EntropyClass::low: {
        support = rp.support > 0 ? rp.support
                                 : opt.low_support_min + static_cast<int>(rng.below(opt.low_support_max - opt.low_support_min + 1));
        support = std::clamp(support, 1, k);
        weights = support == 1 ? std::vector<double>{1.0} : detail::dirichlet(rng, support, 1.0);
        weights = detail::sharpen_below(weights, low_thr - opt.low_margin);
        break;
      }
      case EntropyClass::medium: {
        support = rp.support > 0 ? std::min(rp.support, k) : (k + 3) / 4;
        double ratio = opt.medium_ratio;
        while (support < k && entropy(detail::geometric(support, ratio)) < low_thr) ++support;
        double h = entropy(detail::geometric(support, ratio));
        if (h < low_thr || h >= high_thr) {
          double target = 0.5 * (low_thr + std::min(high_thr, std::log(static_cast<double>(support))));
          require(std::log(static_cast<double>(support)) > low_thr, "medium row cannot reach the medium entropy band");
          ratio = detail::ratio_for_entropy(support, target);
        }
        weights = detail::geometric(support, ratio);
        break;
      }
      case EntropyClass::high: {
        support = rp.support > 0 ? std::min(rp.support, k) : k;
        weights = detail::dirichlet(rng, support, opt.high_concentration);
        require(entropy(weights) >= high_thr, "high row entropy below threshold; raise concentration or support");
        break;
      }
    }

    auto tokens = detail::choose_tokens(rng, k, support);
    // Renormalize after placement so the row sum is exact to rounding.
    double s = 0.0;
    for (double w : weights) s += w;
    for (int j = 0; j < support; ++j) probs[static_cast<std::size_t>(i) * k + tokens[j]] = weights[j] / s;
  }

  auto m = TransitionMatrix::from_rows(k, std::move(probs), opt.thresholds);
  for (int i = 0; i < k; ++i)
    if (m.entropy_class(i) != plan[i].cls)
      throw ValidationError("row " + std::to_string(i) + " landed in class " + to_string(m.entropy_class(i)) +
                            " instead of " + to_string(plan[i].cls));
  return m;
}

// Class plan with the given row fractions, assigned to rows in a seeded order.
inline std::vector<RowPlan> mixed_plan(int k, double low_fraction, double medium_fraction, std::uint64_t seed) {
  require(low_fraction >= 0 && medium_fraction >= 0 && low_fraction + medium_fraction <= 1.0 + 1e-12,
          "entropy plan fractions must be nonnegative and sum to at most 1");
  int n_low = static_cast<int>(std::lround(low_fraction * k));
  int n_med = std::min(k - n_low, static_cast<int>(std::lround(medium_fraction * k)));
  std::vector<RowPlan> plan(k);
  for (int i = 0; i < k; ++i)
    plan[i].cls = i < n_low ? EntropyClass::low : (i < n_low + n_med ? EntropyClass::medium : EntropyClass::high);
  Rng rng(seed);
  rng.shuffle(plan);
  return plan;
}

// Row `trigger` becomes the one-hot vector on `copy_target`.
inline TransitionMatrix apply_trigger(const TransitionMatrix& m, TokenId trigger, TokenId copy_target) {
  require(trigger >= 0 && trigger < m.k(), "apply_trigger: trigger out of range");
  require(copy_target >= 0 && copy_target < m.k(), "apply_trigger: copy target out of range");
  std::vector<double> onehot(m.k(), 0.0);
  onehot[copy_target] = 1.0;
  return m.with_row(trigger, onehot);
}

struct TriggerSpec {
  std::vector<TokenId> tokens;  // sorted, distinct

  std::size_t count() const { return tokens.size(); }

  bool contains(TokenId t) const { return std::binary_search(tokens.begin(), tokens.end(), t); }

  bool operator==(const TriggerSpec&) const = default;

  void validate(int k) const {
    require(std::is_sorted(tokens.begin(), tokens.end()), "trigger tokens must be sorted");
    require(std::adjacent_find(tokens.begin(), tokens.end()) == tokens.end(), "trigger tokens must be distinct");
    for (auto t : tokens) require(t >= 0 && t < k, "trigger token out of range");
  }

  static TriggerSpec random(int k, int count, std::uint64_t seed) {
    require(count >= 0 && count < k, "trigger count must be in [0, k)");
    Rng rng(seed);
    auto picked = detail::choose_tokens(rng, k, count);
    TriggerSpec spec;
    spec.tokens.assign(picked.begin(), picked.end());
    std::sort(spec.tokens.begin(), spec.tokens.end());
    return spec;
  }
};

enum class CopyTargetPool : std::uint8_t { any = 0, non_trigger = 1 };

struct SamplingOptions {
  CopyTargetPool pool = CopyTargetPool::non_trigger;
  bool per_trigger_targets = false;
  double trigger_boost = 1.0;  // multiplies transition mass into trigger tokens
};

struct SequenceDataset {
  int k = 0;
  int length = 0;
  std::uint64_t seed = 0;
  TriggerSpec triggers;
  std::string source_matrix_id;
  bool per_trigger_targets = false;
  std::vector<TokenId> copy_targets;     // one per sequence
  std::vector<TokenId> trigger_targets;  // n * triggers.count() when per_trigger_targets
  std::vector<TokenId> tokens;           // n * length, row-major

  std::size_t size() const { return copy_targets.size(); }

  std::span<const TokenId> sequence(std::size_t i) const {
    return {tokens.data() + i * static_cast<std::size_t>(length), static_cast<std::size_t>(length)};
  }

  // Target forced after trigger `t` in sequence `i`.
  TokenId target_for(std::size_t i, TokenId t) const {
    if (!per_trigger_targets) return copy_targets[i];
    auto it = std::lower_bound(triggers.tokens.begin(), triggers.tokens.end(), t);
    return trigger_targets[i * triggers.count() + static_cast<std::size_t>(it - triggers.tokens.begin())];
  }

  // Number of trigger occurrences not followed by their target (0 on valid data).
  std::size_t trigger_violations() const {
    std::size_t bad = 0;
    for (std::size_t i = 0; i < size(); ++i) {
      auto s = sequence(i);
      for (int j = 0; j + 1 < length; ++j)
        if (triggers.contains(s[j]) && s[j + 1] != target_for(i, s[j])) ++bad;
    }
    return bad;
  }

  void validate() const {
    require(length >= 2, "sequence length must be >= 2");
    require(tokens.size() == size() * static_cast<std::size_t>(length), "token array does not match n*L");
    for (auto t : tokens) require(t >= 0 && t < k, "token id out of range");
    triggers.validate(k);
    require(trigger_violations() == 0, "trigger occurrence not followed by its copy target");
  }

  std::string serialize() const {
    io::Writer w;
    w.put_magic("DPTSEQ01");
    w.put<std::int32_t>(k);
    w.put<std::int32_t>(length);
    w.put<std::uint64_t>(seed);
    w.put_array<TokenId>(triggers.tokens);
    w.put_string(source_matrix_id);
    w.put<std::uint8_t>(per_trigger_targets);
    w.put_array<TokenId>(copy_targets);
    w.put_array<TokenId>(trigger_targets);
    w.put_array<TokenId>(tokens);
    return w.bytes();
  }

  static SequenceDataset deserialize(std::string bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("DPTSEQ01");
    SequenceDataset d;
    d.k = r.get<std::int32_t>();
    d.length = r.get<std::int32_t>();
    d.seed = r.get<std::uint64_t>();
    d.triggers.tokens = r.get_array<TokenId>();
    d.source_matrix_id = r.get_string();
    d.per_trigger_targets = r.get<std::uint8_t>() != 0;
    d.copy_targets = r.get_array<TokenId>();
    d.trigger_targets = r.get_array<TokenId>();
    d.tokens = r.get_array<TokenId>();
    d.validate();
    return d;
  }

  bool operator==(const SequenceDataset&) const = default;
};

namespace detail {

inline TokenId draw_target(Rng& rng, int k, const TriggerSpec& triggers, CopyTargetPool pool) {
  if (pool == CopyTargetPool::any || triggers.count() == 0) return static_cast<TokenId>(rng.below(k));
  auto n_free = k - static_cast<int>(triggers.count());
  auto idx = static_cast<int>(rng.below(n_free));
  for (TokenId t = 0; t < k; ++t) {
    if (triggers.contains(t)) continue;
    if (idx-- == 0) return t;
  }
  return 0;
}

}  // namespace detail

// Sequence i draws from stream (seed, i), so output is independent of
// generation order.
inline SequenceDataset sample_sequences(const TransitionMatrix& m, const TriggerSpec& triggers, std::size_t n, int length,
                                        std::uint64_t seed, const SamplingOptions& opt = {}) {
  require(n >= 1, "sample_sequences: n must be >= 1");
  require(length >= 2, "sample_sequences: L must be >= 2");
  triggers.validate(m.k());
  const int k = m.k();

  SequenceDataset d;
  d.k = k;
  d.length = length;
  d.seed = seed;
  d.triggers = triggers;
  d.source_matrix_id = m.id();
  d.per_trigger_targets = opt.per_trigger_targets;
  d.copy_targets.resize(n);
  if (opt.per_trigger_targets) d.trigger_targets.resize(n * triggers.count());
  d.tokens.resize(n * static_cast<std::size_t>(length));

  // Boosted rows are shared by all sequences; only trigger rows vary.
  std::vector<double> rows(m.data());
  if (opt.trigger_boost != 1.0 && triggers.count() > 0) {
    for (int i = 0; i < k; ++i) {
      std::span<double> r(rows.data() + static_cast<std::size_t>(i) * k, k);
      for (auto t : triggers.tokens) r[t] *= opt.trigger_boost;
      double s = 0.0;
      for (double x : r) s += x;
      for (double& x : r) x /= s;
    }
  }

  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(seed, s);
    d.copy_targets[s] = detail::draw_target(rng, k, triggers, opt.pool);
    if (opt.per_trigger_targets)
      for (std::size_t t = 0; t < triggers.count(); ++t)
        d.trigger_targets[s * triggers.count() + t] = detail::draw_target(rng, k, triggers, opt.pool);

    TokenId* out = d.tokens.data() + s * static_cast<std::size_t>(length);
    out[0] = static_cast<TokenId>(rng.below(k));
    for (int j = 1; j < length; ++j) {
      TokenId cur = out[j - 1];
      if (triggers.contains(cur)) {
        out[j] = d.target_for(s, cur);
      } else {
        std::span<const double> r(rows.data() + static_cast<std::size_t>(cur) * k, k);
        out[j] = static_cast<TokenId>(rng.categorical(r));
      }
    }
  }
  return d;
}

struct RowCounts {
  int k = 0;
  std::vector<std::int64_t> counts;  // k*k, counts[i*k+j] = n_ij
  std::vector<std::int64_t> totals;  // n_i

  std::int64_t operator()(int i, int j) const { return counts[static_cast<std::size_t>(i) * k + j]; }

  static RowCounts zeros(int k) {
    return {k, std::vector<std::int64_t>(static_cast<std::size_t>(k) * k, 0), std::vector<std::int64_t>(k, 0)};
  }

  void add(TokenId cur, TokenId next) {
    ++counts[static_cast<std::size_t>(cur) * k + next];
    ++totals[cur];
  }
};

inline RowCounts empirical_row_counts(const SequenceDataset& d) {
  require(d.size() > 0, "empirical_row_counts: empty dataset");
  auto rc = RowCounts::zeros(d.k);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto s = d.sequence(i);
    for (int j = 0; j + 1 < d.length; ++j) rc.add(s[j], s[j + 1]);
  }
  return rc;
}

}  // namespace dptlab
