// Held-out evaluation: trigger-copy (induction) accuracy, per-class row KL,
// and sampled pass@k scoring. Models are consumed through a small predictor
// interface so reference predictors and transformers share the same code.
#pragma once

#include <array>
#include <concepts>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"
#include "dptlab/markov.hpp"
#include "dptlab/passk.hpp"
#include "dptlab/transformer.hpp"

namespace dptlab {

// Row j of logits(tokens) scores the token following tokens[0..j].
template <class P>
concept Predictor = requires(const P& p, std::span<const TokenId> s) {
  { p.vocab() } -> std::convertible_to<int>;
  { p.logits(s) } -> std::convertible_to<LogitMatrix>;
};

template <class P>
concept BatchPredictor = Predictor<P> && requires(const P& p, std::span<const TokenId> s, int length) {
  { p.logits_batch(s, length) } -> std::convertible_to<std::vector<LogitMatrix>>;
};

inline std::span<const double> logit_row(const LogitMatrix& m, Eigen::Index j) {
  return {m.data() + j * m.cols(), static_cast<std::size_t>(m.cols())};
}

// Calls fn(sequence_index, logits) for every sequence, in order.
template <Predictor P, class Fn>
void for_each_logits(const P& model, const SequenceDataset& ds, Fn&& fn, std::size_t chunk = 256) {
  require(model.vocab() == ds.k, "evaluation: model vocabulary differs from dataset vocabulary");
  if constexpr (BatchPredictor<P>) {
    for (std::size_t s0 = 0; s0 < ds.size(); s0 += chunk) {
      const auto nb = std::min(chunk, ds.size() - s0);
      std::span<const TokenId> packed(ds.tokens.data() + s0 * ds.length, nb * ds.length);
      auto out = model.logits_batch(packed, ds.length);
      for (std::size_t b = 0; b < nb; ++b) fn(s0 + b, out[b]);
    }
  } else {
    for (std::size_t s = 0; s < ds.size(); ++s) fn(s, model.logits(ds.sequence(s)));
  }
}

class UniformPredictor {
 public:
  explicit UniformPredictor(int k) : k_(k) {}
  int vocab() const { return k_; }
  LogitMatrix logits(std::span<const TokenId> tokens) const {
    return LogitMatrix::Zero(static_cast<Eigen::Index>(tokens.size()), k_);
  }

 private:
  int k_;
};

// Next-token distribution is the matrix row of the current token.
class MatrixPredictor {
 public:
  explicit MatrixPredictor(TransitionMatrix m) : m_(std::move(m)) {}
  int vocab() const { return m_.k(); }
  LogitMatrix logits(std::span<const TokenId> tokens) const {
    const int k = m_.k();
    LogitMatrix out(static_cast<Eigen::Index>(tokens.size()), k);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      auto r = m_.row(tokens[j]);
      for (int v = 0; v < k; ++v) out(static_cast<Eigen::Index>(j), v) = r[v] > 0.0 ? std::log(r[v]) : -kInf;
    }
    return out;
  }

 private:
  TransitionMatrix m_;
};

// Knows the base chain and copies whatever followed an earlier trigger
// occurrence, which recovers the per-sequence copy target exactly.
class InductionOracle {
 public:
  InductionOracle(TransitionMatrix base, TriggerSpec triggers, bool per_trigger_targets = false)
      : base_(std::move(base)), triggers_(std::move(triggers)), per_trigger_(per_trigger_targets) {}

  int vocab() const { return base_.k(); }

  LogitMatrix logits(std::span<const TokenId> tokens) const {
    LogitMatrix out = MatrixPredictor(base_).logits(tokens);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      if (!triggers_.contains(tokens[j])) continue;
      for (std::size_t i = j; i-- > 0;) {
        if (!triggers_.contains(tokens[i]) || (per_trigger_ && tokens[i] != tokens[j])) continue;
        out.row(static_cast<Eigen::Index>(j)).setConstant(-kInf);
        out(static_cast<Eigen::Index>(j), tokens[i + 1]) = 0.0;
        break;
      }
    }
    return out;
  }

 private:
  TransitionMatrix base_;
  TriggerSpec triggers_;
  bool per_trigger_;
};

struct InductionResult {
  std::int64_t correct = 0;         // eligible positions predicted right
  std::int64_t eligible = 0;        // trigger occurrences after the first
  std::int64_t excluded_first = 0;  // first occurrences, excluded from the ratio
  std::int64_t all_correct = 0;     // every occurrence, first included
  std::int64_t all_total = 0;

  std::optional<double> accuracy() const {
    if (eligible == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(eligible);
  }
  std::optional<double> unfiltered_accuracy() const {
    if (all_total == 0) return std::nullopt;
    return static_cast<double>(all_correct) / static_cast<double>(all_total);
  }
};

// Position j is eligible when tokens[j] is a trigger and an earlier occurrence
// (of any trigger, or the same trigger under per-trigger targets) revealed the
// copy target. Scoring is argmax of the model's position-j distribution.
template <Predictor P>
InductionResult induction_accuracy(const P& model, const SequenceDataset& ds) {
  InductionResult r;
  for_each_logits(model, ds, [&](std::size_t s, const LogitMatrix& lg) {
    auto seq = ds.sequence(s);
    std::vector<char> seen(ds.k, 0);
    bool any_seen = false;
    for (int j = 0; j < ds.length; ++j) {
      const TokenId t = seq[j];
      if (!ds.triggers.contains(t)) continue;
      const bool first = ds.per_trigger_targets ? !seen[t] : !any_seen;
      seen[t] = 1;
      any_seen = true;
      const bool hit = static_cast<TokenId>(argmax(logit_row(lg, j))) == ds.target_for(s, t);
      ++r.all_total;
      r.all_correct += hit;
      if (first) {
        ++r.excluded_first;
      } else {
        ++r.eligible;
        r.correct += hit;
      }
    }
  });
  return r;
}

struct RowKL {
  std::vector<double> kl;                // per row; NaN for trigger or unprobed rows
  std::vector<std::int64_t> probes;      // contexts averaged per row
  std::array<double, 3> class_mean{};    // indexed by EntropyClass
  std::array<int, 3> class_rows{};       // rows contributing to each mean
  std::vector<int> unprobed;             // non-trigger rows never seen as current token

  double mean(EntropyClass c) const { return class_mean[static_cast<int>(c)]; }
  int rows(EntropyClass c) const { return class_rows[static_cast<int>(c)]; }
};

// Averages the model's next-token distribution over every eval position whose
// current token is i (trigger rows skipped), then reports KL(pi_i || average).
template <Predictor P>
RowKL row_kl(const P& model, const TransitionMatrix& truth, const SequenceDataset& probes) {
  const int k = truth.k();
  require(probes.k == k, "row_kl: probe vocabulary differs from the true matrix");
  std::vector<KahanSum> acc(static_cast<std::size_t>(k) * k);
  RowKL out;
  out.probes.assign(k, 0);
  std::vector<double> prob(k);
  for_each_logits(model, probes, [&](std::size_t s, const LogitMatrix& lg) {
    auto seq = probes.sequence(s);
    for (int j = 0; j < probes.length; ++j) {
      const TokenId cur = seq[j];
      if (probes.triggers.contains(cur)) continue;
      softmax(logit_row(lg, j), 1.0, prob);
      for (int v = 0; v < k; ++v) acc[static_cast<std::size_t>(cur) * k + v].add(prob[v]);
      ++out.probes[cur];
    }
  });

  out.kl.assign(k, std::numeric_limits<double>::quiet_NaN());
  std::array<KahanSum, 3> sums;
  std::vector<double> avg(k);
  for (int i = 0; i < k; ++i) {
    if (probes.triggers.contains(i)) continue;
    if (out.probes[i] == 0) {
      out.unprobed.push_back(i);
      continue;
    }
    for (int v = 0; v < k; ++v) avg[v] = acc[static_cast<std::size_t>(i) * k + v].value() / static_cast<double>(out.probes[i]);
    out.kl[i] = kl_divergence(truth.row(i), avg);
    const int c = static_cast<int>(truth.entropy_class(i));
    sums[c].add(out.kl[i]);
    ++out.class_rows[c];
  }
  for (int c = 0; c < 3; ++c)
    out.class_mean[c] = out.class_rows[c] > 0 ? sums[c].value() / out.class_rows[c] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

inline constexpr std::size_t kDefaultEvalSize = 4000;

// Held-out sequences drawn from the "eval" seed namespace, so they never share
// a stream with training data drawn from the same base seed.
inline SequenceDataset build_eval_set(const TransitionMatrix& m, const TriggerSpec& triggers, std::uint64_t seed,
                                      std::size_t n = kDefaultEvalSize, int length = 64, const SamplingOptions& opt = {}) {
  return sample_sequences(m, triggers, n, length, derive_seed(seed, "eval"), opt);
}

// Number of sequences in `b` that also appear verbatim in `a`.
inline std::size_t count_overlap(const SequenceDataset& a, const SequenceDataset& b) {
  require(a.length == b.length, "count_overlap: sequence lengths differ");
  auto key = [](std::span<const TokenId> s) { return std::string(reinterpret_cast<const char*>(s.data()), s.size_bytes()); };
  std::unordered_set<std::string> seen;
  seen.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) seen.insert(key(a.sequence(i)));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.size(); ++i) hits += seen.count(key(b.sequence(i)));
  return hits;
}

inline void assert_disjoint(const SequenceDataset& train, const SequenceDataset& eval) {
  auto hits = count_overlap(train, eval);
  if (hits != 0) throw StageError("eval set shares " + std::to_string(hits) + " sequences with the training set");
}

inline std::string dataset_id(const SequenceDataset& d) { return io::sha256_hex(d.serialize()).substr(0, 16); }

struct EvalReport {
  InductionResult induction;
  RowKL kl;
  std::string checkpoint_id;
  std::string eval_set_id;
};

template <Predictor P>
EvalReport evaluate(const P& model, const TransitionMatrix& truth, const SequenceDataset& eval_set, std::string checkpoint_id) {
  return {induction_accuracy(model, eval_set), row_kl(model, truth, eval_set), std::move(checkpoint_id), dataset_id(eval_set)};
}

// --- sampled pass@k --------------------------------------------------------

enum class ItemKind : std::uint8_t { trigger_copy = 0, row_support = 1 };

// One verifiable prediction: the model's next-token distribution at
// (sequence, position) passes if the sampled token lies in `correct`.
struct PassKItem {
  ItemKind kind = ItemKind::trigger_copy;
  std::uint32_t sequence = 0;
  std::int32_t position = 0;
  std::vector<TokenId> correct;  // sorted
};

// Trigger-copy items at every eligible (non-first) trigger occurrence, plus
// row items at positions whose current token has a row of `row_class`.
inline std::vector<PassKItem> build_passk_items(const SequenceDataset& ds, const TransitionMatrix& truth, std::size_t max_copy,
                                                std::size_t max_row, EntropyClass row_class = EntropyClass::medium) {
  std::vector<PassKItem> copy_items, row_items;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    auto seq = ds.sequence(s);
    std::vector<char> seen(ds.k, 0);
    bool any = false;
    for (int j = 0; j < ds.length; ++j) {
      const TokenId t = seq[j];
      if (ds.triggers.contains(t)) {
        const bool first = ds.per_trigger_targets ? !seen[t] : !any;
        seen[t] = 1;
        any = true;
        if (!first && copy_items.size() < max_copy)
          copy_items.push_back({ItemKind::trigger_copy, static_cast<std::uint32_t>(s), j, {ds.target_for(s, t)}});
      } else if (row_items.size() < max_row && truth.entropy_class(t) == row_class) {
        PassKItem it{ItemKind::row_support, static_cast<std::uint32_t>(s), j, {}};
        auto r = truth.row(t);
        for (int v = 0; v < ds.k; ++v)
          if (r[v] > 0.0) it.correct.push_back(v);
        row_items.push_back(std::move(it));
      }
    }
  }
  copy_items.insert(copy_items.end(), std::make_move_iterator(row_items.begin()), std::make_move_iterator(row_items.end()));
  return copy_items;
}

// Item logits gathered once so a temperature sweep only resamples.
struct ItemLogits {
  std::vector<PassKItem> items;
  std::vector<std::vector<double>> logits;
};

template <Predictor P>
ItemLogits gather_item_logits(const P& model, const SequenceDataset& ds, std::vector<PassKItem> items) {
  ItemLogits out{std::move(items), {}};
  out.logits.resize(out.items.size());
  std::vector<std::vector<std::size_t>> by_seq(ds.size());
  for (std::size_t i = 0; i < out.items.size(); ++i) {
    require(out.items[i].sequence < ds.size() && out.items[i].position < ds.length, "pass@k item outside the dataset");
    by_seq[out.items[i].sequence].push_back(i);
  }
  for_each_logits(model, ds, [&](std::size_t s, const LogitMatrix& lg) {
    for (auto i : by_seq[s]) {
      auto r = logit_row(lg, out.items[i].position);
      out.logits[i].assign(r.begin(), r.end());
    }
  });
  return out;
}

// n draws per item at `temperature` (0 = greedy), correct counts, then the
// item-averaged unbiased estimate for each k. Item i uses stream (seed, i).
inline PassKCurve sample_and_score(const ItemLogits& il, const std::vector<int>& ks, int n, double temperature, std::uint64_t seed,
                                   std::optional<ItemKind> only = std::nullopt) {
  require(n >= 1, "sample_and_score: n must be >= 1");
  require(temperature >= 0.0, "sample_and_score: temperature must be >= 0");
  for (int k : ks) require(k >= 1 && k <= n, "sample_and_score: need n >= k for every k");
  std::vector<std::int32_t> correct;
  std::vector<double> prob;
  for (std::size_t i = 0; i < il.items.size(); ++i) {
    const auto& item = il.items[i];
    if (only && item.kind != *only) continue;
    const auto& lg = il.logits[i];
    auto ok = [&](std::size_t tok) {
      return std::binary_search(item.correct.begin(), item.correct.end(), static_cast<TokenId>(tok));
    };
    std::int32_t c = 0;
    if (temperature == 0.0) {
      c = ok(argmax(lg)) ? n : 0;
    } else {
      prob.resize(lg.size());
      softmax(lg, temperature, prob);
      Rng rng(seed, static_cast<std::uint64_t>(i));
      for (int d = 0; d < n; ++d) c += ok(rng.categorical(prob));
    }
    correct.push_back(c);
  }
  return estimated_curve(std::move(correct), n, ks, temperature);
}

template <Predictor P>
PassKCurve sample_and_score(const P& model, const SequenceDataset& ds, std::vector<PassKItem> items, const std::vector<int>& ks, int n,
                            double temperature, std::uint64_t seed) {
  return sample_and_score(gather_item_logits(model, ds, std::move(items)), ks, n, temperature, seed);
}

}  // namespace dptlab
