// Training objectives: hard-label cross-entropy mixed with teacher soft labels,
// entropy-based token routing, and sparsified (top-k / sampled-k) labels.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"
#include "dptlab/transformer.hpp"

namespace dptlab {

enum class SparsityMode : std::uint8_t { dense = 0, top_k = 1, sample_k = 2 };

inline const char* to_string(SparsityMode m) {
  switch (m) {
    case SparsityMode::dense: return "dense";
    case SparsityMode::top_k: return "top-k";
    case SparsityMode::sample_k: return "sample-k";
  }
  return "?";
}

inline SparsityMode sparsity_mode_from_string(std::string_view s) {
  if (s == "dense") return SparsityMode::dense;
  if (s == "top-k") return SparsityMode::top_k;
  if (s == "sample-k") return SparsityMode::sample_k;
  throw ValidationError("unknown sparsity mode '" + std::string(s) + "' (expected dense, top-k or sample-k)");
}

struct LossSpec {
  double alpha = 0.5;
  double temperature = 2.0;
  double routing_fraction = 0.0;
  SparsityMode sparsity_mode = SparsityMode::dense;
  int sparsity_k = 0;           // 0 = all
  bool classical = false;       // temper the student too and scale by T^2
  bool rescale_routed = false;  // routed positions use weight 1 on the hard term

  void validate(int vocab) const {
    require(alpha >= 0.0 && alpha <= 1.0, "loss: alpha must be in [0,1]");
    require(temperature > 0.0, "loss: temperature must be > 0");
    require(routing_fraction >= 0.0 && routing_fraction <= 1.0, "loss: routing fraction must be in [0,1]");
    require(sparsity_k >= 0 && sparsity_k <= vocab, "loss: sparsity_k exceeds vocabulary");
  }
};

// Teacher distributions for the supervised positions of one sequence:
// entry j is the target for the prediction made at position j.
struct SoftLabelField {
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::int32_t> index;
  std::vector<double> prob;
  std::vector<double> entropy;
  std::string teacher_id;
  double temperature = 1.0;

  std::size_t size() const { return entropy.size(); }
  std::size_t nnz(std::size_t j) const { return offsets[j + 1] - offsets[j]; }
  std::span<const std::int32_t> indices(std::size_t j) const { return {index.data() + offsets[j], nnz(j)}; }
  std::span<const double> probs(std::size_t j) const { return {prob.data() + offsets[j], nnz(j)}; }

  void push(std::span<const std::int32_t> idx, std::span<const double> p) {
    index.insert(index.end(), idx.begin(), idx.end());
    prob.insert(prob.end(), p.begin(), p.end());
    offsets.push_back(static_cast<std::uint32_t>(index.size()));
    entropy.push_back(dptlab::entropy(p));
  }

  void push_dense(std::span<const double> p) {
    std::vector<std::int32_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), 0);
    push(idx, p);
  }

  std::vector<double> dense(std::size_t j, int vocab) const {
    std::vector<double> out(vocab, 0.0);
    auto idx = indices(j);
    auto p = probs(j);
    for (std::size_t m = 0; m < idx.size(); ++m) out[idx[m]] = p[m];
    return out;
  }

  void validate(int vocab, int max_nnz = 0) const {
    require(offsets.size() == entropy.size() + 1, "soft labels: offsets/entropy mismatch");
    for (std::size_t j = 0; j < size(); ++j) {
      double s = 0.0;
      for (auto i : indices(j)) require(i >= 0 && i < vocab, "soft labels: index out of range");
      for (double p : probs(j)) {
        require(p >= 0.0, "soft labels: negative probability");
        s += p;
      }
      require(std::abs(s - 1.0) <= 1e-9, "soft labels: position " + std::to_string(j) + " does not sum to 1");
      require(max_nnz == 0 || nnz(j) <= static_cast<std::size_t>(max_nnz), "soft labels: too many nonzeros");
      require(std::abs(dptlab::entropy(probs(j)) - entropy[j]) <= 1e-9, "soft labels: stored entropy is stale");
    }
  }

  bool operator==(const SoftLabelField&) const = default;
};

// Labels from per-position logits: rows 0..t-2 of an t-row logit matrix.
inline SoftLabelField soft_labels_from_logits(const LogitMatrix& logits, std::size_t positions, double temperature,
                                              std::string teacher_id = {}) {
  require(temperature > 0.0, "soft labels: temperature must be > 0");
  require(static_cast<std::size_t>(logits.rows()) >= positions, "soft labels: not enough logit rows");
  SoftLabelField f;
  f.teacher_id = std::move(teacher_id);
  f.temperature = temperature;
  std::vector<double> z(logits.cols()), p(logits.cols());
  for (std::size_t j = 0; j < positions; ++j) {
    for (Eigen::Index m = 0; m < logits.cols(); ++m) z[m] = logits(static_cast<Eigen::Index>(j), m);
    softmax(z, temperature, p);
    f.push_dense(p);
  }
  return f;
}

// s_{j+1} = softmax(teacher_logits(x_<=j) / T) for every supervised position.
template <class Scalar>
SoftLabelField teacher_soft_labels(const ModelParams<Scalar>& teacher, std::span<const TokenId> tokens, double temperature,
                                   std::string teacher_id = {}) {
  require(tokens.size() >= 2, "teacher_soft_labels: need at least two tokens");
  return soft_labels_from_logits(forward_logits(teacher, tokens), tokens.size() - 1, temperature, std::move(teacher_id));
}

// The floor(x * n) supervised positions with the lowest label entropy,
// ties by position; returned in ascending position order.
inline std::vector<std::size_t> route_tokens(const SoftLabelField& labels, double fraction) {
  require(fraction >= 0.0 && fraction <= 1.0, "route_tokens: fraction must be in [0,1]");
  const std::size_t n = labels.size();
  auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  count = std::min(count, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels.entropy[a] < labels.entropy[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

// Keeps k tokens per position and renormalizes. sparsity_k = 0 means all.
// Sampled mode draws without replacement by sequential renormalized draws
// from stream (seed, position).
inline SoftLabelField sparsify_labels(const SoftLabelField& in, SparsityMode mode, int k, std::uint64_t seed, int vocab) {
  require(k >= 0 && k <= vocab, "sparsify_labels: k exceeds vocabulary");
  if (mode == SparsityMode::dense || k == 0) return in;
  SoftLabelField out;
  out.teacher_id = in.teacher_id;
  out.temperature = in.temperature;
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < in.size(); ++j) {
    auto idx = in.indices(j);
    auto p = in.probs(j);
    keep.clear();
    if (mode == SparsityMode::top_k) {
      std::vector<std::size_t> order(idx.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return p[a] > p[b] || (p[a] == p[b] && idx[a] < idx[b]);
      });
      for (std::size_t m = 0; m < order.size() && keep.size() < static_cast<std::size_t>(k); ++m)
        if (p[order[m]] > 0.0) keep.push_back(order[m]);
    } else {
      Rng rng(seed, j);
      std::vector<double> w(p.begin(), p.end());
      for (int draw = 0; draw < k; ++draw) {
        double rest = 0.0;
        for (double x : w) rest += x;
        if (rest <= 0.0) break;
        auto m = rng.categorical(w);
        keep.push_back(m);
        w[m] = 0.0;
      }
    }
    std::sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return idx[a] < idx[b]; });
    std::vector<std::int32_t> ki;
    std::vector<double> kp;
    double total = 0.0;
    for (auto m : keep) total += p[m];
    for (auto m : keep) {
      ki.push_back(idx[m]);
      kp.push_back(p[m] / total);
    }
    out.push(ki, kp);
  }
  return out;
}

struct PositionLoss {
  double hard = 0.0;  // weighted hard-label term
  double soft = 0.0;  // weighted distillation term (0 when routed)
  bool routed = false;
  double total() const { return hard + soft; }
};

struct SequenceLoss {
  double loss = 0.0;  // mean over supervised positions
  std::vector<PositionLoss> positions;
};

// Loss for one sequence of t tokens (t-1 supervised positions). `logits` has
// at least t-1 rows; `labels` may be null when alpha = 0. When `dlogits` is
// given, d(loss)/d(logits) scaled by `grad_scale` is written into its first
// t-1 rows (remaining rows are zeroed).
template <class Derived>
SequenceLoss distill_loss(const LogitMatrix& logits, std::span<const TokenId> targets, const SoftLabelField* labels,
                          const LossSpec& spec, Eigen::MatrixBase<Derived>* dlogits = nullptr, double grad_scale = 1.0) {
  const auto n = targets.size();
  const auto vocab = static_cast<int>(logits.cols());
  spec.validate(vocab);
  require(static_cast<std::size_t>(logits.rows()) >= n, "distill_loss: fewer logit rows than targets");
  const bool use_soft = spec.alpha > 0.0;
  require(!use_soft || labels != nullptr, "distill_loss: alpha > 0 requires soft labels");
  require(!use_soft || labels->size() == n, "distill_loss: soft label count differs from target count");
  require(n >= 1, "distill_loss: no supervised positions");

  std::vector<char> routed(n, 0);
  if (use_soft && spec.routing_fraction > 0.0)
    for (auto j : route_tokens(*labels, spec.routing_fraction)) routed[j] = 1;

  SequenceLoss out;
  out.positions.resize(n);
  if (dlogits) dlogits->derived().setZero();
  std::vector<double> logp(vocab), prob(vocab), logq(vocab), q(vocab);
  const double T = spec.temperature;
  const double inv_n = 1.0 / static_cast<double>(n);
  KahanSum acc;

  for (std::size_t j = 0; j < n; ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    require(targets[j] >= 0 && targets[j] < vocab, "distill_loss: target out of range");
    double mx = -kInf;
    for (int m = 0; m < vocab; ++m) mx = std::max(mx, logits(r, m));
    double z = 0.0;
    for (int m = 0; m < vocab; ++m) z += std::exp(logits(r, m) - mx);
    const double lse = mx + std::log(z);
    for (int m = 0; m < vocab; ++m) {
      logp[m] = logits(r, m) - lse;
      prob[m] = std::exp(logp[m]);
    }

    auto& pl = out.positions[j];
    pl.routed = routed[j] != 0;
    const double w_hard = (pl.routed && spec.rescale_routed) ? 1.0 : 1.0 - spec.alpha;
    const double w_soft = (use_soft && !pl.routed) ? spec.alpha : 0.0;
    pl.hard = -w_hard * logp[targets[j]];

    if (w_soft > 0.0 && spec.classical) {
      double mq = -kInf;
      for (int m = 0; m < vocab; ++m) mq = std::max(mq, logits(r, m) / T);
      double zq = 0.0;
      for (int m = 0; m < vocab; ++m) zq += std::exp(logits(r, m) / T - mq);
      for (int m = 0; m < vocab; ++m) {
        logq[m] = logits(r, m) / T - mq - std::log(zq);
        q[m] = std::exp(logq[m]);
      }
    }

    double ce_soft = 0.0;
    if (w_soft > 0.0) {
      auto idx = labels->indices(j);
      auto sp = labels->probs(j);
      const auto& lp = spec.classical ? logq : logp;
      for (std::size_t m = 0; m < idx.size(); ++m)
        if (sp[m] > 0.0) ce_soft -= sp[m] * lp[idx[m]];
      pl.soft = spec.classical ? w_soft * T * T * ce_soft : w_soft * ce_soft;
    }
    acc.add(pl.total());

    if (dlogits) {
      auto& D = dlogits->derived();
      const double g = grad_scale * inv_n;
      for (int m = 0; m < vocab; ++m) D(r, m) = static_cast<typename Derived::Scalar>(g * w_hard * prob[m]);
      D(r, targets[j]) -= static_cast<typename Derived::Scalar>(g * w_hard);
      if (w_soft > 0.0) {
        auto idx = labels->indices(j);
        auto sp = labels->probs(j);
        double smass = 0.0;
        for (double s : sp) smass += s;
        if (spec.classical) {
          const double c = g * w_soft * T;
          for (int m = 0; m < vocab; ++m) D(r, m) += static_cast<typename Derived::Scalar>(c * smass * q[m]);
          for (std::size_t m = 0; m < idx.size(); ++m) D(r, idx[m]) -= static_cast<typename Derived::Scalar>(c * sp[m]);
        } else {
          const double c = g * w_soft;
          for (int m = 0; m < vocab; ++m) D(r, m) += static_cast<typename Derived::Scalar>(c * smass * prob[m]);
          for (std::size_t m = 0; m < idx.size(); ++m) D(r, idx[m]) -= static_cast<typename Derived::Scalar>(c * sp[m]);
        }
      }
    }
  }
  out.loss = acc.value() * inv_n;
  return out;
}

inline SequenceLoss distill_loss(const LogitMatrix& logits, std::span<const TokenId> targets, const SoftLabelField* labels,
                                 const LossSpec& spec) {
  return distill_loss<LogitMatrix>(logits, targets, labels, spec, nullptr);
}

// Next-token targets x_{j+1} for a sequence.
inline std::vector<TokenId> shifted_targets(std::span<const TokenId> tokens) {
  return {tokens.begin() + 1, tokens.end()};
}

// Soft-label cache: one record per (sequence, position).
struct LabelCache {
  std::string teacher_id;
  double temperature = 1.0;
  int vocab = 0;
  SparsityMode mode = SparsityMode::dense;
  int sparsity_k = 0;
  std::vector<SoftLabelField> sequences;

  std::string serialize() const {
    io::Writer w;
    w.put_magic("DPTLBL01");
    w.put_string(teacher_id);
    w.put<double>(temperature);
    w.put<std::int32_t>(vocab);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(mode));
    w.put<std::int32_t>(sparsity_k);
    w.put<std::uint64_t>(sequences.size());
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      const auto& f = sequences[s];
      w.put<std::uint32_t>(static_cast<std::uint32_t>(f.size()));
      for (std::size_t j = 0; j < f.size(); ++j) {
        w.put<std::uint64_t>(s);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(j));
        auto idx = f.indices(j);
        bool full = idx.size() == static_cast<std::size_t>(vocab);
        for (std::size_t m = 0; full && m < idx.size(); ++m) full = idx[m] == static_cast<std::int32_t>(m);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(idx.size()));
        w.put<std::uint8_t>(full);  // full rows omit the index list
        if (!full)
          for (auto i : idx) w.put<std::int32_t>(i);
        for (auto p : f.probs(j)) w.put<double>(p);
      }
    }
    return w.bytes();
  }

  static LabelCache deserialize(std::string bytes) {
    io::Reader r(std::move(bytes));
    r.expect_magic("DPTLBL01");
    LabelCache c;
    c.teacher_id = r.get_string();
    c.temperature = r.get<double>();
    c.vocab = r.get<std::int32_t>();
    c.mode = static_cast<SparsityMode>(r.get<std::uint8_t>());
    c.sparsity_k = r.get<std::int32_t>();
    auto n = r.get<std::uint64_t>();
    c.sequences.resize(n);
    std::vector<std::int32_t> idx;
    std::vector<double> p;
    for (std::uint64_t s = 0; s < n; ++s) {
      auto& f = c.sequences[s];
      f.teacher_id = c.teacher_id;
      f.temperature = c.temperature;
      auto positions = r.get<std::uint32_t>();
      for (std::uint32_t j = 0; j < positions; ++j) {
        if (r.get<std::uint64_t>() != s || r.get<std::uint32_t>() != j) throw StageError("label cache: record key out of order");
        auto nnz = r.get<std::uint32_t>();
        const bool full = r.get<std::uint8_t>() != 0;
        if (nnz > static_cast<std::uint32_t>(c.vocab) || (full && nnz != static_cast<std::uint32_t>(c.vocab)))
          throw StageError("label cache: malformed record");
        idx.resize(nnz);
        p.resize(nnz);
        if (full)
          std::iota(idx.begin(), idx.end(), 0);
        else
          for (auto& i : idx) i = r.get<std::int32_t>();
        for (auto& x : p) x = r.get<double>();
        f.push(idx, p);
      }
      f.validate(c.vocab, c.mode == SparsityMode::dense ? 0 : c.sparsity_k);
    }
    return c;
  }

  bool operator==(const LabelCache&) const = default;
};

}  // namespace dptlab
