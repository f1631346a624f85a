// Mini-batch training loop and the model checkpoint archive.
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"
#include "dptlab/loss.hpp"
#include "dptlab/markov.hpp"
#include "dptlab/optim.hpp"
#include "dptlab/transformer.hpp"

namespace dptlab {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 64;
  double lr = 3e-4;
  double warmup_fraction = 0.01;
  std::uint64_t seed = 0;
  AdamConfig adam;
  std::int64_t checkpoint_every = 0;  // steps; 0 disables the callback
};

// Supervision for one training set. `hard_targets` overrides the default
// next-token targets (n * (L-1), row-major) when non-empty.
struct TrainingData {
  const SequenceDataset* sequences = nullptr;
  const std::vector<SoftLabelField>* labels = nullptr;
  std::vector<TokenId> hard_targets;
};

template <class Scalar>
struct TrainResult {
  ModelParams<Scalar> params;
  OptimizerState<Scalar> optimizer;
  std::vector<double> loss_trace;  // one entry per optimizer step
};

template <class Scalar>
using CheckpointFn = std::function<void(std::int64_t step, std::int64_t sequences_seen, const ModelParams<Scalar>&)>;

// Mean loss over a batch of sequences and its gradient.
template <class Scalar>
double batch_loss_and_grad(const ModelParams<Scalar>& P, const TrainingData& data, std::span<const std::size_t> batch,
                           const LossSpec& spec, ModelParams<Scalar>& grads, ForwardCache<Scalar>& cache) {
  const auto& ds = *data.sequences;
  const int L = ds.length;
  const int B = static_cast<int>(batch.size());
  std::vector<TokenId> packed(static_cast<std::size_t>(B) * L);
  for (int b = 0; b < B; ++b) {
    auto s = ds.sequence(batch[b]);
    std::copy(s.begin(), s.end(), packed.begin() + static_cast<std::ptrdiff_t>(b) * L);
  }
  forward(P, packed, B, L, cache);

  const int V = P.config().vocab;
  RowMatrix<Scalar> dlogits = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(B) * L, V);
  LogitMatrix seq_logits;
  LogitMatrix seq_grad(L, V);
  std::vector<TokenId> targets(L - 1);
  KahanSum total;
  for (int b = 0; b < B; ++b) {
    const auto idx = batch[b];
    if (data.hard_targets.empty()) {
      auto s = ds.sequence(idx);
      std::copy(s.begin() + 1, s.end(), targets.begin());
    } else {
      auto first = data.hard_targets.begin() + static_cast<std::ptrdiff_t>(idx * (L - 1));
      std::copy(first, first + (L - 1), targets.begin());
    }
    seq_logits = cache.logits.block(static_cast<Eigen::Index>(b) * L, 0, L, V).template cast<double>();
    const SoftLabelField* labels = data.labels ? &(*data.labels)[idx] : nullptr;
    auto res = distill_loss(seq_logits, targets, labels, spec, &seq_grad, 1.0 / B);
    total.add(res.loss);
    dlogits.block(static_cast<Eigen::Index>(b) * L, 0, L, V) = seq_grad.template cast<Scalar>();
  }
  std::fill(grads.flat().begin(), grads.flat().end(), Scalar(0));
  backward(P, cache, dlogits, grads);
  return total.value() / B;
}

// Single-threaded and deterministic for a fixed config: the epoch order comes
// from stream (seed, epoch) and nothing else consumes randomness.
template <class Scalar>
TrainResult<Scalar> train(const ModelConfig& model_cfg, const TrainingData& data, const LossSpec& spec,
                          const TrainConfig& cfg, const CheckpointFn<Scalar>& on_checkpoint = {}) {
  require(data.sequences != nullptr && data.sequences->size() > 0, "train: dataset is empty");
  const auto& ds = *data.sequences;
  require(ds.length <= model_cfg.max_len, "train: sequence length exceeds model max_len");
  require(ds.k == model_cfg.vocab, "train: dataset vocabulary differs from model vocabulary");
  require(cfg.epochs >= 1 && cfg.batch_size >= 1, "train: epochs and batch size must be >= 1");
  spec.validate(model_cfg.vocab);
  if (spec.alpha > 0.0)
    require(data.labels != nullptr && data.labels->size() == ds.size(), "train: alpha > 0 needs one label field per sequence");
  require(data.hard_targets.empty() || data.hard_targets.size() == ds.size() * static_cast<std::size_t>(ds.length - 1),
          "train: hard target override has the wrong size");

  const auto n = ds.size();
  const auto steps_per_epoch = static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  CosineSchedule sched{cfg.lr, total_steps, static_cast<std::int64_t>(std::floor(cfg.warmup_fraction * total_steps))};

  TrainResult<Scalar> out{ModelParams<Scalar>::initialized(model_cfg), {}, {}};
  out.optimizer = OptimizerState<Scalar>::fresh(out.params.size(), cfg.lr, total_steps, cfg.adam);
  auto grads = out.params.zeros_like();
  ForwardCache<Scalar> cache;
  std::vector<std::size_t> order(n);
  std::int64_t seen = 0;
  out.loss_trace.reserve(total_steps);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "train.shuffle"), static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
    for (std::size_t s0 = 0; s0 < n; s0 += cfg.batch_size) {
      const auto nb = std::min<std::size_t>(cfg.batch_size, n - s0);
      std::span<const std::size_t> batch(order.data() + s0, nb);
      double loss = batch_loss_and_grad(out.params, data, batch, spec, grads, cache);
      const auto step = out.optimizer.step + 1;
      if (!std::isfinite(loss))
        throw StageError("train: loss diverged (" + std::to_string(loss) + ") at step " + std::to_string(step) +
                         ", epoch " + std::to_string(epoch));
      adam_update<Scalar>(out.params.flat(), grads.flat(), out.optimizer, sched.lr(step));
      if (!out.params.all_finite()) throw StageError("train: non-finite parameters after step " + std::to_string(step));
      out.loss_trace.push_back(loss);
      seen += static_cast<std::int64_t>(nb);
      if (on_checkpoint && cfg.checkpoint_every > 0 &&
          (step % cfg.checkpoint_every == 0 || step == total_steps))
        on_checkpoint(step, seen, out.params);
    }
  }
  return out;
}

// Self-describing archive: config, named tensors with shapes, optimizer state.
template <class Scalar>
std::string serialize_checkpoint(const ModelParams<Scalar>& P, const OptimizerState<Scalar>* opt = nullptr) {
  io::Writer w;
  w.put_magic("DPTCKPT1");
  w.put<std::uint8_t>(sizeof(Scalar));
  const auto& c = P.config();
  w.put<std::int32_t>(c.n_layers);
  w.put<std::int32_t>(c.d_model);
  w.put<std::int32_t>(c.n_heads);
  w.put<std::int32_t>(c.d_mlp);
  w.put<std::int32_t>(c.max_len);
  w.put<std::int32_t>(c.vocab);
  w.put<std::uint64_t>(c.seed);
  w.put<double>(c.init_std);
  w.put<double>(c.ln_eps);
  w.put<std::uint64_t>(P.layout().size());
  for (const auto& t : P.layout()) {
    w.put_string(t.name);
    w.put<std::int32_t>(t.rows);
    w.put<std::int32_t>(t.cols);
    w.put_array<Scalar>(std::span<const Scalar>(P.flat().data() + t.offset, t.size()));
  }
  w.put<std::uint8_t>(opt != nullptr);
  if (opt) {
    w.put<std::int64_t>(opt->step);
    w.put<double>(opt->base_lr);
    w.put<std::int64_t>(opt->horizon);
    w.put<double>(opt->adam.beta1);
    w.put<double>(opt->adam.beta2);
    w.put<double>(opt->adam.epsilon);
    w.put_array<Scalar>(opt->first_moment);
    w.put_array<Scalar>(opt->second_moment);
  }
  return w.bytes();
}

template <class Scalar>
struct Checkpoint {
  ModelParams<Scalar> params;
  std::optional<OptimizerState<Scalar>> optimizer;
};

template <class Scalar>
Checkpoint<Scalar> deserialize_checkpoint(std::string bytes) {
  io::Reader r(std::move(bytes));
  r.expect_magic("DPTCKPT1");
  if (r.get<std::uint8_t>() != sizeof(Scalar)) throw StageError("checkpoint: scalar width mismatch");
  ModelConfig c;
  c.n_layers = r.get<std::int32_t>();
  c.d_model = r.get<std::int32_t>();
  c.n_heads = r.get<std::int32_t>();
  c.d_mlp = r.get<std::int32_t>();
  c.max_len = r.get<std::int32_t>();
  c.vocab = r.get<std::int32_t>();
  c.seed = r.get<std::uint64_t>();
  c.init_std = r.get<double>();
  c.ln_eps = r.get<double>();
  Checkpoint<Scalar> ck{ModelParams<Scalar>(c), std::nullopt};
  auto n = r.get<std::uint64_t>();
  if (n != ck.params.layout().size()) throw StageError("checkpoint: tensor count mismatch");
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.get_string();
    int rows = r.get<std::int32_t>();
    int cols = r.get<std::int32_t>();
    const auto& t = ck.params.info(name);
    if (t.rows != rows || t.cols != cols) throw StageError("checkpoint: shape mismatch for " + name);
    auto vals = r.get_array<Scalar>();
    if (vals.size() != t.size()) throw StageError("checkpoint: size mismatch for " + name);
    std::copy(vals.begin(), vals.end(), ck.params.flat().begin() + static_cast<std::ptrdiff_t>(t.offset));
  }
  if (r.get<std::uint8_t>()) {
    OptimizerState<Scalar> st;
    st.step = r.get<std::int64_t>();
    st.base_lr = r.get<double>();
    st.horizon = r.get<std::int64_t>();
    st.adam.beta1 = r.get<double>();
    st.adam.beta2 = r.get<double>();
    st.adam.epsilon = r.get<double>();
    st.first_moment = r.get_array<Scalar>();
    st.second_moment = r.get_array<Scalar>();
    ck.optimizer = std::move(st);
  }
  return ck;
}

}  // namespace dptlab
