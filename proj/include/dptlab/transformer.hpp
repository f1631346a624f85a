// A small pre-norm causal transformer with hand-written backpropagation.
//
// Layout per block: x += Attn(LN1(x)); x += MLP(LN2(x)), GELU(tanh) MLP,
// learned absolute positions, final LayerNorm and an affine readout.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"

namespace dptlab {

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using LogitMatrix = RowMatrix<double>;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 0;  // 0 -> 4 * d_model
  int max_len = 64;
  int vocab = 64;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  int mlp_width() const { return d_mlp > 0 ? d_mlp : 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1 && n_heads >= 1, "d_model and n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(max_len >= 2, "max_len must be >= 2");
    require(vocab >= 2, "vocab must be >= 2");
    require(init_std > 0.0 && ln_eps > 0.0, "init_std and ln_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  enum class Init : std::uint8_t { normal, zeros, ones } init = Init::normal;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Parameters (or gradients) stored contiguously with a named tensor table.
template <class Scalar>
class ModelParams {
 public:
  using Map = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;
  using Storage = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

  // Tensor offsets are rounded up to this many elements. With an aligned base
  // every tensor starts on the same vector boundary in every process, so the
  // vectorized kernels follow one fixed summation order.
  static constexpr std::size_t kPad = 16;

  ModelParams() = default;

  explicit ModelParams(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int d = cfg.d_model, m = cfg.mlp_width();
    using I = TensorInfo::Init;
    add("tok_emb", cfg.vocab, d, I::normal);
    add("pos_emb", cfg.max_len, d, I::normal);
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto p = "block" + std::to_string(l) + ".";
      add(p + "ln1.g", 1, d, I::ones);
      add(p + "ln1.b", 1, d, I::zeros);
      add(p + "attn.w_qkv", d, 3 * d, I::normal);
      add(p + "attn.b_qkv", 1, 3 * d, I::zeros);
      add(p + "attn.w_o", d, d, I::normal);
      add(p + "attn.b_o", 1, d, I::zeros);
      add(p + "ln2.g", 1, d, I::ones);
      add(p + "ln2.b", 1, d, I::zeros);
      add(p + "mlp.w_fc", d, m, I::normal);
      add(p + "mlp.b_fc", 1, m, I::zeros);
      add(p + "mlp.w_proj", m, d, I::normal);
      add(p + "mlp.b_proj", 1, d, I::zeros);
    }
    add("lnf.g", 1, d, I::ones);
    add("lnf.b", 1, d, I::zeros);
    add("head.w", d, cfg.vocab, I::normal);
    add("head.b", 1, cfg.vocab, I::zeros);
    data_.assign(total_, Scalar(0));
  }

  static ModelParams initialized(const ModelConfig& cfg) {
    ModelParams p(cfg);
    Rng rng(derive_seed(cfg.seed, "model.init"));
    for (const auto& t : p.layout_) {
      Scalar* x = p.data_.data() + t.offset;
      for (std::size_t i = 0; i < t.size(); ++i) {
        switch (t.init) {
          case TensorInfo::Init::normal: x[i] = static_cast<Scalar>(rng.normal(0.0, cfg.init_std)); break;
          case TensorInfo::Init::zeros: x[i] = Scalar(0); break;
          case TensorInfo::Init::ones: x[i] = Scalar(1); break;
        }
      }
    }
    return p;
  }

  ModelParams zeros_like() const {
    ModelParams g = *this;
    std::fill(g.data_.begin(), g.data_.end(), Scalar(0));
    return g;
  }

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out(cfg_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.flat()[i] = static_cast<Other>(data_[i]);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorInfo>& layout() const { return layout_; }
  Storage& flat() { return data_; }
  const Storage& flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  const TensorInfo& info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no tensor named " + name);
    return layout_[it->second];
  }

  Map operator[](const std::string& name) {
    const auto& t = info(name);
    return Map(data_.data() + t.offset, t.rows, t.cols);
  }
  ConstMap operator[](const std::string& name) const {
    const auto& t = info(name);
    return ConstMap(data_.data() + t.offset, t.rows, t.cols);
  }

  bool all_finite() const {
    for (Scalar x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  bool operator==(const ModelParams& o) const { return cfg_ == o.cfg_ && data_ == o.data_; }

 private:
  void add(std::string name, int rows, int cols, TensorInfo::Init init) {
    index_[name] = layout_.size();
    layout_.push_back({std::move(name), rows, cols, total_, init});
    total_ += (static_cast<std::size_t>(rows) * cols + kPad - 1) / kPad * kPad;
  }

  ModelConfig cfg_;
  std::vector<TensorInfo> layout_;
  std::unordered_map<std::string, std::size_t> index_;
  Storage data_;
  std::size_t total_ = 0;
};

namespace detail {

template <class Scalar>
struct LayerNormCache {
  RowMatrix<Scalar> xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

template <class Scalar>
RowMatrix<Scalar> layer_norm(const RowMatrix<Scalar>& x, const Eigen::Map<const RowMatrix<Scalar>>& g,
                             const Eigen::Map<const RowMatrix<Scalar>>& b, Scalar eps, LayerNormCache<Scalar>& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  RowMatrix<Scalar> y(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    Scalar mu = x.row(r).mean();
    RowVector<Scalar> centered = (x.row(r).array() - mu).matrix();
    Scalar var = centered.squaredNorm() / static_cast<Scalar>(d);
    Scalar rs = Scalar(1) / std::sqrt(var + eps);
    cache.rstd(r) = rs;
    cache.xhat.row(r) = centered * rs;
    y.row(r) = (cache.xhat.row(r).array() * g.row(0).array() + b.row(0).array()).matrix();
  }
  return y;
}

template <class Scalar>
RowMatrix<Scalar> layer_norm_backward(const RowMatrix<Scalar>& dy, const LayerNormCache<Scalar>& cache,
                                      const Eigen::Map<const RowMatrix<Scalar>>& g, Eigen::Map<RowMatrix<Scalar>> dg,
                                      Eigen::Map<RowMatrix<Scalar>> db) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  RowMatrix<Scalar> dx(n, d);
  dg.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  for (Eigen::Index r = 0; r < n; ++r) {
    RowVector<Scalar> dxhat = (dy.row(r).array() * g.row(0).array()).matrix();
    Scalar mean_dxhat = dxhat.mean();
    Scalar mean_dxhat_xhat = dxhat.dot(cache.xhat.row(r)) / static_cast<Scalar>(d);
    dx.row(r) = cache.rstd(r) * (dxhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

template <class Scalar>
constexpr Scalar gelu_c() {
  return static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
}

}  // namespace detail

// Activations retained by forward() for backward().
template <class Scalar>
struct ForwardCache {
  int batch = 0;
  int length = 0;
  std::vector<TokenId> tokens;
  struct Block {
    RowMatrix<Scalar> x_in;
    detail::LayerNormCache<Scalar> ln1;
    RowMatrix<Scalar> qkv;
    std::vector<RowMatrix<Scalar>> probs;  // batch * heads, each L x L
    RowMatrix<Scalar> attn;                // concatenated head outputs
    RowMatrix<Scalar> h;                   // after attention residual
    detail::LayerNormCache<Scalar> ln2;
    RowMatrix<Scalar> ln2_out;
    RowMatrix<Scalar> ln1_out;
    RowMatrix<Scalar> pre;  // MLP pre-activation
    RowMatrix<Scalar> act;  // GELU output
    RowMatrix<Scalar> th;   // tanh term of the GELU
  };
  std::vector<Block> blocks;
  detail::LayerNormCache<Scalar> lnf;
  RowMatrix<Scalar> final_norm;
  RowMatrix<Scalar> logits;  // (batch*length) x vocab
};

// Forward pass for `batch` sequences of equal `length`, packed row-major.
template <class Scalar>
void forward(const ModelParams<Scalar>& P, std::span<const TokenId> tokens, int batch, int length,
             ForwardCache<Scalar>& c) {
  const auto& cfg = P.config();
  require(length >= 1 && length <= cfg.max_len,
          "forward: sequence length " + std::to_string(length) + " exceeds max_len " + std::to_string(cfg.max_len));
  require(tokens.size() == static_cast<std::size_t>(batch) * length, "forward: token count must be batch*length");
  for (auto t : tokens) require(t >= 0 && t < cfg.vocab, "forward: token id out of range");

  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const Eigen::Index n = static_cast<Eigen::Index>(batch) * length;
  const Scalar eps = static_cast<Scalar>(cfg.ln_eps);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  c.batch = batch;
  c.length = length;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.blocks.resize(cfg.n_layers);

  auto tok = P["tok_emb"];
  auto pos = P["pos_emb"];
  RowMatrix<Scalar> x(n, d);
  for (Eigen::Index r = 0; r < n; ++r) x.row(r) = tok.row(tokens[r]) + pos.row(r % length);

  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& B = c.blocks[l];
    const auto p = "block" + std::to_string(l) + ".";
    B.x_in = x;
    B.ln1_out = detail::layer_norm<Scalar>(x, P[p + "ln1.g"], P[p + "ln1.b"], eps, B.ln1);
    B.qkv.noalias() = B.ln1_out * P[p + "attn.w_qkv"];
    B.qkv.rowwise() += P[p + "attn.b_qkv"].row(0);

    B.attn.setZero(n, d);
    B.probs.resize(static_cast<std::size_t>(batch) * H);
    for (int b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * length;
      for (int h = 0; h < H; ++h) {
        auto Q = B.qkv.block(r0, h * dh, length, dh);
        auto K = B.qkv.block(r0, d + h * dh, length, dh);
        auto V = B.qkv.block(r0, 2 * d + h * dh, length, dh);
        RowMatrix<Scalar>& S = B.probs[static_cast<std::size_t>(b) * H + h];
        S.noalias() = (Q * K.transpose()) * scale;
        for (int i = 0; i < length; ++i) {
          Scalar mx = S.row(i).head(i + 1).maxCoeff();
          Scalar total = 0;
          for (int j = 0; j <= i; ++j) {
            S(i, j) = std::exp(S(i, j) - mx);
            total += S(i, j);
          }
          for (int j = 0; j <= i; ++j) S(i, j) /= total;
          for (int j = i + 1; j < length; ++j) S(i, j) = 0;  // causal mask
        }
        B.attn.block(r0, h * dh, length, dh).noalias() = S * V;
      }
    }
    B.h = x;
    B.h.noalias() += B.attn * P[p + "attn.w_o"];
    B.h.rowwise() += P[p + "attn.b_o"].row(0);

    B.ln2_out = detail::layer_norm<Scalar>(B.h, P[p + "ln2.g"], P[p + "ln2.b"], eps, B.ln2);
    B.pre.noalias() = B.ln2_out * P[p + "mlp.w_fc"];
    B.pre.rowwise() += P[p + "mlp.b_fc"].row(0);
    const Scalar gc = detail::gelu_c<Scalar>();
    B.th = ((B.pre.array() + Scalar(0.044715) * B.pre.array().cube()) * gc).tanh().matrix();
    B.act = (Scalar(0.5) * B.pre.array() * (Scalar(1) + B.th.array())).matrix();
    x = B.h;
    x.noalias() += B.act * P[p + "mlp.w_proj"];
    x.rowwise() += P[p + "mlp.b_proj"].row(0);
  }

  c.final_norm = detail::layer_norm<Scalar>(x, P["lnf.g"], P["lnf.b"], eps, c.lnf);
  c.logits.noalias() = c.final_norm * P["head.w"];
  c.logits.rowwise() += P["head.b"].row(0);
}

// Accumulates d(loss)/d(params) into `G` given d(loss)/d(logits).
template <class Scalar>
void backward(const ModelParams<Scalar>& P, const ForwardCache<Scalar>& c, const RowMatrix<Scalar>& dlogits,
              ModelParams<Scalar>& G) {
  const auto& cfg = P.config();
  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const int length = c.length;
  const Eigen::Index n = static_cast<Eigen::Index>(c.batch) * length;
  require(dlogits.rows() == n && dlogits.cols() == cfg.vocab, "backward: dlogits shape mismatch");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  G["head.w"].noalias() += c.final_norm.transpose() * dlogits;
  G["head.b"].row(0) += dlogits.colwise().sum();
  RowMatrix<Scalar> dx = dlogits * P["head.w"].transpose();
  dx = detail::layer_norm_backward<Scalar>(dx, c.lnf, P["lnf.g"], G["lnf.g"], G["lnf.b"]);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& B = c.blocks[l];
    const auto p = "block" + std::to_string(l) + ".";

    // MLP branch; dx flows into the residual unchanged.
    G[p + "mlp.w_proj"].noalias() += B.act.transpose() * dx;
    G[p + "mlp.b_proj"].row(0) += dx.colwise().sum();
    RowMatrix<Scalar> dact = dx * P[p + "mlp.w_proj"].transpose();
    const Scalar gc = detail::gelu_c<Scalar>();
    const auto u = B.pre.array();
    const auto t = B.th.array();
    RowMatrix<Scalar> dpre =
        (dact.array() * (Scalar(0.5) * (Scalar(1) + t) +
                         Scalar(0.5) * u * (Scalar(1) - t.square()) * gc * (Scalar(1) + Scalar(3 * 0.044715) * u.square())))
            .matrix();
    G[p + "mlp.w_fc"].noalias() += B.ln2_out.transpose() * dpre;
    G[p + "mlp.b_fc"].row(0) += dpre.colwise().sum();
    RowMatrix<Scalar> dln2 = dpre * P[p + "mlp.w_fc"].transpose();
    RowMatrix<Scalar> dh_res = dx + detail::layer_norm_backward<Scalar>(dln2, B.ln2, P[p + "ln2.g"], G[p + "ln2.g"], G[p + "ln2.b"]);

    // Attention branch.
    G[p + "attn.w_o"].noalias() += B.attn.transpose() * dh_res;
    G[p + "attn.b_o"].row(0) += dh_res.colwise().sum();
    RowMatrix<Scalar> dattn = dh_res * P[p + "attn.w_o"].transpose();
    RowMatrix<Scalar> dqkv = RowMatrix<Scalar>::Zero(n, 3 * d);
    for (int b = 0; b < c.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * length;
      for (int h = 0; h < H; ++h) {
        const auto& S = B.probs[static_cast<std::size_t>(b) * H + h];
        auto Q = B.qkv.block(r0, h * dh, length, dh);
        auto K = B.qkv.block(r0, d + h * dh, length, dh);
        auto V = B.qkv.block(r0, 2 * d + h * dh, length, dh);
        auto dO = dattn.block(r0, h * dh, length, dh);
        RowMatrix<Scalar> dP = dO * V.transpose();
        dqkv.block(r0, 2 * d + h * dh, length, dh).noalias() = S.transpose() * dO;
        RowMatrix<Scalar> dS(length, length);
        for (int i = 0; i < length; ++i) {
          Scalar dot = S.row(i).dot(dP.row(i));
          dS.row(i) = (S.row(i).array() * (dP.row(i).array() - dot)).matrix() * scale;
        }
        dqkv.block(r0, h * dh, length, dh).noalias() = dS * K;
        dqkv.block(r0, d + h * dh, length, dh).noalias() = dS.transpose() * Q;
      }
    }
    G[p + "attn.w_qkv"].noalias() += B.ln1_out.transpose() * dqkv;
    G[p + "attn.b_qkv"].row(0) += dqkv.colwise().sum();
    RowMatrix<Scalar> dln1 = dqkv * P[p + "attn.w_qkv"].transpose();
    dx = dh_res + detail::layer_norm_backward<Scalar>(dln1, B.ln1, P[p + "ln1.g"], G[p + "ln1.g"], G[p + "ln1.b"]);
  }

  auto dtok = G["tok_emb"];
  auto dpos = G["pos_emb"];
  for (Eigen::Index r = 0; r < n; ++r) {
    dtok.row(c.tokens[r]) += dx.row(r);
    dpos.row(r % length) += dx.row(r);
  }
}

// Per-position logits for one sequence, promoted to double.
template <class Scalar>
LogitMatrix forward_logits(const ModelParams<Scalar>& P, std::span<const TokenId> tokens) {
  ForwardCache<Scalar> c;
  forward(P, tokens, 1, static_cast<int>(tokens.size()), c);
  return c.logits.template cast<double>();
}

// Adapter exposing a parameter set through the predictor interface used by
// evaluation and pass@k scoring.
template <class Scalar>
class TransformerPredictor {
 public:
  explicit TransformerPredictor(const ModelParams<Scalar>& params, int batch = 64) : params_(&params), batch_(batch) {}

  int vocab() const { return params_->config().vocab; }

  LogitMatrix logits(std::span<const TokenId> tokens) const { return forward_logits(*params_, tokens); }

  // Equal-length sequences evaluated in packed batches.
  std::vector<LogitMatrix> logits_batch(std::span<const TokenId> packed, int length) const {
    const auto count = static_cast<int>(packed.size() / static_cast<std::size_t>(length));
    std::vector<LogitMatrix> out;
    out.reserve(count);
    ForwardCache<Scalar> c;
    for (int s0 = 0; s0 < count; s0 += batch_) {
      int nb = std::min(batch_, count - s0);
      forward(*params_, packed.subspan(static_cast<std::size_t>(s0) * length, static_cast<std::size_t>(nb) * length), nb,
              length, c);
      for (int b = 0; b < nb; ++b)
        out.push_back(c.logits.block(static_cast<Eigen::Index>(b) * length, 0, length, c.logits.cols()).template cast<double>());
    }
    return out;
  }

 private:
  const ModelParams<Scalar>* params_;
  int batch_;
};

}  // namespace dptlab
