// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../gradcheck.hpp"
#include "dptlab/pipeline.hpp"
#include "dptlab/tabular.hpp"
#include "dptlab/train.hpp"

using namespace dptlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double x, int prec = 6) {
  std::ostringstream s;
  s.precision(prec);
  s << x;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + num(v[i], 4);
  return out;
}

// ---------------------------------------------------------------- 1

Outcome coupon_and_copy() {
  const int k = 64;
  auto plan = mixed_plan(k, 1.0 / 3, 1.0 / 3, 11);
  auto teacher = build_matrix(k, plan, 12);
  // Length-2 sequences, one stream per draw, until every current token has shown up.
  SequenceDataset ds;
  ds.k = k;
  ds.length = 2;
  std::set<TokenId> seen;
  std::uint64_t i = 0;
  while (static_cast<int>(seen.size()) < k) {
    auto one = sample_sequences(teacher, {}, 1, 2, derive_seed(13, i++));
    seen.insert(one.tokens[0]);
    ds.tokens.insert(ds.tokens.end(), one.tokens.begin(), one.tokens.end());
    ds.copy_targets.push_back(one.copy_targets[0]);
  }
  auto est = fit_distill(ds, teacher);
  bool bitwise = est.observed_rows.size() == static_cast<std::size_t>(k);
  for (int r = 0; r < k && bitwise; ++r)
    for (int c = 0; c < k; ++c) bitwise = bitwise && est.matrix(r, c) == teacher(r, c);

  const int trials = 10000;
  std::vector<std::int64_t> draws(trials);
  for (int t = 0; t < trials; ++t) draws[t] = coupon_trial(k, 1, derive_seed(14, t));
  bool tails = true;
  std::string msg = "sequences=" + std::to_string(i) + " bitwise=" + (bitwise ? "yes" : "no");
  for (double delta : {0.1, 0.01}) {
    const double thr = coupon_tail_threshold(k, delta);
    const auto over = std::count_if(draws.begin(), draws.end(), [&](std::int64_t d) { return d > thr; });
    const double frac = static_cast<double>(over) / trials;
    const double upper = delta + 2.5758293035489 * std::sqrt(delta * (1 - delta) / trials);
    tails = tails && frac <= upper;
    msg += " P(>" + num(thr, 5) + ")=" + num(frac, 4) + "<=" + num(upper, 4);
  }
  return {bitwise && tails, msg};
}

// ---------------------------------------------------------------- 2

Outcome mle_bound() {
  const int k = 8, trials = 20;
  bool ok = true;
  std::string msg;
  for (int p : {2, 8})
    for (int n : {16, 64, 256}) {
      std::vector<double> e(trials);
      for (int t = 0; t < trials; ++t) {
        auto m = sparse_random_matrix(k, p, derive_seed(21, p * 1000 + t));
        e[t] = mle_row_error(m.row(t % k), n, derive_seed(22, p * 100000 + n * 100 + t));
      }
      const double mean = std::accumulate(e.begin(), e.end(), 0.0) / trials;
      double var = 0.0;
      for (double x : e) var += (x - mean) * (x - mean);
      const double se = std::sqrt(var / (trials - 1) / trials);
      const double bound = std::sqrt(static_cast<double>(p) / n);
      const bool cell = mean <= bound + 2 * se;
      ok = ok && cell;
      msg += " p" + std::to_string(p) + "n" + std::to_string(n) + "=" + num(mean, 3) + "/" + num(bound, 3);
    }
  return {ok, msg.substr(1)};
}

// ---------------------------------------------------------------- 5

Outcome generalized_bayes() {
  double worst = 0.0;
  bool bayes = true;
  for (int step = 1; step <= 99; ++step) {
    const double p = 0.01 * step;
    for (int k : {2, 3, 4, 8, 16}) {
      auto f = [&](double a) { return passk_value({p}, Policy::of(a), k); };
      const int grid = 100000;
      int best = 0;
      double fb = f(0.0);
      for (int g = 1; g <= grid; ++g) {
        double v = f(static_cast<double>(g) / grid);
        if (v > fb) fb = v, best = g;
      }
      // Golden-section refinement inside the winning grid cell pair.
      double lo = std::max(0.0, (best - 1.0) / grid), hi = std::min(1.0, (best + 1.0) / grid);
      const double phi = 0.5 * (std::sqrt(5.0) - 1);
      for (int it = 0; it < 60; ++it) {
        double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
        (f(a) < f(b) ? lo : hi) = (f(a) < f(b) ? a : b);
      }
      worst = std::max(worst, std::abs(0.5 * (lo + hi) - optimal_alpha(p, k)));
    }
    bayes = bayes && optimal_alpha(p, 1) == (p > 0.5 ? 1.0 : 0.0);
    if (p > 0.5) bayes = bayes && passk_value({p}, Policy::of(optimal_alpha(p, 1)), 1) == p;
  }
  return {worst < 2e-5 && bayes, "max|alpha-grid|=" + num(worst, 3) + " bayes_rule=" + (bayes ? "yes" : "no")};
}

// ---------------------------------------------------------------- 6

Outcome coverage() {
  auto ex = coverage_table(0.1, {1, 2, 4, 8, 16, 32});
  bool ok = true;
  for (const auto& r : ex.rows) {
    ok = ok && std::abs(r.c1 - 0.6) <= 1e-15;
    ok = ok && std::abs(r.c3 - 0.6 * (1 - std::ldexp(1.0, -r.k))) <= 1e-15 && r.c3 < 0.6;
  }
  const auto& k1 = ex.rows[0];
  const auto& k2 = ex.rows[1];
  ok = ok && k1.c2 <= k1.c1 && std::abs(k2.c2 - 0.75) <= 1e-15 && k2.c2 > k2.c1;
  // Large k stays strictly below 0.6 for the half-and-half-on-a-wrong-class policy.
  ok = ok && coverage_row(0.1, 50).c3 < 0.6;
  ok = ok && crossover_point(0.1).k == 2;
  return {ok, "C1(k=2)=" + num(k2.c1, 17) + " C2(k=2)=" + num(k2.c2, 17) + " C3(k=32)=" + num(ex.rows.back().c3, 17)};
}

// ---------------------------------------------------------------- 7

Outcome estimator() {
  int cases = 0, bad = 0;
  for (int n = 1; n <= 8; ++n)
    for (int c = 0; c <= n; ++c)
      for (int k = 1; k <= n; ++k) {
        long hit = 0, total = 0;
        for (unsigned mask = 0; mask < (1u << n); ++mask) {
          if (std::popcount(mask) != k) continue;
          ++total;
          hit += (mask & ((1u << c) - 1)) != 0;
        }
        ++cases;
        bad += estimate_passk(n, c, k) != static_cast<double>(hit) / static_cast<double>(total);
      }
  return {bad == 0, std::to_string(cases) + " cases, " + std::to_string(bad) + " mismatches"};
}

// ---------------------------------------------------------------- 8

ModelConfig gc_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 4;
  c.max_len = 6;
  c.vocab = 5;
  c.seed = 3;
  c.init_std = 0.5;
  return c;
}

SoftLabelField random_labels(std::size_t n, int vocab, std::uint64_t seed, double scale = 2.0) {
  Rng rng(seed);
  SoftLabelField f;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> z(vocab);
    for (auto& x : z) x = rng.normal(0.0, scale);
    f.push_dense(softmax(z));
  }
  return f;
}

Outcome gradients() {
  double worst = 0.0;
  int variants = 0;
  for (double a : {0.0, 0.5, 1.0})
    for (double x : {0.0, 0.15, 1.0})
      for (auto [mode, k] : {std::pair{SparsityMode::dense, 0}, {SparsityMode::top_k, 1}, {SparsityMode::sample_k, 2}}) {
        dptlab::testing::GradCheckCase c{ModelParams<double>::initialized(gc_config()), {0, 3, 1, 4, 2, 3}, {}, {}, {}};
        c.targets = shifted_targets(c.tokens);
        c.labels = sparsify_labels(random_labels(5, 5, 7), mode, k, 11, 5);
        c.spec.alpha = a;
        c.spec.routing_fraction = x;
        c.spec.temperature = 2.0;
        c.spec.sparsity_mode = mode;
        c.spec.sparsity_k = k;
        c.spec.rescale_routed = a == 1.0 && x == 1.0;
        worst = std::max(worst, dptlab::testing::finite_difference_check(c).max_rel_error);
        ++variants;
      }

  // At routed positions the logit gradient is exactly the hard-label share.
  LogitMatrix logits(12, 6);
  Rng rng(4);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal(0, 1);
  std::vector<TokenId> t{0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5};
  auto labels = random_labels(12, 6, 8, 3.0);
  LossSpec kd;
  kd.alpha = 0.5;
  kd.routing_fraction = 0.15;
  LossSpec ce;
  ce.alpha = 0.0;
  LogitMatrix dk(12, 6), dc(12, 6);
  auto rk = distill_loss(logits, t, &labels, kd, &dk);
  distill_loss(logits, t, nullptr, ce, &dc);
  double soft_part = 0.0;
  int routed = 0;
  for (std::size_t j = 0; j < 12; ++j) {
    if (!rk.positions[j].routed) continue;
    ++routed;
    for (int v = 0; v < 6; ++v) soft_part = std::max(soft_part, std::abs(dk(j, v) - (1 - kd.alpha) * dc(j, v)));
  }
  const bool ok = worst < 1e-4 && routed == 1 && soft_part <= 1e-15;
  return {ok, std::to_string(variants) + " variants, max rel err " + num(worst, 3) + ", routed=" + std::to_string(routed) +
                  " soft grad " + num(soft_part, 3)};
}

// ---------------------------------------------------------------- 10

struct Toy {
  TransitionMatrix m;
  SequenceDataset ds;
  ModelConfig model;
};

Toy toy() {
  Toy t;
  t.m = build_matrix(8, mixed_plan(8, 0.5, 0.25, 1), 1);
  t.ds = sample_sequences(t.m, TriggerSpec::random(8, 1, 2), 64, 8, 3);
  t.model.n_layers = 1;
  t.model.d_model = 8;
  t.model.n_heads = 2;
  t.model.max_len = 8;
  t.model.vocab = 8;
  t.model.seed = 5;
  return t;
}

TrainConfig quick() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.lr = 1e-2;
  c.seed = 9;
  return c;
}

Outcome top_k() {
  auto t = toy();
  auto teacher = ModelParams<double>::initialized(t.model);
  std::vector<SoftLabelField> dense, all, top1;
  TrainingData argmax_data{&t.ds, nullptr, {}};
  for (std::size_t s = 0; s < t.ds.size(); ++s) {
    dense.push_back(teacher_soft_labels(teacher, t.ds.sequence(s), 2.0));
    all.push_back(sparsify_labels(dense.back(), SparsityMode::top_k, 0, 0, 8));
    top1.push_back(sparsify_labels(dense.back(), SparsityMode::top_k, 1, 0, 8));
    for (std::size_t j = 0; j < top1.back().size(); ++j) argmax_data.hard_targets.push_back(top1.back().indices(j)[0]);
  }
  LossSpec kd;
  kd.alpha = 0.5;
  LossSpec kd_all = kd;
  kd_all.sparsity_mode = SparsityMode::top_k;
  kd_all.sparsity_k = 0;
  auto a = train<float>(t.model, TrainingData{&t.ds, &dense, {}}, kd, quick());
  auto b = train<float>(t.model, TrainingData{&t.ds, &all, {}}, kd_all, quick());
  const bool all_same = a.loss_trace == b.loss_trace && a.params == b.params;

  LossSpec k1;
  k1.alpha = 1.0;
  k1.sparsity_mode = SparsityMode::top_k;
  k1.sparsity_k = 1;
  LossSpec ce;
  ce.alpha = 0.0;
  auto d1 = train<float>(t.model, TrainingData{&t.ds, &top1, {}}, k1, quick());
  auto c1 = train<float>(t.model, argmax_data, ce, quick());
  auto c0 = train<float>(t.model, TrainingData{&t.ds, nullptr, {}}, ce, quick());
  const bool swap = d1.loss_trace == c1.loss_trace && d1.loss_trace != c0.loss_trace;

  const double want[3] = {0.8392857142857143, 0.675, 0.4857142857142857};
  const int n = 40000;
  SoftLabelField f;
  for (int j = 0; j < n; ++j) f.push_dense(std::vector<double>{0.5, 0.3, 0.2});
  auto s = sparsify_labels(f, SparsityMode::sample_k, 2, 17, 3);
  int hits[3] = {0, 0, 0};
  for (int j = 0; j < n; ++j)
    for (auto id : s.indices(j)) ++hits[id];
  double worst_z = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double sd = std::sqrt(want[i] * (1 - want[i]) / n);
    worst_z = std::max(worst_z, std::abs(hits[i] / static_cast<double>(n) - want[i]) / sd);
  }
  const bool incl = worst_z < 4.0;
  return {all_same && swap && incl, std::string("all==dense ") + (all_same ? "yes" : "no") + ", top1==argmax-CE " +
                                        (swap ? "yes" : "no") + ", sample-2 max z " + num(worst_z, 3)};
}

// ---------------------------------------------------------------- pipeline

struct ArmResult {
  double induction = 0.0;
  double kl_high = 0.0, kl_low = 0.0;
  std::vector<double> low_rows;  // per-row KL over low-entropy rows
};

double se_of_mean(const std::vector<double>& v) {
  if (v.size() < 2) return std::nan("");
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1) / v.size());
}

struct PipelineRun {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<ArmResult>> arms;  // name -> per seed
  std::vector<std::pair<std::size_t, std::size_t>> routing_checked;  // sequences, mismatches per seed
};

PipelineRun run_pipeline(const ExperimentConfig& cfg, const fs::path& dir) {
  Pipeline p(cfg, dir, &std::cerr);
  auto rec = p.run(all_stages());
  if (rec.status != "complete") throw StageError("pipeline did not complete: " + rec.failed_stage);
  PipelineRun out;
  out.seeds = cfg.training.seeds;
  for (auto seed : cfg.training.seeds) {
    const auto& D = p.data(seed);
    for (const auto& arm : cfg.arms) {
      auto r = p.report(seed, p.student(seed, arm));
      ArmResult a;
      a.induction = detail::num_from(r.at("induction").at("accuracy"));
      a.kl_high = detail::num_from(r.at("kl_by_class").at("high"));
      a.kl_low = detail::num_from(r.at("kl_by_class").at("low"));
      const auto& rows = r.at("kl_by_row");
      for (int i = 0; i < D.base.k(); ++i)
        if (!rows[i].is_null() && D.base.entropy_class(i) == EntropyClass::low) a.low_rows.push_back(rows[i].get<double>());
      out.arms[arm.name].push_back(std::move(a));
    }
    // Routing on real teacher labels against a per-sequence sort.
    auto it = std::find_if(cfg.arms.begin(), cfg.arms.end(), [](const ArmConfig& a) { return a.loss.routing_fraction > 0; });
    if (it != cfg.arms.end()) {
      const auto& T = p.teacher(seed);
      std::size_t bad = 0, n = std::min<std::size_t>(64, D.eval.size());
      for (std::size_t s = 0; s < n; ++s) {
        auto lab = teacher_soft_labels(T.params, D.eval.sequence(s), it->loss.temperature);
        std::vector<std::size_t> order(lab.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lab.entropy[a] < lab.entropy[b]; });
        order.resize(static_cast<std::size_t>(std::floor(it->loss.routing_fraction * static_cast<double>(lab.size()))));
        std::sort(order.begin(), order.end());
        bad += route_tokens(lab, it->loss.routing_fraction) != order;
      }
      out.routing_checked.emplace_back(n, bad);
    }
  }
  return out;
}

std::vector<double> per_seed(const PipelineRun& r, const std::string& arm, double ArmResult::*field) {
  std::vector<double> v;
  for (const auto& a : r.arms.at(arm)) v.push_back(a.*field);
  return v;
}

std::vector<double> minus(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

Outcome entropy_split(const PipelineRun& r) {
  auto ce_h = per_seed(r, "ce", &ArmResult::kl_high), kd_h = per_seed(r, "kd", &ArmResult::kl_high);
  auto ce_l = per_seed(r, "ce", &ArmResult::kl_low), kd_l = per_seed(r, "kd", &ArmResult::kl_low);
  std::vector<double> z;
  for (std::size_t s = 0; s < r.seeds.size(); ++s) {
    const double se = std::hypot(se_of_mean(r.arms.at("ce")[s].low_rows), se_of_mean(r.arms.at("kd")[s].low_rows));
    z.push_back(std::abs(kd_l[s] - ce_l[s]) / se);
  }
  const double dh = median(minus(kd_h, ce_h));
  const double zl = median(z);
  return {dh < 0 && zl < 2.0, "high KL ce=[" + join(ce_h) + "] kd=[" + join(kd_h) + "] median diff " + num(dh, 4) +
                                  "; low KL ce=[" + join(ce_l) + "] kd=[" + join(kd_l) + "] median |diff|/se " + num(zl, 3)};
}

Outcome induction_gap(const PipelineRun& r) {
  auto ce = per_seed(r, "ce", &ArmResult::induction), kd = per_seed(r, "kd", &ArmResult::induction);
  const double d = median(minus(kd, ce));
  return {d <= 0, "induction ce=[" + join(ce) + "] kd=[" + join(kd) + "] median kd-ce " + num(d, 4)};
}

Outcome routing(const PipelineRun& r) {
  std::size_t seqs = 0, bad = 0;
  for (auto [n, b] : r.routing_checked) seqs += n, bad += b;
  // Synthetic labels at the full training length as well.
  for (std::uint64_t s = 0; s < 25; ++s) {
    auto lab = random_labels(63, 8, 100 + s);
    auto got = route_tokens(lab, 0.15);
    std::vector<std::size_t> order(63);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lab.entropy[a] < lab.entropy[b]; });
    order.resize(9);
    std::sort(order.begin(), order.end());
    ++seqs;
    bad += got != order;
  }
  auto kd = per_seed(r, "kd", &ArmResult::induction), kr = per_seed(r, "kd_routed", &ArmResult::induction);
  const double d = median(minus(kr, kd));
  return {bad == 0 && d >= 0, "sort oracle " + std::to_string(seqs - bad) + "/" + std::to_string(seqs) + "; induction kd=[" +
                                  join(kd) + "] kd_routed=[" + join(kr) + "] median diff " + num(d, 4)};
}

Outcome reproducible(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a / "figures")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::vector<std::string> other;
  for (const auto& e : fs::directory_iterator(b / "figures")) other.push_back(e.path().filename().string());
  std::sort(other.begin(), other.end());
  if (names != other || names.empty()) return {false, "figure file sets differ"};
  std::string differ;
  for (const auto& n : names)
    if (io::read_file(a / "figures" / n) != io::read_file(b / "figures" / n)) differ += " " + n;
  return {differ.empty(), std::to_string(names.size()) + " files compared" + (differ.empty() ? "" : ", differ:" + differ)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work = "acceptance_work";
  std::string config_path;
  std::vector<int> only;
  bool keep = false;
  app.add_option("--work-dir", work, "Directory for pipeline runs");
  app.add_option("--config", config_path, "Experiment config (defaults to the built-in protocol)");
  app.add_option("--only", only, "Run only these criteria");
  app.add_flag("--keep", keep, "Reuse artifacts from an earlier invocation instead of starting fresh");
  CLI11_PARSE(app, argc, argv);

  std::set<int> want(only.begin(), only.end());
  auto enabled = [&](int c) { return want.empty() || want.count(c); };
  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!enabled(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %2d %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "coupon collection and exact tabular copy", coupon_and_copy);
  report(2, "empirical row error bound", mle_bound);
  report(5, "generalized Bayes policy", generalized_bayes);
  report(6, "coverage example", coverage);
  report(7, "pass@k estimator", estimator);
  report(8, "loss gradients", gradients);
  report(10, "sparse soft labels", top_k);

  const bool need_run = enabled(3) || enabled(4) || enabled(9) || enabled(11);
  if (need_run) {
    ExperimentConfig cfg;
    try {
      if (!config_path.empty()) cfg = parse_config(io::read_file(config_path));
    } catch (const std::exception& e) {
      std::fprintf(stderr, "config: %s\n", e.what());
      return 1;
    }
    const fs::path root(work), a = root / "run_a", b = root / "run_b";
    if (!keep) fs::remove_all(root);
    std::optional<PipelineRun> run;
    std::string err;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      run = run_pipeline(cfg, a);
    } catch (const std::exception& e) {
      err = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "pipeline run took %.1fs\n", secs);
    auto from_run = [&](auto f) { return [&, f]() -> Outcome { return run ? f(*run) : Outcome{false, "pipeline: " + err}; }; };
    report(3, "entropy-class KL split", from_run(entropy_split));
    report(4, "induction with an imperfect teacher", from_run(induction_gap));
    report(9, "token routing", from_run(routing));
    report(11, "end-to-end reproducibility", [&]() -> Outcome {
      if (!run) return {false, "pipeline: " + err};
      if (!keep) run_pipeline(cfg, b);
      else if (!fs::exists(b / "figures")) run_pipeline(cfg, b);
      return reproducible(a, b);
    });
  }
  return failed ? 1 : 0;
}
