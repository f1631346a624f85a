// Seeded experiment pipeline over a content-addressed artifact store:
// generate -> train-teacher -> cache-labels -> train-student -> eval -> passk,
// plus the complexity sweep and plot-data tables.
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/eval.hpp"
#include "dptlab/experiment.hpp"
#include "dptlab/io.hpp"
#include "dptlab/loss.hpp"
#include "dptlab/markov.hpp"
#include "dptlab/passk.hpp"
#include "dptlab/tabular.hpp"
#include "dptlab/train.hpp"

namespace dptlab {

namespace fs = std::filesystem;

enum class Stage { generate, train_teacher, cache_labels, train_student, eval, passk, complexity, figures };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::generate, Stage::train_teacher, Stage::cache_labels, Stage::train_student,
                                    Stage::eval,     Stage::passk,         Stage::complexity,   Stage::figures};
  return s;
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::generate: return "generate";
    case Stage::train_teacher: return "train-teacher";
    case Stage::cache_labels: return "cache-labels";
    case Stage::train_student: return "train-student";
    case Stage::eval: return "eval";
    case Stage::passk: return "passk";
    case Stage::complexity: return "complexity";
    case Stage::figures: return "figures";
  }
  return "?";
}

inline Stage stage_from_string(std::string_view s) {
  for (auto st : all_stages())
    if (s == to_string(st)) return st;
  throw ValidationError("unknown stage '" + std::string(s) + "'");
}

// Files plus a .sha256 sidecar; a file whose sidecar is missing or disagrees
// is treated as absent. Writes go through atomic renames.
class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }

  bool valid(const std::string& rel) const {
    auto p = path(rel);
    auto side = fs::path(p.string() + ".sha256");
    if (!fs::exists(p) || !fs::exists(side)) return false;
    return io::read_file(side) == io::sha256_hex(io::read_file(p));
  }

  void put(const std::string& rel, std::string_view bytes) const {
    auto p = path(rel);
    io::atomic_write(p, bytes);
    io::atomic_write(fs::path(p.string() + ".sha256"), io::sha256_hex(bytes));
  }

  std::string get(const std::string& rel) const {
    if (!valid(rel)) throw StageError("artifact missing or corrupt: " + path(rel).string());
    return io::read_file(path(rel));
  }

 private:
  fs::path root_;
};

inline std::string key_of(const Json& inputs) { return io::sha256_hex(inputs.dump()).substr(0, 16); }

// First n sequences of a dataset.
inline SequenceDataset head(const SequenceDataset& d, std::size_t n) {
  require(n <= d.size(), "head: dataset has fewer sequences than requested");
  SequenceDataset out = d;
  out.copy_targets.resize(n);
  if (d.per_trigger_targets) out.trigger_targets.resize(n * d.triggers.count());
  out.tokens.resize(n * static_cast<std::size_t>(d.length));
  return out;
}

struct ProgressPoint {
  std::int64_t step = 0;
  std::int64_t sequences_seen = 0;
  InductionResult induction;
  std::array<double, 3> kl{};
};

struct TrainTrace {
  std::string model;           // "teacher" or arm name
  std::string train_set_id;
  std::string eval_set_id;
  std::string labels_id;       // empty for hard-label arms
  std::vector<ProgressPoint> points;
  std::vector<double> loss;
};

namespace detail {

inline Json num_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }
inline double num_from(const Json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

inline Json induction_json(const InductionResult& r) {
  return {{"correct", r.correct},           {"eligible", r.eligible},   {"excluded_first", r.excluded_first},
          {"all_correct", r.all_correct},   {"all_total", r.all_total},
          {"accuracy", r.accuracy() ? Json(*r.accuracy()) : Json(nullptr)},
          {"unfiltered_accuracy", r.unfiltered_accuracy() ? Json(*r.unfiltered_accuracy()) : Json(nullptr)}};
}

inline InductionResult induction_from(const Json& j) {
  InductionResult r;
  r.correct = j.at("correct");
  r.eligible = j.at("eligible");
  r.excluded_first = j.at("excluded_first");
  r.all_correct = j.at("all_correct");
  r.all_total = j.at("all_total");
  return r;
}

inline Json trace_json(const TrainTrace& t) {
  Json pts = Json::array();
  for (const auto& p : t.points)
    pts.push_back({{"step", p.step},
                   {"sequences_seen", p.sequences_seen},
                   {"induction", induction_json(p.induction)},
                   {"kl", {num_or_null(p.kl[0]), num_or_null(p.kl[1]), num_or_null(p.kl[2])}}});
  return {{"model", t.model},     {"train_set_id", t.train_set_id}, {"eval_set_id", t.eval_set_id},
          {"labels_id", t.labels_id}, {"points", pts},                {"loss", t.loss}};
}

inline TrainTrace trace_from(const Json& j) {
  TrainTrace t;
  t.model = j.at("model");
  t.train_set_id = j.at("train_set_id");
  t.eval_set_id = j.at("eval_set_id");
  t.labels_id = j.at("labels_id");
  for (const auto& p : j.at("points")) {
    ProgressPoint q;
    q.step = p.at("step");
    q.sequences_seen = p.at("sequences_seen");
    q.induction = induction_from(p.at("induction"));
    for (int c = 0; c < 3; ++c) q.kl[c] = num_from(p.at("kl")[c]);
    t.points.push_back(q);
  }
  t.loss = j.at("loss").get<std::vector<double>>();
  return t;
}

inline Json report_json(const EvalReport& r) {
  Json rows = Json::array();
  for (double x : r.kl.kl) rows.push_back(num_or_null(x));
  return {{"checkpoint_id", r.checkpoint_id},
          {"eval_set_id", r.eval_set_id},
          {"induction", induction_json(r.induction)},
          {"kl_by_class",
           {{"low", num_or_null(r.kl.mean(EntropyClass::low))},
            {"medium", num_or_null(r.kl.mean(EntropyClass::medium))},
            {"high", num_or_null(r.kl.mean(EntropyClass::high))}}},
          {"rows_by_class",
           {{"low", r.kl.rows(EntropyClass::low)}, {"medium", r.kl.rows(EntropyClass::medium)}, {"high", r.kl.rows(EntropyClass::high)}}},
          {"kl_by_row", rows},
          {"unprobed_rows", r.kl.unprobed}};
}

// Shortest round-trip text for a double; identical input gives identical text.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return Json(x).dump();
}

}  // namespace detail

struct StageRecord {
  std::string stage;
  std::string scope;   // "seed-3", "seed-3/kd", or "run"
  std::string status;  // executed | reused
  double seconds = 0.0;
  std::vector<std::string> artifacts;
};

struct RunRecord {
  std::string config_hash;
  std::string output_dir;
  std::string status = "running";
  std::string failed_stage;
  std::string error;
  std::string started;
  std::string finished;
  std::vector<StageRecord> stages;

  Json to_json() const {
    Json st = Json::array();
    for (const auto& s : stages)
      st.push_back({{"stage", s.stage}, {"scope", s.scope}, {"status", s.status}, {"seconds", s.seconds}, {"artifacts", s.artifacts}});
    return {{"config_hash", config_hash}, {"output_dir", output_dir}, {"status", status},   {"failed_stage", failed_stage}, {"error", error},
            {"started", started},         {"finished", finished}, {"stages", st}};
  }
};

inline std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path out, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), store_(std::move(out)), log_(log) {
    cfg_.validate();
    hash_ = config_hash(cfg_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const ArtifactStore& store() const { return store_; }
  const RunRecord& record() const { return record_; }

  // Runs the requested stages (dependencies are loaded or built as needed),
  // writing config.json and run.json under the output directory.
  RunRecord run(const std::vector<Stage>& stages) {
    record_ = {};
    record_.config_hash = hash_;
    record_.output_dir = store_.root().string();
    record_.started = utc_now();
    fs::create_directories(store_.root());
    write_config();
    try {
      for (auto st : stages) run_stage(st);
      record_.status = "complete";
    } catch (const StageError& e) {
      fail(e.what());
      throw;
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      fail(e.what());
      throw StageError(std::string("stage ") + current_ + " failed: " + e.what());
    }
    record_.finished = utc_now();
    store_.put("run.json", record_.to_json().dump(2) + "\n");
    return record_;
  }

  // --- per-seed products --------------------------------------------------

  struct Data {
    std::string key;
    TransitionMatrix base;
    SequenceDataset teacher_train, student_train, eval;
  };

  const Data& data(std::uint64_t seed) {
    if (auto it = data_.find(seed); it != data_.end()) return it->second;
    const auto& d = cfg_.data;
    const std::string key = key_of({{"stage", "generate"}, {"data", to_json(cfg_).at("data")}, {"seed", seed}});
    const std::string dir = seed_dir(seed) + "generate-" + key + "/";
    const std::vector<std::string> files{dir + "matrix.bin", dir + "teacher_train.seq", dir + "student_train.seq", dir + "eval.seq"};
    Data out;
    out.key = key;
    timed(Stage::generate, scope(seed), files, [&] {
      MatrixOptions mo;
      auto plan = mixed_plan(d.k, d.low_fraction, d.medium_fraction, derive_seed(seed, "plan"));
      out.base = build_matrix(d.k, plan, derive_seed(seed, "matrix"), mo);
      auto triggers = TriggerSpec::random(d.k, d.triggers, derive_seed(seed, "triggers"));
      SamplingOptions so{d.copy_pool, d.per_trigger_targets, d.trigger_boost};
      out.teacher_train = sample_sequences(out.base, triggers, d.teacher_size, d.length, derive_seed(seed, "train"), so);
      out.student_train = d.student_subset ? head(out.teacher_train, d.student_size)
                                           : sample_sequences(out.base, triggers, d.student_size, d.length,
                                                              derive_seed(seed, "student"), so);
      out.eval = build_eval_set(out.base, triggers, seed, d.eval_size, d.length, so);
      assert_disjoint(out.teacher_train, out.eval);
      assert_disjoint(out.student_train, out.eval);
      store_.put(files[0], out.base.serialize());
      store_.put(files[1], out.teacher_train.serialize());
      store_.put(files[2], out.student_train.serialize());
      store_.put(files[3], out.eval.serialize());
    }, [&] {
      out.base = TransitionMatrix::deserialize(store_.get(files[0]));
      out.teacher_train = SequenceDataset::deserialize(store_.get(files[1]));
      out.student_train = SequenceDataset::deserialize(store_.get(files[2]));
      out.eval = SequenceDataset::deserialize(store_.get(files[3]));
    });
    return data_.emplace(seed, std::move(out)).first->second;
  }

  struct Model {
    std::string key;
    std::string name;
    ModelParams<float> params;
    TrainTrace trace;
  };

  const Model& teacher(std::uint64_t seed) {
    const std::string id = scope(seed) + "/teacher";
    if (auto it = models_.find(id); it != models_.end()) return it->second;
    const auto& D = data(seed);
    const auto& t = cfg_.training;
    const std::string key = key_of({{"stage", "train-teacher"},
                                    {"data", D.key},
                                    {"model", to_json(cfg_).at("teacher")},
                                    {"training", training_json(t.teacher_epochs)},
                                    {"seed", seed}});
    const std::string base = seed_dir(seed) + "teacher-" + key;
    Model m{key, "teacher", ModelParams<float>(cfg_.teacher.resolve(cfg_.data, derive_seed(seed, "teacher.init"))), {}};
    LossSpec hard;
    hard.alpha = 0.0;
    fit(m, Stage::train_teacher, id, base, seed, D, D.teacher_train, nullptr, "", hard, cfg_.teacher, t.teacher_epochs,
        derive_seed(seed, "teacher.init"), derive_seed(seed, "teacher.train"));
    return models_.emplace(id, std::move(m)).first->second;
  }

  struct Labels {
    std::string key;
    std::vector<SoftLabelField> fields;
  };

  static bool needs_labels(const LossSpec& l) { return l.alpha > 0.0; }

  const Labels& labels(std::uint64_t seed, const LossSpec& spec) {
    const auto& T = teacher(seed);
    const auto& D = data(seed);
    const std::string key = key_of({{"stage", "cache-labels"},
                                    {"teacher", T.key},
                                    {"temperature", spec.temperature},
                                    {"sparsity_mode", to_string(spec.sparsity_mode)},
                                    {"sparsity_k", spec.sparsity_k}});
    const std::string id = scope(seed) + "/labels-" + key;
    if (auto it = labels_.find(id); it != labels_.end()) return it->second;
    const std::string file = seed_dir(seed) + "labels-" + key + ".bin";
    Labels out{key, {}};
    timed(Stage::cache_labels, scope(seed), {file}, [&] {
      LabelCache cache;
      cache.teacher_id = T.key;
      cache.temperature = spec.temperature;
      cache.vocab = cfg_.data.k;
      cache.mode = spec.sparsity_mode;
      cache.sparsity_k = spec.sparsity_k;
      TransformerPredictor<float> pred(T.params);
      const std::uint64_t sparse_seed = derive_seed(seed, "labels");
      for_each_logits(pred, D.student_train, [&](std::size_t s, const LogitMatrix& lg) {
        auto f = soft_labels_from_logits(lg, static_cast<std::size_t>(D.student_train.length - 1), spec.temperature, T.key);
        cache.sequences.push_back(sparsify_labels(f, spec.sparsity_mode, spec.sparsity_k, derive_seed(sparse_seed, s), cfg_.data.k));
      });
      store_.put(file, cache.serialize());
      out.fields = std::move(cache.sequences);
    }, [&] {
      auto cache = LabelCache::deserialize(store_.get(file));
      if (cache.teacher_id != T.key) throw StageError("label cache " + file + " was produced by a different teacher");
      out.fields = std::move(cache.sequences);
    });
    return labels_.emplace(id, std::move(out)).first->second;
  }

  const Model& student(std::uint64_t seed, const ArmConfig& arm) {
    const std::string id = scope(seed) + "/" + arm.name;
    if (auto it = models_.find(id); it != models_.end()) return it->second;
    const auto& D = data(seed);
    const Labels* L = needs_labels(arm.loss) ? &labels(seed, arm.loss) : nullptr;
    const auto& t = cfg_.training;
    const std::string key = key_of({{"stage", "train-student"},
                                    {"data", D.key},
                                    {"labels", L ? Json(L->key) : Json(nullptr)},
                                    {"loss", detail::loss_to_json(arm.loss)},
                                    {"model", to_json(cfg_).at("student")},
                                    {"training", training_json(t.student_epochs)},
                                    {"seed", seed}});
    const std::string base = seed_dir(seed) + "student-" + arm.name + "-" + key;
    Model m{key, arm.name, ModelParams<float>(cfg_.student.resolve(cfg_.data, derive_seed(seed, "student.init"))), {}};
    fit(m, Stage::train_student, id, base, seed, D, D.student_train, L ? &L->fields : nullptr, L ? L->key : "", arm.loss,
        cfg_.student, t.student_epochs, derive_seed(seed, "student.init"), derive_seed(seed, "student.train"));
    return models_.emplace(id, std::move(m)).first->second;
  }

  Json report(std::uint64_t seed, const Model& m) {
    const auto& D = data(seed);
    const std::string key = key_of({{"stage", "eval"}, {"model", m.key}, {"data", D.key}});
    const std::string file = seed_dir(seed) + "eval-" + m.name + "-" + key + ".json";
    Json out;
    timed(Stage::eval, scope(seed) + "/" + m.name, {file}, [&] {
      TransformerPredictor<float> pred(m.params);
      out = detail::report_json(evaluate(pred, D.base, D.eval, m.key));
      store_.put(file, out.dump(2) + "\n");
    }, [&] { out = Json::parse(store_.get(file)); });
    return out;
  }

  Json passk(std::uint64_t seed, const Model& m) {
    const auto& D = data(seed);
    const auto& e = cfg_.eval;
    const std::string key = key_of({{"stage", "passk"}, {"model", m.key}, {"data", D.key}, {"eval", to_json(cfg_).at("eval")}});
    const std::string file = seed_dir(seed) + "passk-" + m.name + "-" + key + ".json";
    Json out;
    timed(Stage::passk, scope(seed) + "/" + m.name, {file}, [&] {
      TransformerPredictor<float> pred(m.params);
      auto items = build_passk_items(D.eval, D.base, e.copy_items, e.row_items, e.row_class);
      auto il = gather_item_logits(pred, D.eval, std::move(items));
      std::vector<int> ks = e.passk_ks;
      if (std::find(ks.begin(), ks.end(), e.frontier_k) == ks.end()) ks.push_back(e.frontier_k);
      if (std::find(ks.begin(), ks.end(), 1) == ks.end()) ks.push_back(1);
      std::sort(ks.begin(), ks.end());
      out = {{"model", m.name}, {"checkpoint_id", m.key}, {"n", e.passk_samples}, {"curves", Json::array()}};
      for (auto kind : {ItemKind::trigger_copy, ItemKind::row_support}) {
        const bool any = std::any_of(il.items.begin(), il.items.end(), [&](const PassKItem& it) { return it.kind == kind; });
        if (!any) continue;
        for (std::size_t ti = 0; ti < e.temperatures.size(); ++ti) {
          const double temp = e.temperatures[ti];
          auto curve = sample_and_score(il, ks, e.passk_samples, temp, derive_seed(derive_seed(seed, "passk"), ti), kind);
          Json pts = Json::array();
          for (const auto& p : curve.points) pts.push_back({{"k", p.k}, {"estimate", p.value}});
          std::int64_t c = 0;
          for (auto x : curve.correct) c += x;
          out["curves"].push_back({{"task", kind == ItemKind::trigger_copy ? "trigger_copy" : "row_support"},
                                   {"temperature", temp},
                                   {"items", curve.correct.size()},
                                   {"correct", c},
                                   {"points", pts}});
        }
      }
      store_.put(file, out.dump(2) + "\n");
    }, [&] { out = Json::parse(store_.get(file)); });
    return out;
  }

  Json complexity(std::uint64_t seed) {
    const std::string key = key_of({{"stage", "complexity"}, {"complexity", to_json(cfg_).at("complexity")}, {"seed", seed}});
    const std::string file = seed_dir(seed) + "complexity-" + key + ".json";
    Json out;
    timed(Stage::complexity, scope(seed), {file}, [&] {
      const auto& c = cfg_.complexity;
      out = {{"k", c.k}, {"epsilon", c.epsilon}, {"delta", c.delta}, {"sweeps", Json::array()}};
      for (int p : c.sparsities) {
        SweepConfig sc{c.k, p, c.epsilon, c.delta, c.grid, c.trials, derive_seed(derive_seed(seed, "complexity"), p)};
        auto res = run_complexity_sweep(sc);
        Json pts = Json::array();
        for (const auto& pt : res.points) {
          double worst = 0.0;
          KahanSum mean;
          for (double x : pt.achieved_error) {
            worst = std::max(worst, x);
            mean.add(x);
          }
          pts.push_back({{"estimator", to_string(pt.estimator)},
                         {"n_samples", pt.samples_used},
                         {"mean_l1", mean.value() / static_cast<double>(pt.achieved_error.size())},
                         {"max_row_l1", worst},
                         {"success", pt.success}});
        }
        out["sweeps"].push_back({{"p", p},
                                 {"points", pts},
                                 {"first_success_scratch", res.first_success(Estimator::scratch)},
                                 {"first_success_distill", res.first_success(Estimator::distill)},
                                 {"coupon_threshold", coupon_tail_threshold(c.k, c.delta)}});
      }
      store_.put(file, out.dump(2) + "\n");
    }, [&] { out = Json::parse(store_.get(file)); });
    return out;
  }

  // Plot-data tables under figures/, regenerated from existing artifacts.
  // Nothing is built here; a missing input is an error and no table is written.
  std::vector<std::string> figures() {
    inputs_only_ = true;
    struct Reset {
      bool& flag;
      ~Reset() { flag = false; }
    } reset{inputs_only_};
    std::vector<std::string> written;
    const auto& seeds = cfg_.training.seeds;
    auto t0 = std::chrono::steady_clock::now();
    current_ = to_string(Stage::figures);

    std::ostringstream kl, ind, fin, curves, frontier, cx, cxs, cov;
    kl << header("row KL per entropy class over training") << "seed\tmodel\tstep\tsequences_seen\tkl_low\tkl_medium\tkl_high\n";
    ind << header("induction accuracy over training") << "seed\tmodel\tstep\tsequences_seen\tinduction_accuracy\teligible\n";
    fin << header("final evaluation on the held-out set")
        << "seed\tmodel\tinduction_accuracy\tunfiltered_accuracy\teligible\tkl_low\tkl_medium\tkl_high\n";
    curves << header("pass@k curves") << "seed\tmodel\ttask\tk\testimate\tn\tc\ttemperature\n";
    frontier << header("pass@1 vs pass@" + std::to_string(cfg_.eval.frontier_k) + " across temperatures")
             << "seed\tmodel\ttask\ttemperature\tpass_at_1\tpass_at_" << cfg_.eval.frontier_k << "\n";
    cx << header("tabular sample-complexity sweep") << "seed\tp\testimator\tn_samples\tmean_l1\tmax_row_l1\tsuccess\n";
    cxs << header("first grid size reaching epsilon") << "seed\tp\tscratch\tdistill\tcoupon_threshold\n";

    for (auto seed : seeds) {
      const auto& D = data(seed);
      std::vector<const Model*> models{&teacher(seed)};
      for (const auto& arm : cfg_.arms) models.push_back(&student(seed, arm));
      // Student arms are compared only when they share data and eval set.
      const auto train_id = dataset_id(D.student_train);
      const auto eval_id = dataset_id(D.eval);
      for (std::size_t i = 1; i < models.size(); ++i)
        if (models[i]->trace.train_set_id != train_id || models[i]->trace.eval_set_id != eval_id)
          throw StageError("figures: arm '" + models[i]->name + "' was trained or evaluated on different data");

      for (const auto* m : models) {
        for (const auto& p : m->trace.points) {
          kl << seed << '\t' << m->name << '\t' << p.step << '\t' << p.sequences_seen << '\t' << detail::fmt(p.kl[0]) << '\t'
             << detail::fmt(p.kl[1]) << '\t' << detail::fmt(p.kl[2]) << '\n';
          ind << seed << '\t' << m->name << '\t' << p.step << '\t' << p.sequences_seen << '\t'
              << detail::fmt(p.induction.accuracy().value_or(std::nan(""))) << '\t' << p.induction.eligible << '\n';
        }
        auto r = report(seed, *m);
        if (r.at("eval_set_id") != eval_id) throw StageError("figures: report for '" + m->name + "' used a different eval set");
        const auto& in = r.at("induction");
        const auto& kc = r.at("kl_by_class");
        fin << seed << '\t' << m->name << '\t' << detail::fmt(detail::num_from(in.at("accuracy"))) << '\t'
            << detail::fmt(detail::num_from(in.at("unfiltered_accuracy"))) << '\t' << in.at("eligible").get<std::int64_t>() << '\t'
            << detail::fmt(detail::num_from(kc.at("low"))) << '\t' << detail::fmt(detail::num_from(kc.at("medium"))) << '\t'
            << detail::fmt(detail::num_from(kc.at("high"))) << '\n';
        auto pk = passk(seed, *m);
        const int n = pk.at("n");
        for (const auto& c : pk.at("curves")) {
          const std::string task = c.at("task");
          const double temp = c.at("temperature");
          double p1 = 0, pf = 0;
          for (const auto& p : c.at("points")) {
            const int k = p.at("k");
            const double est = p.at("estimate");
            curves << seed << '\t' << m->name << '\t' << task << '\t' << k << '\t' << detail::fmt(est) << '\t'
                   << n * c.at("items").get<std::int64_t>() << '\t' << c.at("correct").get<std::int64_t>() << '\t'
                   << detail::fmt(temp) << '\n';
            if (k == 1) p1 = est;
            if (k == cfg_.eval.frontier_k) pf = est;
          }
          frontier << seed << '\t' << m->name << '\t' << task << '\t' << detail::fmt(temp) << '\t' << detail::fmt(p1) << '\t'
                   << detail::fmt(pf) << '\n';
        }
      }
      auto c = complexity(seed);
      for (const auto& sw : c.at("sweeps")) {
        const int p = sw.at("p");
        for (const auto& pt : sw.at("points"))
          cx << seed << '\t' << p << '\t' << pt.at("estimator").get<std::string>() << '\t' << pt.at("n_samples").get<std::int64_t>()
             << '\t' << detail::fmt(pt.at("mean_l1")) << '\t' << detail::fmt(pt.at("max_row_l1")) << '\t'
             << (pt.at("success").get<bool>() ? 1 : 0) << '\n';
        cxs << seed << '\t' << p << '\t' << sw.at("first_success_scratch").get<std::int64_t>() << '\t'
            << sw.at("first_success_distill").get<std::int64_t>() << '\t' << detail::fmt(sw.at("coupon_threshold")) << '\n';
      }
    }

    const auto cross = crossover_point(cfg_.figures.coverage_epsilon, 1);
    const auto table = coverage_table(cfg_.figures.coverage_epsilon, cfg_.figures.coverage_ks);
    cov << header("coverage example, epsilon=" + detail::fmt(cfg_.figures.coverage_epsilon) +
                  ", C2 first beats C1 at k=" + std::to_string(cross.k))
        << "k\tc1\tc2\tc3\n";
    for (const auto& r : table.rows)
      cov << r.k << '\t' << detail::fmt(r.c1) << '\t' << detail::fmt(r.c2) << '\t' << detail::fmt(r.c3) << '\n';

    const std::pair<const char*, std::ostringstream*> files[] = {
        {"figures/row_kl_progress.tsv", &kl},    {"figures/induction_progress.tsv", &ind}, {"figures/final_eval.tsv", &fin},
        {"figures/passk_curves.tsv", &curves},   {"figures/passk_frontier.tsv", &frontier}, {"figures/complexity_sweep.tsv", &cx},
        {"figures/complexity_crossover.tsv", &cxs}, {"figures/coverage.tsv", &cov}};
    for (const auto& [name, os] : files) {
      io::atomic_write(store_.path(name), os->str());
      written.push_back(name);
    }
    record_.stages.push_back({to_string(Stage::figures), "run", "executed",
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), written});
    say("[figures] wrote " + std::to_string(written.size()) + " tables");
    return written;
  }

 private:
  static std::string scope(std::uint64_t seed) { return "seed-" + std::to_string(seed); }
  static std::string seed_dir(std::uint64_t seed) { return "artifacts/" + scope(seed) + "/"; }

  Json training_json(int epochs) const {
    const auto& t = cfg_.training;
    return {{"epochs", epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"warmup_fraction", t.warmup_fraction},
            {"eval_every", t.eval_every},
            {"progress_eval_size", t.progress_eval_size}};
  }

  std::string header(const std::string& what) const {
    std::string seeds;
    for (auto s : cfg_.training.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
    return "# " + what + "\n# config_hash=" + hash_ + "\n# seeds=" + seeds + "\n";
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << msg << std::endl;
  }

  void write_config() const {
    const auto text = canonical_text(cfg_);
    const auto p = store_.path("config.json");
    if (fs::exists(p) && io::read_file(p) != text)
      say("[run] note: replacing config.json from a different configuration");
    io::atomic_write(p, text);
  }

  void fail(const std::string& msg) {
    record_.status = "failed";
    record_.failed_stage = current_;
    record_.error = msg;
    record_.finished = utc_now();
    try {
      store_.put("run.json", record_.to_json().dump(2) + "\n");
    } catch (...) {
    }
  }

  // Reuses the artifacts when every file is valid, otherwise builds them.
  template <class Build, class Load>
  void timed(Stage st, const std::string& where, const std::vector<std::string>& files, Build&& build, Load&& load) {
    const auto prev = current_;
    current_ = to_string(st);
    auto t0 = std::chrono::steady_clock::now();
    const bool reuse = std::all_of(files.begin(), files.end(), [&](const std::string& f) { return store_.valid(f); });
    if (!reuse && inputs_only_) {
      for (const auto& f : files)
        if (!store_.valid(f)) {
          const std::string need = current_;
          current_ = prev;
          throw StageError("figures: missing input " + store_.path(f).string() + " (run stage " + need + " first)");
        }
    }
    try {
      reuse ? load() : build();
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      std::string trail;
      for (const auto& s : record_.stages)
        for (const auto& a : s.artifacts) trail += "\n  " + a;
      throw StageError("stage " + current_ + " (" + where + ") failed: " + e.what() +
                       (trail.empty() ? "" : "\nartifacts completed before the failure:" + trail));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record_.stages.push_back({current_, where, reuse ? "reused" : "executed", secs, files});
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1fs", secs);
    say("[" + current_ + "] " + where + ": " + (reuse ? "reused" : "executed") + " (" + buf + ")");
    current_ = prev;
  }

  void fit(Model& m, Stage st, const std::string& where, const std::string& base, std::uint64_t /*seed*/, const Data& D,
           const SequenceDataset& train_set, const std::vector<SoftLabelField>* fields, const std::string& labels_id,
           const LossSpec& loss, const ModelShape& shape, int epochs, std::uint64_t init_seed, std::uint64_t shuffle_seed) {
    const std::string ckpt = base + ".ckpt", trace = base + ".trace.json";
    timed(st, where, {ckpt, trace}, [&] {
      const auto& t = cfg_.training;
      TrainConfig tc;
      tc.epochs = epochs;
      tc.batch_size = t.batch_size;
      tc.lr = t.lr;
      tc.warmup_fraction = t.warmup_fraction;
      tc.seed = shuffle_seed;
      tc.checkpoint_every = t.eval_every;
      const auto probe = head(D.eval, std::min(t.progress_eval_size, D.eval.size()));
      m.trace = {m.name, dataset_id(train_set), dataset_id(D.eval), labels_id, {}, {}};
      TrainingData td{&train_set, fields, {}};
      auto res = train<float>(shape.resolve(cfg_.data, init_seed), td, loss, tc,
                              [&](std::int64_t step, std::int64_t seen, const ModelParams<float>& P) {
                                TransformerPredictor<float> pred(P);
                                auto kl = row_kl(pred, D.base, probe);
                                m.trace.points.push_back({step, seen, induction_accuracy(pred, probe), kl.class_mean});
                              });
      m.trace.loss = res.loss_trace;
      m.params = std::move(res.params);
      store_.put(ckpt, serialize_checkpoint(m.params, &res.optimizer));
      store_.put(trace, detail::trace_json(m.trace).dump() + "\n");
    }, [&] {
      m.params = deserialize_checkpoint<float>(store_.get(ckpt)).params;
      m.trace = detail::trace_from(Json::parse(store_.get(trace)));
    });
  }

  void run_stage(Stage st) {
    const auto& seeds = cfg_.training.seeds;
    switch (st) {
      case Stage::generate:
        for (auto s : seeds) data(s);
        break;
      case Stage::train_teacher:
        for (auto s : seeds) teacher(s);
        break;
      case Stage::cache_labels:
        for (auto s : seeds) {
          for (const auto& a : cfg_.arms)
            if (needs_labels(a.loss)) labels(s, a.loss);
          labels_.clear();  // dense fields are large; reload per seed when needed
        }
        break;
      case Stage::train_student:
        for (auto s : seeds) {
          for (const auto& a : cfg_.arms) student(s, a);
          labels_.clear();
        }
        break;
      case Stage::eval:
        for (auto s : seeds) {
          report(s, teacher(s));
          for (const auto& a : cfg_.arms) report(s, student(s, a));
        }
        break;
      case Stage::passk:
        for (auto s : seeds) {
          passk(s, teacher(s));
          for (const auto& a : cfg_.arms) passk(s, student(s, a));
        }
        break;
      case Stage::complexity:
        for (auto s : seeds) complexity(s);
        break;
      case Stage::figures:
        figures();
        break;
    }
  }

  ExperimentConfig cfg_;
  ArtifactStore store_;
  std::ostream* log_;
  std::string hash_;
  RunRecord record_;
  std::string current_ = "run";
  bool inputs_only_ = false;
  std::map<std::uint64_t, Data> data_;
  std::map<std::string, Model> models_;
  std::map<std::string, Labels> labels_;
};

}  // namespace dptlab
