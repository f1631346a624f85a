// Experiment configuration: a JSON document with strict schema validation.
// Every key has a default; unknown keys are rejected with their full path.
#pragma once

#include <json.hpp>

#include <cctype>
#include <set>
#include <string>
#include <vector>

#include "dptlab/core.hpp"
#include "dptlab/io.hpp"
#include "dptlab/loss.hpp"
#include "dptlab/markov.hpp"
#include "dptlab/transformer.hpp"

namespace dptlab {

using Json = nlohmann::json;

struct DataConfig {
  int k = 64;
  int length = 64;
  double low_fraction = 1.0 / 3.0;
  double medium_fraction = 1.0 / 3.0;
  int triggers = 10;
  std::size_t teacher_size = 16000;
  std::size_t student_size = 8000;
  std::size_t eval_size = 4000;
  bool student_subset = true;  // student set = first student_size teacher sequences
  bool per_trigger_targets = false;
  CopyTargetPool copy_pool = CopyTargetPool::non_trigger;
  double trigger_boost = 1.0;
};

struct ModelShape {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  ModelConfig resolve(const DataConfig& d, std::uint64_t seed) const {
    ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.d_mlp = d_mlp;
    c.max_len = d.length;
    c.vocab = d.k;
    c.seed = seed;
    c.init_std = init_std;
    c.ln_eps = ln_eps;
    return c;
  }
};

struct ArmConfig {
  std::string name;
  LossSpec loss;
};

struct TrainingConfig {
  int teacher_epochs = 4;
  int student_epochs = 8;
  int batch_size = 64;
  double lr = 3e-4;
  double warmup_fraction = 0.01;
  std::int64_t eval_every = 25;        // steps between progress evaluations
  std::size_t progress_eval_size = 1000;  // eval sequences used for progress curves
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct EvalConfig {
  std::vector<int> passk_ks{1, 2, 4, 8, 16};
  int passk_samples = 32;
  std::vector<double> temperatures;  // default 0, 0.1, ..., 1.5
  std::size_t copy_items = 1000;
  std::size_t row_items = 1000;
  EntropyClass row_class = EntropyClass::medium;
  int frontier_k = 16;

  EvalConfig() {
    for (int i = 0; i <= 15; ++i) temperatures.push_back(i / 10.0);
  }
};

struct ComplexityConfig {
  int k = 64;
  std::vector<int> sparsities{4, 64};
  double epsilon = 0.5;
  double delta = 0.1;
  std::vector<std::int64_t> grid{64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536};
  int trials = 10;
};

struct FiguresConfig {
  double coverage_epsilon = 0.1;
  std::vector<int> coverage_ks{1, 2, 4, 8, 16, 32};
};

struct ExperimentConfig {
  DataConfig data;
  ModelShape teacher{2, 128, 4, 0, 0.02, 1e-5};
  ModelShape student{2, 64, 4, 0, 0.02, 1e-5};
  LossSpec loss;  // base for the distillation arms
  std::vector<ArmConfig> arms;
  TrainingConfig training;
  EvalConfig eval;
  ComplexityConfig complexity;
  FiguresConfig figures;
  std::string output_dir = "runs/default";

  ExperimentConfig() {
    LossSpec ce = loss;
    ce.alpha = 0.0;
    LossSpec routed = loss;
    routed.routing_fraction = 0.15;
    arms = {{"ce", ce}, {"kd", loss}, {"kd_routed", routed}};
  }

  const ArmConfig& arm(std::string_view name) const {
    for (const auto& a : arms)
      if (a.name == name) return a;
    throw ValidationError("config: no arm named '" + std::string(name) + "'");
  }

  void validate() const;
};

namespace detail {

// Reads keys from one JSON object, remembering which were consumed so the
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + label() + "' must be an object");
  }

  // Rejects any key that no get()/child() call asked for.
  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ValidationError("config: unknown key '" + join(it.key()) + "'");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("config: '" + join(key) + "' has the wrong type");
    }
  }

  const Json* child(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string join(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void fail_field(const std::string& field, const std::string& msg) {
  throw ValidationError("config: '" + field + "' " + msg);
}

inline Json loss_to_json(const LossSpec& l) {
  return {{"alpha", l.alpha},
          {"temperature", l.temperature},
          {"routing_fraction", l.routing_fraction},
          {"sparsity_mode", to_string(l.sparsity_mode)},
          {"sparsity_k", l.sparsity_k},
          {"classical", l.classical},
          {"rescale_routed", l.rescale_routed}};
}

inline void loss_from_json(const Json& j, const std::string& path, LossSpec& l) {
  Section s(j, path);
  s.get("alpha", l.alpha);
  s.get("temperature", l.temperature);
  s.get("routing_fraction", l.routing_fraction);
  std::string mode = to_string(l.sparsity_mode);
  s.get("sparsity_mode", mode);
  try {
    l.sparsity_mode = sparsity_mode_from_string(mode);
  } catch (const ValidationError&) {
    fail_field(s.join("sparsity_mode"), "must be one of dense, top-k, sample-k");
  }
  // "all" keeps every token; stored as 0.
  if (const auto* k = s.child("sparsity_k"); k && k->is_string()) {
    if (*k != "all") fail_field(s.join("sparsity_k"), "must be a positive integer or \"all\"");
    l.sparsity_k = 0;
  } else {
    s.get("sparsity_k", l.sparsity_k);
  }
  s.get("classical", l.classical);
  s.get("rescale_routed", l.rescale_routed);
  s.done();
}

inline Json shape_to_json(const ModelShape& m) {
  return {{"n_layers", m.n_layers}, {"d_model", m.d_model}, {"n_heads", m.n_heads},
          {"d_mlp", m.d_mlp},       {"init_std", m.init_std}, {"ln_eps", m.ln_eps}};
}

inline void shape_from_json(const Json& j, const std::string& path, ModelShape& m) {
  Section s(j, path);
  s.get("n_layers", m.n_layers);
  s.get("d_model", m.d_model);
  s.get("n_heads", m.n_heads);
  s.get("d_mlp", m.d_mlp);
  s.get("init_std", m.init_std);
  s.get("ln_eps", m.ln_eps);
  s.done();
}

inline const char* pool_name(CopyTargetPool p) { return p == CopyTargetPool::any ? "any" : "non_trigger"; }

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  Json arms = Json::array();
  for (const auto& a : c.arms) arms.push_back({{"name", a.name}, {"loss", detail::loss_to_json(a.loss)}});
  return {
      {"data",
       {{"k", c.data.k},
        {"length", c.data.length},
        {"low_fraction", c.data.low_fraction},
        {"medium_fraction", c.data.medium_fraction},
        {"triggers", c.data.triggers},
        {"teacher_size", c.data.teacher_size},
        {"student_size", c.data.student_size},
        {"eval_size", c.data.eval_size},
        {"student_subset", c.data.student_subset},
        {"per_trigger_targets", c.data.per_trigger_targets},
        {"copy_pool", detail::pool_name(c.data.copy_pool)},
        {"trigger_boost", c.data.trigger_boost}}},
      {"teacher", detail::shape_to_json(c.teacher)},
      {"student", detail::shape_to_json(c.student)},
      {"loss", detail::loss_to_json(c.loss)},
      {"arms", arms},
      {"training",
       {{"teacher_epochs", c.training.teacher_epochs},
        {"student_epochs", c.training.student_epochs},
        {"batch_size", c.training.batch_size},
        {"lr", c.training.lr},
        {"warmup_fraction", c.training.warmup_fraction},
        {"eval_every", c.training.eval_every},
        {"progress_eval_size", c.training.progress_eval_size},
        {"seeds", c.training.seeds}}},
      {"eval",
       {{"passk_ks", c.eval.passk_ks},
        {"passk_samples", c.eval.passk_samples},
        {"temperatures", c.eval.temperatures},
        {"copy_items", c.eval.copy_items},
        {"row_items", c.eval.row_items},
        {"row_class", to_string(c.eval.row_class)},
        {"frontier_k", c.eval.frontier_k}}},
      {"complexity",
       {{"k", c.complexity.k},
        {"sparsities", c.complexity.sparsities},
        {"epsilon", c.complexity.epsilon},
        {"delta", c.complexity.delta},
        {"grid", c.complexity.grid},
        {"trials", c.complexity.trials}}},
      {"figures", {{"coverage_epsilon", c.figures.coverage_epsilon}, {"coverage_ks", c.figures.coverage_ks}}},
      {"output_dir", c.output_dir},
  };
}

inline void ExperimentConfig::validate() const {
  using detail::fail_field;
  if (data.k < 2) fail_field("data.k", "must be >= 2, got " + std::to_string(data.k));
  if (data.length < 2) fail_field("data.length", "must be >= 2");
  if (data.low_fraction < 0 || data.medium_fraction < 0 || data.low_fraction + data.medium_fraction > 1.0 + 1e-12)
    fail_field("data.low_fraction", "and data.medium_fraction must be nonnegative with sum <= 1");
  if (data.triggers < 0 || data.triggers >= data.k) fail_field("data.triggers", "must be in [0, k)");
  if (data.teacher_size < 1 || data.student_size < 1 || data.eval_size < 1)
    fail_field("data.teacher_size", "and the student/eval sizes must be >= 1");
  if (data.student_subset && data.student_size > data.teacher_size)
    fail_field("data.student_size", "cannot exceed teacher_size when student_subset is set");
  if (!(data.trigger_boost > 0)) fail_field("data.trigger_boost", "must be > 0");
  for (const auto* m : {&teacher, &student}) {
    const char* who = m == &teacher ? "teacher" : "student";
    try {
      m->resolve(data, 0).validate();
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("config: '") + who + "' " + e.what());
    }
  }
  auto check_loss = [&](const LossSpec& l, const std::string& where) {
    try {
      l.validate(data.k);
    } catch (const ValidationError& e) {
      throw ValidationError("config: '" + where + "' " + e.what());
    }
  };
  check_loss(loss, "loss");
  if (arms.empty()) fail_field("arms", "must list at least one student arm");
  std::set<std::string> names;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto where = "arms[" + std::to_string(i) + "]";
    if (arms[i].name.empty() || arms[i].name == "teacher") fail_field(where + ".name", "must be non-empty and not 'teacher'");
    for (char ch : arms[i].name)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-'))
        fail_field(where + ".name", "may only contain letters, digits, '_' and '-'");
    if (!names.insert(arms[i].name).second) fail_field(where + ".name", "duplicates an earlier arm");
    check_loss(arms[i].loss, where + ".loss");
  }
  if (training.teacher_epochs < 1) fail_field("training.teacher_epochs", "must be >= 1");
  if (training.student_epochs < 1) fail_field("training.student_epochs", "must be >= 1");
  if (training.batch_size < 1) fail_field("training.batch_size", "must be >= 1");
  if (!(training.lr > 0)) fail_field("training.lr", "must be > 0");
  if (training.warmup_fraction < 0 || training.warmup_fraction >= 1) fail_field("training.warmup_fraction", "must be in [0,1)");
  if (training.eval_every < 0) fail_field("training.eval_every", "must be >= 0");
  if (training.seeds.empty()) fail_field("training.seeds", "must list at least one seed");
  if (std::set<std::uint64_t>(training.seeds.begin(), training.seeds.end()).size() != training.seeds.size())
    fail_field("training.seeds", "must be distinct");
  if (eval.passk_samples < 1) fail_field("eval.passk_samples", "must be >= 1");
  if (eval.passk_ks.empty()) fail_field("eval.passk_ks", "must not be empty");
  for (int k : eval.passk_ks)
    if (k < 1 || k > eval.passk_samples) fail_field("eval.passk_ks", "entries must be in [1, passk_samples]");
  if (eval.frontier_k < 1 || eval.frontier_k > eval.passk_samples) fail_field("eval.frontier_k", "must be in [1, passk_samples]");
  for (double t : eval.temperatures)
    if (!(t >= 0)) fail_field("eval.temperatures", "entries must be >= 0");
  if (complexity.k < 2) fail_field("complexity.k", "must be >= 2");
  for (int p : complexity.sparsities)
    if (p < 1 || p > complexity.k) fail_field("complexity.sparsities", "entries must be in [1, k]");
  if (!(complexity.epsilon > 0 && complexity.epsilon <= 2)) fail_field("complexity.epsilon", "must be in (0, 2]");
  if (!(complexity.delta > 0 && complexity.delta < 1)) fail_field("complexity.delta", "must be in (0, 1)");
  if (complexity.grid.empty()) fail_field("complexity.grid", "must not be empty");
  for (auto n : complexity.grid)
    if (n < 1) fail_field("complexity.grid", "entries must be >= 1");
  if (complexity.trials < 1) fail_field("complexity.trials", "must be >= 1");
  if (!(figures.coverage_epsilon > 0 && figures.coverage_epsilon < 0.5)) fail_field("figures.coverage_epsilon", "must be in (0, 1/2)");
  for (int k : figures.coverage_ks)
    if (k < 1) fail_field("figures.coverage_ks", "entries must be >= 1");
  if (output_dir.empty()) fail_field("output_dir", "must not be empty");
}

inline ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  {
    detail::Section root(j, "");
    if (auto* d = root.child("data")) {
      detail::Section s(*d, "data");
      s.get("k", c.data.k);
      s.get("length", c.data.length);
      s.get("low_fraction", c.data.low_fraction);
      s.get("medium_fraction", c.data.medium_fraction);
      s.get("triggers", c.data.triggers);
      s.get("teacher_size", c.data.teacher_size);
      s.get("student_size", c.data.student_size);
      s.get("eval_size", c.data.eval_size);
      s.get("student_subset", c.data.student_subset);
      s.get("per_trigger_targets", c.data.per_trigger_targets);
      std::string pool = detail::pool_name(c.data.copy_pool);
      s.get("copy_pool", pool);
      if (pool == "any")
        c.data.copy_pool = CopyTargetPool::any;
      else if (pool == "non_trigger")
        c.data.copy_pool = CopyTargetPool::non_trigger;
      else
        detail::fail_field("data.copy_pool", "must be 'any' or 'non_trigger'");
      s.get("trigger_boost", c.data.trigger_boost);
      s.done();
    }
    if (auto* t = root.child("teacher")) detail::shape_from_json(*t, "teacher", c.teacher);
    if (auto* t = root.child("student")) detail::shape_from_json(*t, "student", c.student);
    if (auto* l = root.child("loss")) detail::loss_from_json(*l, "loss", c.loss);
    if (auto* a = root.child("arms")) {
      if (!a->is_array()) detail::fail_field("arms", "must be an array");
      c.arms.clear();
      for (std::size_t i = 0; i < a->size(); ++i) {
        const auto where = "arms[" + std::to_string(i) + "]";
        detail::Section s((*a)[i], where);
        ArmConfig arm{{}, c.loss};  // arm losses override the base loss field by field
        s.get("name", arm.name);
        if (auto* l = s.child("loss")) detail::loss_from_json(*l, where + ".loss", arm.loss);
        s.done();
        c.arms.push_back(std::move(arm));
      }
    }
    if (auto* t = root.child("training")) {
      detail::Section s(*t, "training");
      s.get("teacher_epochs", c.training.teacher_epochs);
      s.get("student_epochs", c.training.student_epochs);
      s.get("batch_size", c.training.batch_size);
      s.get("lr", c.training.lr);
      s.get("warmup_fraction", c.training.warmup_fraction);
      s.get("eval_every", c.training.eval_every);
      s.get("progress_eval_size", c.training.progress_eval_size);
      s.get("seeds", c.training.seeds);
      s.done();
    }
    if (auto* e = root.child("eval")) {
      detail::Section s(*e, "eval");
      s.get("passk_ks", c.eval.passk_ks);
      s.get("passk_samples", c.eval.passk_samples);
      s.get("temperatures", c.eval.temperatures);
      s.get("copy_items", c.eval.copy_items);
      s.get("row_items", c.eval.row_items);
      std::string cls = to_string(c.eval.row_class);
      s.get("row_class", cls);
      try {
        c.eval.row_class = entropy_class_from_string(cls);
      } catch (const ValidationError&) {
        detail::fail_field("eval.row_class", "must be low, medium or high");
      }
      s.get("frontier_k", c.eval.frontier_k);
      s.done();
    }
    if (auto* x = root.child("complexity")) {
      detail::Section s(*x, "complexity");
      s.get("k", c.complexity.k);
      s.get("sparsities", c.complexity.sparsities);
      s.get("epsilon", c.complexity.epsilon);
      s.get("delta", c.complexity.delta);
      s.get("grid", c.complexity.grid);
      s.get("trials", c.complexity.trials);
      s.done();
    }
    if (auto* f = root.child("figures")) {
      detail::Section s(*f, "figures");
      s.get("coverage_epsilon", c.figures.coverage_epsilon);
      s.get("coverage_ks", c.figures.coverage_ks);
      s.done();
    }
    root.get("output_dir", c.output_dir);
    root.done();
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config: malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

// Canonical text: keys sorted, fixed indentation. Its hash names the run.
// output_dir is left out so the same experiment hashes the same wherever it is written.
inline std::string canonical_text(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  return j.dump(2) + "\n";
}

inline std::string config_hash(const ExperimentConfig& c) { return io::sha256_hex(canonical_text(c)); }

}  // namespace dptlab
