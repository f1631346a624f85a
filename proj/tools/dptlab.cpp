// Command-line driver for the distillation sandbox pipeline.
#include <CLI11.hpp>
#include <Eigen/Core>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dptlab/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool single_thread = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON experiment config (defaults are used when omitted)");
  cmd->add_option("--seed", c.seed, "Run a single replicate with this seed instead of the configured list");
  cmd->add_option("--out", c.out, "Output directory (overrides output_dir in the config)");
  cmd->add_flag("--single-thread", c.single_thread, "Force single-threaded, bit-stable execution");
}

dptlab::ExperimentConfig load(const Common& c) {
  dptlab::ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    std::string text;
    try {
      text = dptlab::io::read_file(c.config_path);
    } catch (const std::exception& e) {
      throw dptlab::ValidationError(std::string("cannot read config: ") + e.what());
    }
    cfg = dptlab::parse_config(text);
  }
  if (c.seed) cfg.training.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dptlab: distilled-pretraining bigram sandbox"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::string> stage_names;

  struct Entry {
    const char* name;
    const char* help;
    std::optional<dptlab::Stage> stage;  // empty for composite commands
  };
  const Entry entries[] = {
      {"generate", "Sample the transition matrix and the teacher, student and eval datasets", dptlab::Stage::generate},
      {"train-teacher", "Train the teacher on its dataset", dptlab::Stage::train_teacher},
      {"cache-labels", "Cache teacher soft labels for the student dataset", dptlab::Stage::cache_labels},
      {"train-student", "Train every student arm", dptlab::Stage::train_student},
      {"eval", "Evaluate teacher and students on the held-out set", dptlab::Stage::eval},
      {"passk", "Sample-and-score pass@k curves across the temperature grid", dptlab::Stage::passk},
      {"complexity", "Run the tabular sample-complexity sweep", dptlab::Stage::complexity},
      {"figures", "Emit plot-data tables for every figure", dptlab::Stage::figures},
      {"run", "Run a list of stages (all by default)", std::nullopt},
  };
  std::vector<std::pair<CLI::App*, std::optional<dptlab::Stage>>> cmds;
  for (const auto& e : entries) {
    auto* cmd = app.add_subcommand(e.name, e.help);
    add_common(cmd, common);
    if (!e.stage) cmd->add_option("--stage", stage_names, "Stage to run; repeatable, in order")->take_all();
    cmds.emplace_back(cmd, e.stage);
  }
  auto* show = app.add_subcommand("config", "Print the resolved configuration as JSON");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    auto cfg = load(common);
    Eigen::setNbThreads(1);  // the library never parallelizes; this pins Eigen as well
    if (show->parsed()) {
      std::cout << dptlab::to_json(cfg).dump(2) << "\n";
      return 0;
    }
    std::vector<dptlab::Stage> stages;
    for (const auto& [cmd, st] : cmds) {
      if (!cmd->parsed()) continue;
      if (st) {
        stages = {*st};
      } else if (stage_names.empty()) {
        stages = dptlab::all_stages();
      } else {
        for (const auto& s : stage_names) stages.push_back(dptlab::stage_from_string(s));
      }
    }
    dptlab::Pipeline pipeline(cfg, cfg.output_dir);
    auto rec = pipeline.run(stages);
    std::cerr << "[run] " << rec.status << "; record at " << (pipeline.store().root() / "run.json").string() << "\n";
    return 0;
  } catch (const dptlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const dptlab::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
