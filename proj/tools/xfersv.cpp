// xfersv: command-line front end for data generation, the three training
// stages, evaluation, gradient checking and end-to-end reproduction.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xfersv/experiment.hpp"

namespace {

using namespace xfersv;

struct Common {
  std::string config_path;
  std::string output_dir;

  ExperimentConfig load() const {
    std::optional<std::string> path;
    if (!config_path.empty()) path = config_path;
    return load_experiment_config(path, output_dir);
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "JSON experiment config (defaults used when omitted)");
  cmd->add_option("--output-dir", common.output_dir, "Root directory for all outputs (overrides the config)");
}

// "name=path" or a bare path, whose name is derived from the file stem.
std::pair<std::string, std::string> split_named(const std::string& item, const std::string& strip_prefix) {
  const auto eq = item.find('=');
  if (eq != std::string::npos) return {item.substr(0, eq), item.substr(eq + 1)};
  std::string stem = fs::path(item).stem().string();
  if (!strip_prefix.empty() && stem.rfind(strip_prefix, 0) == 0) stem = stem.substr(strip_prefix.size());
  return {stem, item};
}

void print_gradcheck(const GradcheckSummary& s) {
  std::printf("gradcheck: %zu instances, threshold %.0e\n", s.instances, s.threshold);
  for (const auto& [name, err] : s.max_error) {
    std::printf("  %-12s max rel err %.3e  %s\n", name.c_str(), err, err < s.threshold ? "ok" : "FAIL");
  }
  std::printf("%s\n", s.passed() ? "PASS" : "FAIL");
}

int run(int argc, char** argv) {
  CLI::App app{"Teacher/student transfer learning for far-field speaker verification"};
  app.require_subcommand(1);

  Common gen_common, train_common, eval_common, repro_common;

  CLI::App* gen = app.add_subcommand("gen-data", "Synthesize the corpus, trial lists and manifest");
  add_common(gen, gen_common);

  CLI::App* train = app.add_subcommand("train", "Train one stage");
  add_common(train, train_common);
  std::string stage;
  std::vector<std::string> recipes;
  train->add_option("--stage", stage, "baseline | teacher | student")
      ->required()
      ->check(CLI::IsMember({"baseline", "teacher", "student"}));
  train->add_option("--recipe", recipes, "Student loss recipe, e.g. CE_F'_I (default: every configured recipe)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "Score trials and write the comparison report");
  add_common(evaluate, eval_common);
  std::vector<std::string> checkpoints, trials;
  evaluate->add_option("--checkpoints", checkpoints, "name=path entries (default: every pipeline checkpoint)");
  evaluate->add_option("--trials", trials, "condition=path entries (default: the generated trial lists)");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Compare analytical gradients with central differences");
  std::uint64_t gc_seed = 1;
  std::size_t gc_trials = 100;
  double gc_perturb = 0.0;
  gradcheck->add_option("--seed", gc_seed, "Root seed");
  gradcheck->add_option("--trials", gc_trials, "Random instances per loss")->check(CLI::PositiveNumber);
  gradcheck->add_option("--perturb", gc_perturb, "Scale analytical gradients by (1 + x); fault-injection hook");

  CLI::App* repro = app.add_subcommand("reproduce", "gen-data, all training stages and evaluation");
  add_common(repro, repro_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) {
    const ExperimentConfig config = gen_common.load();
    run_gen_data(config);
    std::printf("wrote %s (config hash %s)\n", Layout{config.output_dir}.data_dir().c_str(), config.hash().c_str());
    return kExitOk;
  }

  if (train->parsed()) {
    const ExperimentConfig config = train_common.load();
    if (stage == "baseline") {
      run_train_baseline(config);
    } else if (stage == "teacher") {
      run_train_teacher(config);
    } else {
      if (recipes.empty()) recipes = config.recipes;
      for (const std::string& r : recipes) {
        Recipe recipe;
        try {
          recipe = Recipe::parse(r);
        } catch (const Error& e) {
          throw StageError(kExitConfig, e.what());
        }
        const FreezeRecord f = run_train_student(config, recipe);
        std::printf("student %s: teacher hash %s -> %s\n", recipe.name().c_str(), f.checkpoint_hash_before.c_str(),
                    f.checkpoint_hash_after.c_str());
      }
      return kExitOk;
    }
    std::printf("trained %s\n", stage.c_str());
    return kExitOk;
  }

  if (evaluate->parsed()) {
    const ExperimentConfig config = eval_common.load();
    std::vector<SystemSpec> systems;
    for (const std::string& c : checkpoints) {
      auto [name, path] = split_named(c, "");
      systems.push_back({name, path});
    }
    if (systems.empty()) systems = default_systems(config);
    std::vector<ConditionSpec> conditions;
    for (const std::string& t : trials) {
      auto [name, path] = split_named(t, "trials_");
      conditions.push_back({name, path});
    }
    if (conditions.empty()) conditions = default_conditions(config);
    const MetricsReport report = run_evaluate(config, systems, conditions);
    std::cout << report.to_table();
    return kExitOk;
  }

  if (gradcheck->parsed()) {
    const GradcheckSummary s = run_gradcheck(gc_seed, gc_trials, gc_perturb);
    print_gradcheck(s);
    return s.passed() ? kExitOk : kExitCheckFailed;
  }

  if (repro->parsed()) {
    const ExperimentConfig config = repro_common.load();
    const ReproduceResult r = run_reproduce(config, [](const std::string& step) {
      std::fprintf(stderr, "[xfersv] %s\n", step.c_str());
    });
    std::cout << r.report.to_table();
    std::printf("done in %.1f s\n", r.seconds);
    return kExitOk;
  }
  return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const StageError& e) {
    std::fprintf(stderr, "xfersv: %s\n", e.what());
    return e.code();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "xfersv: config error: %s\n", e.what());
    return kExitConfig;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "xfersv: %s\n", e.what());
    return kExitConfig;
  } catch (const LookupError& e) {
    std::fprintf(stderr, "xfersv: %s\n", e.what());
    return kExitDataResolution;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "xfersv: %s\n", e.what());
    return kExitDataResolution;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "xfersv: %s\n", e.what());
    return kExitCheckFailed;
  }
}
