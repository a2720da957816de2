// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: run and ablate class-incremental experiments,
// re-check emitted reports, and gradient-check the backward pass.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>

#include "mos/config.hpp"
#include "mos/gradcheck.hpp"
#include "mos/harness.hpp"
#include "mos/report.hpp"

#include "CLI11.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 1;
constexpr int kExitRuntimeError = 2;

mos::ExperimentConfig load_config(const std::string& path, bool seed_set, std::uint64_t seed) {
  mos::ExperimentConfig cfg = mos::ExperimentConfig::from_json_file(path);
  if (seed_set) cfg.seed = seed;
  mos::apply_env_overrides(cfg);
  return cfg;
}

void print_report(const mos::MetricsReport& report) {
  std::printf("stage  classes  accuracy  retrieval  iters  cycles\n");
  for (const mos::StageMetrics& s : report.stages)
    std::printf("%5zu  %7zu  %8.2f  %9.3f  %5.2f  %6.3f\n", s.stage, s.classes_seen, s.accuracy,
                s.retrieval_accuracy, s.mean_refine_iterations, s.cycle_rate);
  std::printf("last accuracy    %.2f\n", report.last_accuracy);
  std::printf("average accuracy %.2f\n", report.average_accuracy);
}

int cmd_run(const std::string& config_path, bool seed_set, std::uint64_t seed) {
  const mos::ExperimentConfig cfg = load_config(config_path, seed_set, seed);
  const mos::MetricsReport report = mos::run_experiment(cfg);
  print_report(report);
  std::printf("outputs written to %s\n", cfg.output_dir.c_str());
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, bool seed_set, std::uint64_t seed) {
  const mos::ExperimentConfig cfg = load_config(config_path, seed_set, seed);
  const auto rows = mos::run_ablation(cfg);
  std::printf("%-12s  %8s  %8s\n", "variant", "last", "average");
  for (const mos::AblationRow& row : rows)
    std::printf("%-12s  %8.2f  %8.2f\n", row.variant.c_str(), row.report.last_accuracy,
                row.report.average_accuracy);
  std::printf("comparison written to %s\n", cfg.output_dir.c_str());
  return kExitOk;
}

int cmd_report(const std::string& dir) {
  const mos::MetricsReport report = mos::MetricsReport::from_json_file(dir + "/metrics.json");
  print_report(report);
  std::string why;
  if (!mos::verify_report_consistency(report, &why)) {
    std::fprintf(stderr, "report inconsistent: %s\n", why.c_str());
    return kExitRuntimeError;
  }
  std::printf("summary fields verified against per-stage values\n");
  return kExitOk;
}

int cmd_gradcheck() {
  const mos::GradCheckResult res = mos::run_gradient_check();
  std::printf("configs checked      %zu\n", res.configs);
  std::printf("gradient entries     %zu\n", res.parameters_checked);
  std::printf("mismatches           %zu\n", res.failures);
  std::printf("worst relative error %.3e\n", res.worst_rel_error);
  if (!res.ok()) {
    std::fprintf(stderr, "gradient check FAILED\n");
    return kExitRuntimeError;
  }
  std::printf("gradient check passed\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    CLI::App app{"MOS: merged-adapter class-incremental learning harness"};
    app.require_subcommand(1);

    std::string config_path;
    std::string report_dir;
    std::uint64_t seed = 0;

    CLI::App* run = app.add_subcommand("run", "Run one experiment from a JSON config");
    run->add_option("--config", config_path, "Experiment config JSON")->required();
    CLI::Option* run_seed = run->add_option("--seed", seed, "Override the config seed");

    CLI::App* ablate = app.add_subcommand("ablate", "Run the component ablation ladder");
    ablate->add_option("--config", config_path, "Experiment config JSON")->required();
    CLI::Option* ablate_seed = ablate->add_option("--seed", seed, "Override the config seed");

    CLI::App* report = app.add_subcommand("report", "Print and verify an emitted report");
    report->add_option("--dir", report_dir, "Directory containing metrics.json")->required();

    app.add_subcommand("gradcheck", "Finite-difference check of the backward pass");

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      return app.exit(e) == 0 ? kExitOk : kExitConfigError;
    }

    if (run->parsed()) return cmd_run(config_path, !run_seed->empty(), seed);
    if (ablate->parsed()) return cmd_ablate(config_path, !ablate_seed->empty(), seed);
    if (report->parsed()) return cmd_report(report_dir);
    return cmd_gradcheck();
  } catch (const mos::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntimeError;
  }
}
