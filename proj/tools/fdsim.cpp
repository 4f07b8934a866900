// Command-line entry point: run experiments from JSON configs, sweep the
// co-distillation analytics, drive the RL schemes, and compare reports.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fdsim/errors.hpp"
#include "fdsim/harness.hpp"

namespace {

std::string default_output_dir() {
  const char* env = std::getenv("FDSIM_OUTPUT_DIR");
  return env != nullptr && *env != '\0' ? env : ".";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fdsim: output-exchange distributed learning experiments"};
  app.require_subcommand(1);

  std::string output_dir = default_output_dir();
  app.add_option("--out-dir", output_dir,
                 "output directory (default: $FDSIM_OUTPUT_DIR or '.')");

  // run <config.json>
  auto* run_cmd = app.add_subcommand("run", "run an experiment from a JSON config");
  std::string config_path;
  run_cmd->add_option("config", config_path, "config JSON path")->required();

  // analyze-ntk
  auto* ntk_cmd =
      app.add_subcommand("analyze-ntk", "co-distillation residual curves");
  fdsim::ExperimentConfig ntk_cfg;
  ntk_cfg.scheme = fdsim::ExperimentScheme::kCdAnalytic;
  ntk_cfg.output = "cd_analytic";
  ntk_cmd->add_option("--a", ntk_cfg.analytic.a, "output-weight magnitude a");
  ntk_cmd->add_option("--lambda", ntk_cfg.analytic.lambda, "distillation weight");
  ntk_cmd->add_option("--workers", ntk_cfg.analytic.workers, "worker count C");
  ntk_cmd->add_option("--rounds", ntk_cfg.analytic.rounds, "communication rounds");
  ntk_cmd->add_option("--samples", ntk_cfg.analytic.samples, "sample count n");
  ntk_cmd->add_option("--seed", ntk_cfg.seed, "master seed");
  ntk_cmd->add_option("--output", ntk_cfg.output, "output file stem");

  // frd
  auto* frd_cmd = app.add_subcommand("frd", "reinforcement distillation runs");
  fdsim::ExperimentConfig frd_cfg;
  frd_cfg.scheme = fdsim::ExperimentScheme::kFrd;
  frd_cfg.output = "frd_run";
  std::string frd_scheme = "frd";
  frd_cmd->add_option("--scheme", frd_scheme, "pd | frd | frl");
  frd_cmd->add_option("--agents", frd_cfg.drl.agents, "agent count");
  frd_cmd->add_option("--subspaces", frd_cfg.drl.subspaces, "state subspaces S");
  frd_cmd->add_option("--interval", frd_cfg.drl.exchange_interval,
                      "episodes between exchanges");
  frd_cmd->add_option("--episodes", frd_cfg.drl.episodes, "episode cap");
  frd_cmd->add_option("--seed", frd_cfg.seed, "master seed");
  frd_cmd->add_option("--output", frd_cfg.output, "output file stem");

  // compare <a.csv> <b.csv>
  auto* compare_cmd = app.add_subcommand("compare", "compare two report CSVs");
  std::string report_a, report_b;
  compare_cmd->add_option("a", report_a, "first report CSV")->required();
  compare_cmd->add_option("b", report_b, "second report CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      const auto cfg = fdsim::load_config(config_path);
      const auto result = fdsim::run_experiment(cfg, output_dir);
      std::cout << "metrics:  " << result.metrics_path << '\n'
                << "manifest: " << result.manifest_path << '\n';
    } else if (ntk_cmd->parsed()) {
      ntk_cfg.drl.seed = ntk_cfg.seed;
      const auto result = fdsim::run_experiment(ntk_cfg, output_dir);
      std::cout << "metrics:  " << result.metrics_path << '\n';
    } else if (frd_cmd->parsed()) {
      if (frd_scheme == "pd") frd_cfg.scheme = fdsim::ExperimentScheme::kPd;
      else if (frd_scheme == "frd") frd_cfg.scheme = fdsim::ExperimentScheme::kFrd;
      else if (frd_scheme == "frl") frd_cfg.scheme = fdsim::ExperimentScheme::kFrl;
      else throw fdsim::ValidationError("scheme: unknown value '" + frd_scheme + "'");
      frd_cfg.drl.seed = frd_cfg.seed;
      const auto result = fdsim::run_experiment(frd_cfg, output_dir);
      std::cout << "metrics:  " << result.metrics_path << '\n';
    } else if (compare_cmd->parsed()) {
      std::cout << fdsim::format_compare(fdsim::compare(report_a, report_b));
    }
  } catch (const fdsim::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
