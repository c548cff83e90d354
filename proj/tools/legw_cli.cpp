// SPDX-License-Identifier: Apache-2.0
// Command-line front end: legw <run|sweep|tune|schedule-export|probe> <config> [flags]
//
// Exit status: 0 success, 2 a run diverged, 1 any other error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "legw/legw.hpp"

namespace {

using namespace legw;

constexpr int kExitDiverged = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config_path, "config file (key = value lines)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "override a config key, e.g. --set schedule.batch_size=64")->take_all();
  cmd->add_option("--out-dir", c.out_dir, "output directory (overrides out_dir)");
  cmd->add_option("--seed", c.seed, "seed (overrides seed)")->check(CLI::NonNegativeNumber);
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_config(c.config_path);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, std::string(detail::trim(s.substr(0, eq))), std::string(detail::trim(s.substr(eq + 1))));
  }
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  return cfg;
}

void save_resolved_config(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) return;
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream(std::filesystem::path(cfg.out_dir) / "config.txt") << serialize_config(cfg);
}

void print_summary(const RunSummary& s) {
  std::cout << summary_json(s).dump(2) << '\n';
}

int cmd_run(const Common& c, bool force_probe) {
  ExperimentConfig cfg = load(c);
  if (force_probe) cfg.probe_enabled = true;
  save_resolved_config(cfg);
  const RunResult r = run(cfg);
  print_summary(r.summary);
  if (r.summary.diverged) {
    std::cerr << "diverged at iteration " << r.summary.divergence_iteration << ": " << r.summary.divergence_reason
              << '\n';
    return kExitDiverged;
  }
  return 0;
}

int cmd_sweep(const Common& c, bool plan_only) {
  const ExperimentConfig cfg = load(c);
  save_resolved_config(cfg);
  const auto entries = run_sweep(cfg, plan_only);
  write_sweep_csv(std::cout, entries);
  for (const auto& e : entries) {
    if (e.summary && e.summary->diverged) return kExitDiverged;
  }
  return 0;
}

int cmd_tune(const Common& c, const std::string& grid_text) {
  const ExperimentConfig cfg = load(c);
  std::vector<LearningRate> grid;
  for (const auto& s : detail::split(grid_text, ',')) grid.push_back(LearningRate::parse(s));
  save_resolved_config(cfg);
  TuneResult r;
  try {
    r = tune_grid(cfg, grid);
  } catch (const InvalidArgument&) {
    throw;
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return kExitDiverged;
  }
  std::cout << "lr,lr_value,final_metric,diverged\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const RunSummary& s = r.summaries[i];
    std::cout << grid[i].to_string() << ',' << format_double(grid[i].value()) << ','
              << (std::isfinite(s.final_metric) ? format_double(s.final_metric) : std::string()) << ','
              << (s.diverged ? "true" : "false") << '\n';
  }
  std::cout << "best_lr = " << r.best_lr.to_string() << '\n';
  if (!cfg.out_dir.empty()) {
    std::ofstream(std::filesystem::path(cfg.out_dir) / "best_config.txt") << serialize_config(r.best_config);
  }
  return 0;
}

int cmd_schedule_export(const Common& c, const std::string& output) {
  ExperimentConfig cfg = load(c);
  ScheduleSpec s = cfg.schedule;
  if (s.dataset_size == 0) s = resolved_schedule(cfg, load_data(cfg).train.size());
  s.validate();
  if (output == "-") {
    write_schedule_csv(std::cout, s);
    return 0;
  }
  std::filesystem::path path = output;
  if (path.empty()) {
    if (cfg.out_dir.empty()) throw InvalidArgument("no output: give --output or out_dir");
    std::filesystem::create_directories(cfg.out_dir);
    path = std::filesystem::path(cfg.out_dir) / "schedule.csv";
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  write_schedule_csv(f, s);
  std::cout << path.string() << ": " << s.total_iterations() << " iterations, warmup " << s.warmup_iteration_count()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LEGW batch-size scaling: training runs, sweeps and schedules"};
  app.require_subcommand(1);
  Common common;
  bool plan_only = false;
  std::string grid;
  std::string output;

  auto* run_cmd = app.add_subcommand("run", "train one configuration");
  add_common(run_cmd, common);
  auto* sweep_cmd = app.add_subcommand("sweep", "LEGW-scale the base schedule by each sweep factor and train each");
  add_common(sweep_cmd, common);
  sweep_cmd->add_flag("--plan-only", plan_only, "print the scaled schedules without training");
  auto* tune_cmd = app.add_subcommand("tune", "grid-search the base learning rate");
  add_common(tune_cmd, common);
  tune_cmd->add_option("--lr-grid", grid, "comma-separated learning rates, e.g. 0.01,0.02,2^-5")->required();
  auto* export_cmd = app.add_subcommand("schedule-export", "write the per-iteration learning rate as CSV");
  add_common(export_cmd, common);
  export_cmd->add_option("--output,-o", output, "CSV path, '-' for stdout (default out_dir/schedule.csv)");
  auto* probe_cmd = app.add_subcommand("probe", "train with the curvature probe enabled");
  add_common(probe_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run_cmd) return cmd_run(common, false);
    if (*sweep_cmd) return cmd_sweep(common, plan_only);
    if (*tune_cmd) return cmd_tune(common, grid);
    if (*export_cmd) return cmd_schedule_export(common, output);
    if (*probe_cmd) return cmd_run(common, true);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
