// Benchmark CLI. `bench run` executes the experiment named in the config
// (grid, sweep, single, or bounds); `bench bounds` forces the bound-table
// experiment on any config. Exit code 0 on a clean run, 2 when any cell
// was flagged (episode error or broken rollout budget), 1 on bad config
// content; argument errors exit with CLI11's own nonzero codes.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "mpt/mpt.hpp"

namespace {

int run(const std::string& config_path, std::optional<std::uint64_t> seed,
        const std::string& out_dir, int workers, bool quiet,
        std::optional<std::string> experiment_override) {
  mpt::ExperimentConfig cfg =
      mpt::load_config(config_path, seed, experiment_override);
  mpt::BenchRunner runner(cfg, out_dir, workers);
  if (!quiet) {
    runner.set_progress(
        [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); });
  }
  const int code = runner.run();
  if (!quiet) {
    std::fprintf(stderr, "experiment %s finished with exit code %d\n",
                 cfg.experiment.c_str(), code);
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"planning benchmark harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "bench_out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 1;
  bool quiet = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "master seed override")
        ->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--workers", workers, "worker thread count")
        ->check(CLI::Range(1, 1024));
    cmd->add_flag("--quiet", quiet, "suppress progress output");
  };

  CLI::App* cmd_run = app.add_subcommand("run", "run the configured experiment");
  add_common(cmd_run);
  CLI::App* cmd_bounds =
      app.add_subcommand("bounds", "tabulate steady-state error bounds");
  add_common(cmd_bounds);

  CLI11_PARSE(app, argc, argv);

  try {
    const std::optional<std::uint64_t> seed_opt =
        seed_set ? std::optional<std::uint64_t>(seed) : std::nullopt;
    if (cmd_bounds->parsed()) {
      return run(config_path, seed_opt, out_dir, workers, quiet, "bounds");
    }
    return run(config_path, seed_opt, out_dir, workers, quiet, std::nullopt);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
