// Command-line front end: generate | evaluate | dump-kernel | sweep.
// Exit codes: 0 success, 1 failed cell or runtime error, 2 configuration error.

#include "spectral_dice/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace h = sdice::harness;

namespace {

struct Common {
  std::string config;
  std::string out;
  int jobs = 1;
  std::uint64_t seed_offset = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory (overrides [output] dir)");
  cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--seed-offset", c.seed_offset, "added to every configured seed");
}

h::ExperimentConfig load(const Common& c) {
  h::ExperimentConfig cfg = h::load_experiment(c.config);
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SpectralDICE off-policy evaluation"};
  app.require_subcommand(1);

  Common gen, eval, dump, sweep;
  auto* cmd_gen = app.add_subcommand("generate", "sample datasets for every (N, seed)");
  add_common(cmd_gen, gen);
  auto* cmd_eval = app.add_subcommand("evaluate", "run every (N, d, seed) cell and write results.csv");
  add_common(cmd_eval, eval);
  auto* cmd_dump = app.add_subcommand("dump-kernel", "write the model kernel of one state as tidy CSV");
  add_common(cmd_dump, dump);
  std::string rep_dir;
  int state = -1;
  cmd_dump->add_option("--rep", rep_dir, "representation directory")->required();
  cmd_dump->add_option("--state", state, "state index (default: [output] kernel_state)");
  auto* cmd_sweep = app.add_subcommand("sweep", "evaluate every combination in the [sweep] section");
  add_common(cmd_sweep, sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*cmd_gen) {
      const auto cfg = load(gen);
      const auto res = h::cmd_generate(cfg, {gen.jobs, gen.seed_offset});
      std::cout << "wrote " << res.datasets.size() << " datasets, manifest " << res.manifest.string() << '\n';
      return 0;
    }
    if (*cmd_eval) {
      const auto cfg = load(eval);
      const auto res = h::cmd_evaluate(cfg, {eval.jobs, eval.seed_offset});
      std::cout << "wrote " << res.rows.size() << " rows to " << res.results_csv.string() << '\n';
      if (res.failed_cells) std::cerr << res.failed_cells << " cell(s) failed; see the status column\n";
      return res.failed_cells ? 1 : 0;
    }
    if (*cmd_dump) {
      const auto cfg = load(dump);
      const int s = state >= 0 ? state : cfg.kernel_state;
      const auto path = cfg.out_dir / ("kernel_state" + std::to_string(s) + ".csv");
      h::cmd_dump_kernel(cfg, rep_dir, s, path);
      std::cout << "wrote " << path.string() << '\n';
      return 0;
    }
    if (*cmd_sweep) {
      const auto cfg = load(sweep);
      const auto res = h::cmd_sweep(cfg, {sweep.jobs, sweep.seed_offset});
      std::cout << "ran " << res.combos << " combinations, summary " << res.summary_csv.string() << '\n';
      return res.failed_cells ? 1 : 0;
    }
  } catch (const h::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
