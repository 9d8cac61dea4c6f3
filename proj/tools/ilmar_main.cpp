// Command-line frontend.  Exit codes: 0 success, 1 usage/configuration
// error, 2 numerical failure.

#include "CLI11.hpp"

#include "ilmar/commands.hpp"

#include <cstdint>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{
      "Offline imitation-learning lab: weighted behavior cloning with a "
      "meta-learned action ranker, on small exactly solvable tasks"};
  app.require_subcommand(1);

  ilmar::CommonOpts o;
  const auto add_common = [&](CLI::App* sc, bool with_data) {
    sc->add_option("--config", o.config_path, "INI config file");
    sc->add_option("--out", o.out, "output root directory");
    sc->add_option("--seed", o.seeds, "seed, or comma-separated seed list")
        ->delimiter(',');
    sc->add_flag("--force", o.force, "replace existing outputs");
    if (with_data)
      sc->add_option("--data", o.data_path,
                     "dataset .jsonl (overrides data.path from the config)");
  };

  auto* gen = app.add_subcommand(
      "gen-data", "build the tiered demonstration mixture for a task");
  add_common(gen, false);

  auto* tr = app.add_subcommand("train", "train one run per seed");
  add_common(tr, true);

  auto* sw = app.add_subcommand(
      "sweep", "grid over the two objective coefficients");
  add_common(sw, true);

  std::string run_dir, eval_data;
  int episodes = 0;
  auto* ev = app.add_subcommand(
      "evaluate", "roll out a finished run's policy checkpoint");
  ev->add_option("run_dir", run_dir, "run directory")->required();
  ev->add_option("--data", eval_data,
                 "dataset file (required when the run standardized inputs)");
  ev->add_option("--episodes", episodes,
                 "episode count (0 uses the run's configured count)");

  std::string runs_root, an_data;
  auto* an = app.add_subcommand(
      "analyze", "aggregate curves and diagnostics over finished runs");
  an->add_option("runs_root", runs_root,
                 "directory holding <mode>/<task>/<seed> runs")
      ->required();
  an->add_option("--data", an_data,
                 "dataset file, enables ranker-weight correlation");

  int trials = 10;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand(
      "gradcheck", "meta-gradient three-way agreement check on tiny nets");
  gc->add_option("--trials", trials, "number of random trials");
  gc->add_option("--seed", gc_seed, "base seed for the trials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // pin all usage errors to exit 1
  }

  if (gen->parsed()) return ilmar::cmd_gen_data(o);
  if (tr->parsed()) return ilmar::cmd_train(o);
  if (sw->parsed()) return ilmar::cmd_sweep(o);
  if (ev->parsed()) return ilmar::cmd_evaluate(run_dir, eval_data, episodes);
  if (an->parsed()) return ilmar::cmd_analyze(runs_root, an_data);
  if (gc->parsed()) return ilmar::cmd_gradcheck(trials, gc_seed);
  return 1;
}
