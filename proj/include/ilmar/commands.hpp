#pragma once

// Command implementations behind the CLI verbs.  Each returns a process
// exit code: 0 success, 1 usage or configuration error (bad flags, missing
// files, malformed config), 2 numerical failure (non-finite values, aborted
// runs, failed gradient checks, unreachable calibration targets).

#include <cstdint>
#include <string>
#include <vector>

namespace ilmar {

struct CommonOpts {
  std::string config_path;            // empty: built-in defaults
  std::string out = "runs";           // output root
  std::vector<std::uint64_t> seeds;   // empty: the config's seed
  bool force = false;                 // replace existing outputs
  std::string data_path;              // dataset file (train/sweep/analyze)
};

// Builds the tiered demonstration mixture for the configured task and
// writes <out>/<task>/dataset.jsonl plus the resolved config echo.
int cmd_gen_data(const CommonOpts& o);

// Trains one run per seed into <out>/<mode>/<task>/<seed>/, echoing the
// fully resolved config (config.ini) so the run can be reproduced from the
// echo alone.
int cmd_train(const CommonOpts& o);

// Alpha/beta grid over the composite objective (the (0,0) cell is skipped);
// per-cell run dirs under <out>/sweep/<task>/ plus summary.csv.
int cmd_sweep(const CommonOpts& o);

// Evaluates the checkpoint in a finished run dir; prints and writes
// eval.json.  episodes <= 0 uses the run's configured count.
int cmd_evaluate(const std::string& run_dir, const std::string& data_path,
                 int episodes);

// Aggregates finished runs under a root: learning curves per mode/task,
// final-score summaries, alignment-diagnostic statistics, and (given the
// dataset) ranker-weight-vs-advantage correlations.
int cmd_analyze(const std::string& runs_root, const std::string& data_path);

// The meta-gradient agreement suite on small random networks, plus a
// sign-flip mutation check proving the comparison has teeth.
int cmd_gradcheck(int trials, std::uint64_t seed);

}  // namespace ilmar
