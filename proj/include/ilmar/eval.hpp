#pragma once

// Policy evaluation by greedy rollouts, rank statistics, weight-quality
// joins against the exact advantage oracle, and learning-curve aggregation
// across seeds.

#include "ilmar/dataset.hpp"
#include "ilmar/models.hpp"
#include "ilmar/train.hpp"

#include <string>
#include <vector>

namespace ilmar {

struct EvalResult {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over episodes
  int episodes = 0;
};

// Greedy rollouts (argmax action, or the Gaussian mean); episode e draws
// from its own stream (seed, e).  An optional standardizer transforms
// observations before the policy sees them.
EvalResult evaluate_policy(const PolicyModel& policy, const EnvSpec& env,
                           int episodes, std::uint64_t seed,
                           const Standardizer* stdzr = nullptr);

// Spearman rank correlation with average ranks on ties.  Throws on fewer
// than two points, mismatched lengths, or a constant input (undefined).
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

// Ranker weights on every supplementary transition joined against the exact
// optimal-policy advantage at the recorded decision point (gridworld only:
// the oracle is tabular), plus the per-trajectory mean-weight-vs-return
// join.  Throws when every weight is zero (the rank statistic is undefined).
struct WeightQualityResult {
  std::vector<double> weights;  // supplementary transitions, dataset order
  std::vector<double> advantages;
  double rho_transition = 0.0;
  std::vector<double> traj_mean_weight;  // per supplementary trajectory
  std::vector<double> traj_return;       // recorded undiscounted return
  double rho_trajectory = 0.0;
};

WeightQualityResult weight_quality(const RankerModel& ranker,
                                   const PolicyModel& policy,
                                   const DemoDataset& data);

// ---- learning curves ------------------------------------------------------------

struct CurvePoint {
  int iter = 0;
  double mean_score = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;  // mean -+ 1.96 * (sample std / sqrt n)
  int n_seeds = 0;
};

// Collects eval_score entries across runs, keyed by iteration; each point
// averages the runs that evaluated there.
std::vector<CurvePoint> aggregate_eval_curves(
    const std::vector<std::vector<ReportRow>>& runs);

// "iter,mean_score,ci_lo,ci_hi,n_seeds" rows.
void write_curve_csv(const std::vector<CurvePoint>& pts,
                     const std::string& path);

// Round-trips report.csv files written by the trainer; validates the header
// and cites the offending line on parse errors.
std::vector<ReportRow> read_report_csv(const std::string& path);

void write_correlation_json(const std::string& path, double rho, int n,
                            const std::string& variant);

}  // namespace ilmar
