#pragma once

// Demonstration datasets: collection from policies, expert/supplementary
// mixtures with per-tier counts, JSON-lines persistence with bit-exact
// round-trips, and summary statistics.  Rewards are carried for evaluation
// and analysis only; the training-facing view strips them.

#include "ilmar/envs.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ilmar {

struct Transition {
  Eigen::VectorXd state;
  Eigen::VectorXd action;  // discrete: 1-vector holding the action index
  double reward = 0.0;     // evaluation-only; never read by training
  bool done = false;
  std::int64_t episode_id = 0;
  std::string source_id;  // "expert", "tier-1".., or a named policy
};

using Trajectory = std::vector<Transition>;

// Expert split plus supplementary split; their union is the full dataset.
struct DemoDataset {
  EnvSpec env;
  std::vector<Trajectory> expert;         // small, trusted
  std::vector<Trajectory> supplementary;  // unconstrained quality
  std::map<std::string, int> provenance;  // "DE:expert", "DS:tier-2", ... -> n_traj
};

struct MixtureSpec {
  int n_expert_in_DE = 1;
  int n_expert_in_DS = 40;
  double suboptimal_ratio = 1.0;  // suboptimal count = ratio * n_expert_in_DS
  std::vector<double> tier_fractions{0.8, 0.6, 0.4, 0.2};
  unsigned seed = 0;
};

// Rolls out complete episodes; actions are recorded exactly as executed.
// Episode e uses its own RNG stream derived from (seed, e), so collections
// are reproducible and order-independent.
std::vector<Trajectory> collect(const EnvSpec& env, const PolicyFn& policy,
                                int n_episodes, std::uint64_t seed,
                                const std::string& source_id,
                                std::int64_t first_episode_id = 0);

// Expert split of n_expert_in_DE expert episodes; supplementary split of
// n_expert_in_DS expert episodes plus ratio * n_expert_in_DS suboptimal
// episodes split equally across calibrated tiers (remainder round-robin
// from the best tier down).  Episode ids are unique within each split.
DemoDataset build_mixture(const MixtureSpec& spec, const EnvSpec& env);

// JSON lines: a header {"schema":1,"env":...,"provenance":...} then one
// transition object per line.  Doubles survive bit-exactly.  Load errors
// (parse failure, schema mismatch, torn episodes) cite the 1-based line.
void save_dataset(const DemoDataset& d, const std::string& path);
DemoDataset load_dataset(const std::string& path);

// Bitwise equality, including NaN payloads, negative zero and subnormals.
bool dataset_bit_equal(const DemoDataset& a, const DemoDataset& b);

struct SourceStats {
  int n_traj = 0;
  int n_transitions = 0;
  double mean_return = 0.0;  // undiscounted, averaged over trajectories
};

struct DatasetStats {
  std::map<std::string, SourceStats> per_source;  // same keys as provenance
  Eigen::VectorXd state_mean, state_std;          // over the full dataset
  Eigen::VectorXd action_mean, action_std;
  int n_transitions = 0;
};

DatasetStats dataset_stats(const DemoDataset& d);

// Optional input standardization fitted once on the full dataset.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // floored away from zero
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    return (x - mean).cwiseQuotient(std);
  }
};

Standardizer make_standardizer(const Eigen::VectorXd& mean,
                               const Eigen::VectorXd& std_raw);

// Flat, reward-free view the trainer samples from.  Holding pointers into
// the dataset is safe: datasets are immutable after construction.
struct TrainItem {
  const Eigen::VectorXd* state = nullptr;
  const Eigen::VectorXd* action = nullptr;
  bool from_expert_source = false;  // source_id == "expert", either split
  int supplementary_index = -1;     // index into view.sup_* when from D^S
};

struct TrainView {
  std::vector<TrainItem> expert;  // the expert split only
  std::vector<TrainItem> all;     // both splits
  // Per-supplementary-transition bookkeeping for analysis joins.
  std::vector<int> sup_traj;        // trajectory index within the split
  std::vector<int> sup_step;        // step index within its trajectory
  std::vector<std::string> sup_source;
};

TrainView make_train_view(const DemoDataset& d);

// Overwrites every reward with NaN; training outputs must not change.
void poison_rewards(DemoDataset& d);

// Environment (de)serialization shared by datasets and run configs.
std::string env_to_json(const EnvSpec& e);
EnvSpec env_from_json(const std::string& text);

}  // namespace ilmar
