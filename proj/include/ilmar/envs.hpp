#pragma once

// Two small episodic tasks with exact machinery around them:
//   - a deterministic-by-default gridworld, compiled to a tabular MDP so
//     policy evaluation, value iteration and advantages are exact;
//   - a linear point-mass with quadratic costs, solved by a finite-horizon
//     discounted Riccati recursion.
//
// Returns use the gamma^(t-1) convention (first reward undiscounted);
// evaluation scores are undiscounted episode returns.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <variant>
#include <vector>

namespace ilmar {

// ---- tabular MDP -----------------------------------------------------------

struct TabularMDP {
  int n_states = 0;
  int n_actions = 0;
  Eigen::VectorXd p0;               // initial state distribution
  std::vector<Eigen::MatrixXd> P;   // per action, S x S row-stochastic
  Eigen::MatrixXd R;                // S x A expected immediate reward
  std::vector<char> terminal;      // absorbing; no reward once reached
  int horizon = 0;
  double gamma = 1.0;
};

struct PolicyEvalResult {
  // Indexed by steps remaining h = 0..H; Q[0] and V row 0 are zero.
  std::vector<Eigen::MatrixXd> Q;   // each S x A
  Eigen::MatrixXd V;                // (H+1) x S
  double bellman_residual = 0.0;
};

// Exact finite-horizon evaluation of a stochastic policy (S x A row
// distributions) by backward induction, then an independent Bellman residual
// sweep.  Throws if rows of pi are not distributions or if the residual ends
// up above 1e-10 (which only ill-formed inputs can cause).
PolicyEvalResult policy_evaluation_tabular(const TabularMDP& mdp,
                                           const Eigen::MatrixXd& pi,
                                           double gamma_override = -1.0);

Eigen::MatrixXd uniform_policy(const TabularMDP& mdp);

// Deterministic greedy policy from full-horizon optimal Q values
// (ties broken toward the lowest action index).
Eigen::MatrixXd value_iteration_greedy(const TabularMDP& mdp);

// p0-weighted full-horizon value of pi under the given discount.
double exact_return(const TabularMDP& mdp, const Eigen::MatrixXd& pi,
                    double gamma);

// ---- gridworld --------------------------------------------------------------

// Actions: 0 east (+x), 1 west (-x), 2 north (+y), 3 south (-y).
// Moving off-grid stays in place.  With slip_prob > 0 the executed move is
// redrawn uniformly over all four directions with that probability.
struct GridWorldSpec {
  int width = 7;
  int height = 7;
  int start_x = 0;
  int start_y = 0;
  int goal_x = 6;
  int goal_y = 6;
  int horizon = 60;
  double gamma = 0.99;
  double step_reward = -1.0;
  double goal_reward = 0.0;
  double slip_prob = 0.0;

  int n_cells() const { return width * height; }
  int cell(int x, int y) const { return y * width + x; }
  int goal_cell() const { return cell(goal_x, goal_y); }
  int start_cell() const { return cell(start_x, start_y); }
};

TabularMDP to_tabular(const GridWorldSpec& g);

// One-hot observation over cells.
Eigen::VectorXd grid_obs(const GridWorldSpec& g, int cell);

// ---- linear point-mass ------------------------------------------------------

// s' = A s + B a, reward -(s'Qc s + a'Rc a), actions clipped to the box
// [-action_bound, action_bound]^m, start drawn from N(0, start_std^2 I).
struct LinPointMassSpec {
  int n = 2;
  int m = 2;
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::MatrixXd Qc;
  Eigen::MatrixXd Rc;
  int horizon = 40;
  double gamma = 0.99;
  double action_bound = 2.0;
  double start_std = 1.0;

  static LinPointMassSpec make_default();
};

// Time-varying optimal gains for the unclipped problem: with h steps
// remaining the optimal action is -K[h] s.  K[0] is unused (all zeros).
std::vector<Eigen::MatrixXd> lqr_gains(const LinPointMassSpec& s);

// ---- runtime episodes --------------------------------------------------------

struct EnvState {
  Eigen::VectorXd obs;  // model-facing observation
  Eigen::VectorXd x;    // native state (grid: single cell index; pm: position)
  int t = 0;
  bool done = false;
};

using EnvSpec = std::variant<GridWorldSpec, LinPointMassSpec>;

int obs_dim(const EnvSpec& e);
int action_dim(const EnvSpec& e);  // grid: number of discrete actions
bool is_discrete(const EnvSpec& e);
int env_horizon(const EnvSpec& e);

EnvState env_reset(const EnvSpec& e, std::mt19937_64& rng);

// Advances the state in place and returns the immediate reward.  Discrete
// actions are a 1-vector holding the action index.  Stepping a finished
// episode throws.
double env_step(const EnvSpec& e, EnvState& s, const Eigen::VectorXd& action,
                std::mt19937_64& rng);

using PolicyFn =
    std::function<Eigen::VectorXd(const EnvState&, std::mt19937_64&)>;

struct RolloutResult {
  double ret = 0.0;  // undiscounted
  int steps = 0;
};

RolloutResult rollout(const EnvSpec& e, const PolicyFn& pi,
                      std::mt19937_64& rng);

// Samples actions from a tabular policy's row for the current cell.
PolicyFn tabular_policy_fn(const GridWorldSpec& g, const Eigen::MatrixXd& pi);

// Time-varying LQR controller (clipped to the action box).
PolicyFn lqr_policy_fn(const LinPointMassSpec& s);

PolicyFn uniform_random_policy_fn(const EnvSpec& e);

// ---- advantages --------------------------------------------------------------

struct AdvantageEstimate {
  double value = 0.0;
  double stderr_ = 0.0;  // 0 for exact estimates
};

// Exact tabular advantage A^pi_h(s,a) = Q_h(s,a) - V_h(s); h defaults to the
// full horizon.
struct AdvantageOracle {
  TabularMDP mdp;
  Eigen::MatrixXd pi;
  PolicyEvalResult eval;

  static AdvantageOracle exact(const TabularMDP& mdp, const Eigen::MatrixXd& pi);
  AdvantageEstimate advantage(int s, int a, int steps_left = -1) const;
};

// Monte-Carlo advantage on the same tabular dynamics with common random
// numbers between the Q and V rollouts of each pair.
AdvantageEstimate advantage_mc(const TabularMDP& mdp, const Eigen::MatrixXd& pi,
                               int s, int a, int n_rollouts,
                               std::uint64_t seed, int steps_left = -1);

// ---- score references and tier policies --------------------------------------

struct ScoreRefs {
  double random_ref = 0.0;
  double expert_ref = 0.0;
};

// Mean undiscounted returns of the uniform-random and expert policies.
// Exact for the gridworld; fixed-seed Monte-Carlo for the point-mass.
ScoreRefs score_refs(const EnvSpec& e);

// 100 * (mean - random) / (expert - random); throws when the references
// coincide.
double normalized_score(double mean_return, double random_ref,
                        double expert_ref);

// Corrupted versions of the optimal gridworld policy: softmax over
// beta(t) * (Q* + t * scale * eta), where eta is a fixed seeded noise field
// shared across tiers (so mistakes are state-consistent and nest as the knob
// grows) and the inverse temperature beta anneals from sharp to soft.  Both
// ingredients are continuous in the knob t, so each tier can be calibrated
// by bisection on the exact evaluated return until its normalized score
// lands within +-10% (relative) of 100*fraction; failure to calibrate
// throws, reporting achieved scores.
struct TierPolicy {
  double target_fraction = 0.0;
  double knob = 0.0;
  double achieved_score = 0.0;
  Eigen::MatrixXd pi;
};

std::vector<TierPolicy> make_tier_policies(const GridWorldSpec& g,
                                           const std::vector<double>& fractions,
                                           unsigned seed);

// Point-mass analogue: gain-scaled LQR controller plus Gaussian action
// noise, calibrated the same way on fixed-seed Monte-Carlo returns.
struct PmTierPolicy {
  double target_fraction = 0.0;
  double knob = 0.0;
  double achieved_score = 0.0;
  double gain_scale = 1.0;
  double noise_std = 0.0;
};

std::vector<PmTierPolicy> make_tier_policies_pm(
    const LinPointMassSpec& s, const std::vector<double>& fractions,
    unsigned seed);

PolicyFn pm_tier_policy_fn(const LinPointMassSpec& s, const PmTierPolicy& t);

// Deterministic hash mixing for per-purpose RNG streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace ilmar
