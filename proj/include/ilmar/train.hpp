#pragma once

// The training loop: weighted behavior cloning driven by an action ranker,
// the ranker's pairwise objective, and the bi-level meta update where the
// ranker is judged by how much one traced policy step helps expert
// log-likelihood.  Baselines (plain BC, expert-distribution weighting) and
// the alignment diagnostics live here too.
//
// Per-iteration randomness is stateless: every stream is seeded by
// (run seed, iteration, stream id), so a resumed run replays bit-exactly
// without serializing generator state.

#include "ilmar/dataset.hpp"
#include "ilmar/grad.hpp"
#include "ilmar/models.hpp"
#include "ilmar/optim.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ilmar {

enum class TrainMode {
  bc,               // likelihood on all of D, no weights
  vanilla_only,     // ranker trained by the pairwise loss alone
  meta_only,        // ranker trained by the meta objective alone
  ilmar,            // composite
  expert_wbc,       // expert-vs-rest classifier as the weight
  expert_wbc_meta,  // same classifier, plus the meta objective
};

TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode m);

struct TrainConfig {
  double mu = 3e-4;   // policy learning rate
  double phi = 3e-4;  // discriminator learning rate
  double alpha = 1.0, beta = 1.0;
  int n1 = 64;  // batch from the expert split
  int n2 = 64;  // batch from the full dataset
  int iterations = 50000;
  int eval_interval = 10000;  // 0 disables periodic evaluation
  int eval_episodes = 10;
  int diag_interval = 0;        // alignment diagnostics cadence, 0 disables
  int checkpoint_interval = 0;  // 0 means final checkpoint only
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::ilmar;
  double gp_coef = 1.0;  // gradient-penalty coefficient on the pairwise loss
  RankerInputMode ranker_input = RankerInputMode::expectation;
  std::string optimizer = "sgd";  // "sgd" | "adam"; the traced lookahead
                                  // stays a plain gradient step either way
  bool standardize_inputs = false;
  std::vector<int> policy_hidden{64, 64};
  std::vector<int> ranker_state_hidden{64, 64};
  std::vector<int> ranker_action_hidden{32, 32};
  std::vector<int> ranker_head_hidden{64};
  std::string activation = "tanh";
  double clip_eps = 1e-3;
  bool resume = false;  // continue from the checkpoint in the output dir

  void validate() const;  // learning rates positive; alpha+beta > 0 off-bc
};

// One CSV row; empty optionals serialize as empty cells.
struct ReportRow {
  int iter = 0;
  std::optional<double> L_actor, L_vanilla, L_meta, L_C;
  std::optional<double> w_mean, w_zero_frac;
  std::optional<double> inner, g2sq, implied_K;
  std::optional<double> eval_score;
};

extern const char* const kReportCsvHeader;
std::string report_row_csv(const ReportRow& r);

// ---- pair sampling -----------------------------------------------------------

// Ordered pairs (a1 not inferior to a2), three kinds only; expert actions
// are never compared against suboptimal dataset actions directly.
struct PairBatch {
  Eigen::MatrixXd states;  // N x obs
  Eigen::MatrixXd a1, a2;  // N x action encoding
  std::vector<int> kind;   // 0 expert-vs-policy, 1 data-vs-random, 2 policy-vs-random
};

// Draws states/actions and random actions; policy slots (a2 of kind 0, a1 of
// kind 2) are left zero until fill_policy_actions resolves them.
PairBatch sample_pairs(const TrainView& view, const EnvSpec& env, int n2,
                       int action_enc_dim, std::mt19937_64& rng);

void fill_policy_actions(PairBatch& pb, const PolicyModel& policy,
                         RankerInputMode mode, std::uint64_t seed);

// ---- loss builders (exposed for tests and the gradient-check suite) -----------

// -(1/N) sum w_i * log pi(a_i | s_i) with externally supplied weights.
ad::NodeRef weighted_bc_loss_node(ad::Tape& t, const PolicyModel& policy,
                                  const ParamNodes& pn,
                                  const Eigen::MatrixXd& states,
                                  const Eigen::MatrixXd& actions,
                                  const Eigen::VectorXd& weights);

// The full actor loss at (theta, psi): w = 1(c > 1/2) * c with the mask and
// the policy's ranker-facing action held constant, so psi-dependence flows
// only through the c factor.
struct ActorLossBuild {
  ad::NodeRef loss;
  Eigen::VectorXd c;  // ranker outputs (values)
  Eigen::VectorXd w;  // masked weights (values)
};
ActorLossBuild build_actor_loss(ad::Tape& t, const PolicyModel& policy,
                                const ParamNodes& pn_theta,
                                const RankerModel& ranker,
                                const ParamNodes& pn_psi,
                                const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& actions,
                                const Eigen::MatrixXd& policy_actions);

// Pairwise ranking negative log-likelihood over a batch, one stacked
// forward for both orderings.  Gradient penalty is added by the caller.
ad::NodeRef build_vanilla_nll(ad::Tape& t, const RankerModel& ranker,
                              const ParamNodes& pn_psi, const PairBatch& pb);

// ---- expert-distribution classifier (the portability baseline) ----------------

struct ExpertClassifierSpec {
  int obs_dim = 0;
  int action_dim = 0;
  std::vector<int> hidden{64, 64};
  std::string activation = "tanh";
  double clip_eps = 1e-3;
};

struct ExpertClassifier {
  ExpertClassifierSpec spec;
  ParamVector params;
  static ExpertClassifier init(const ExpertClassifierSpec& spec,
                               std::uint64_t seed);
};

// P(expert | s, a) in [eps, 1-eps].
ad::NodeRef classifier_forward_node(ad::Tape& t, const ExpertClassifier& m,
                                    const ParamNodes& pn,
                                    const Eigen::MatrixXd& states,
                                    const Eigen::MatrixXd& actions);

// ---- the training loop ----------------------------------------------------------

using EvalFn = std::function<double(const PolicyModel&)>;  // normalized score

struct TrainResult {
  PolicyModel policy;
  std::optional<RankerModel> ranker;
  std::optional<ExpertClassifier> classifier;
  // Set when the run standardized inputs; evaluation must apply it to
  // observations before querying the policy.
  std::optional<Standardizer> input_standardizer;
  std::vector<ReportRow> rows;
  bool aborted = false;  // non-finite value; last-good checkpoint written
  std::string abort_reason;
};

// Runs the configured mode.  When out_dir is non-empty, streams report.csv
// and writes checkpoints there (resume picks up from the latest one).  A
// non-finite value anywhere aborts the run, preserves the last finished
// iteration's checkpoint, and marks the result.
TrainResult train(const TrainConfig& cfg, const DemoDataset& data,
                  const EnvSpec& env, const std::string& out_dir = "",
                  const EvalFn& eval_fn = nullptr);

// ---- meta-gradient agreement (gradient-check suite) -------------------------------

// grad_psi of L_meta(theta - mu * grad_theta L_actor(theta, psi)) computed
// three independent ways: (a) one backward pass through the traced update,
// (b) the chain-rule composition -mu * d/dpsi[v . grad_theta L_actor] with
// v = grad L_meta at the lookahead, (c) central finite differences of the
// re-executed pipeline.
struct MetaGradCheck {
  double err_ab = 0.0;   // relative error (a) vs (b)
  double err_afd = 0.0;  // relative error (a) vs (c)
  double err_bfd = 0.0;  // relative error (b) vs (c)
  double boundary_margin = 0.0;  // min |c - 1/2| over the batch
};

MetaGradCheck meta_gradient_threeway(const PolicyModel& policy,
                                     const RankerModel& ranker,
                                     const Eigen::MatrixXd& expert_states,
                                     const Eigen::MatrixXd& expert_actions,
                                     const Eigen::MatrixXd& data_states,
                                     const Eigen::MatrixXd& data_actions,
                                     double mu);

// ---- alignment testbed ---------------------------------------------------------------

// Gradient descent on L(theta) = 0.5 theta' A theta where the discriminator
// loss IS the actor loss; returns per-step loss changes.  With K = 1 and
// L = lambda_max(A), steps shrink the loss for mu <= 2/L and a violation
// appears by mu = 4/L.
std::vector<double> quadratic_loss_changes(const Eigen::MatrixXd& A,
                                           const Eigen::VectorXd& theta0,
                                           double mu, int steps);

}  // namespace ilmar
