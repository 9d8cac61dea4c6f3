#pragma once

// The two parametric pieces: a stochastic policy (categorical or Gaussian
// head) and an action ranker that scores ordered action pairs for a state.
// Forward passes are built on the tape so every training quantity —
// including gradient penalties, which need gradients of gradients — stays
// differentiable.  Value-only wrappers run a scratch tape.

#include "ilmar/param.hpp"
#include "ilmar/tape.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ilmar {

// ---- plain MLP building block -------------------------------------------------

struct MLPSpec {
  int in = 0;
  std::vector<int> hidden;
  int out = 0;
  std::string activation = "tanh";  // "tanh" | "relu"
  bool activate_last = false;       // encoders activate their output layer
};

// Glorot-uniform weights, zero biases; segment names "<prefix>.w<i>" /
// "<prefix>.b<i>" per layer.
ParamVector mlp_params(const MLPSpec& spec, const std::string& prefix,
                       std::mt19937_64& rng);

// Batch forward, rows are samples.
ad::NodeRef mlp_forward(ad::Tape& tape, const MLPSpec& spec,
                        const ParamNodes& pn, const std::string& prefix,
                        ad::NodeRef x);

// ---- policy ---------------------------------------------------------------------

struct PolicyModelSpec {
  int obs_dim = 0;
  int action_dim = 0;  // number of discrete actions, or action vector size
  bool discrete = true;
  std::vector<int> hidden{64, 64};
  std::string activation = "tanh";
  double logstd_min = -5.0;  // Gaussian head log-std clamp
  double logstd_max = 2.0;
};

struct PolicyModel {
  PolicyModelSpec spec;
  ParamVector params;  // "pi.w*/b*" plus "pi.logstd" when continuous

  static PolicyModel init(const PolicyModelSpec& spec, std::uint64_t seed);
};

// Network output for a batch of states: logits (discrete) or means.
ad::NodeRef policy_net_forward(ad::Tape& tape, const PolicyModel& m,
                               const ParamNodes& pn, ad::NodeRef states);

// Column of log-probabilities of the given actions (constants).  Discrete
// actions arrive one-hot (N x A); continuous as raw values (N x m).
ad::NodeRef policy_log_prob_node(ad::Tape& tape, const PolicyModel& m,
                                 const ParamNodes& pn, ad::NodeRef states,
                                 const Eigen::MatrixXd& actions);

// The policy's action encoding fed to the ranker, differentiably: the
// softmax probability vector (discrete) or the Gaussian mean (continuous).
// This is the deterministic "expectation" mode of the training loop.
ad::NodeRef policy_ranker_action_node(ad::Tape& tape, const PolicyModel& m,
                                      const ParamNodes& pn, ad::NodeRef states);

// Value-only log-prob; discrete actions may be an index 1-vector or one-hot.
double policy_log_prob(const PolicyModel& m, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& a);

enum class RankerInputMode { expectation, sample };

// Action encoding handed to the ranker: probability vector or one-hot
// sample (discrete); mean or a Gaussian draw (continuous).  Expectation
// mode ignores the seed.
Eigen::VectorXd policy_action_for_ranker(const PolicyModel& m,
                                         const Eigen::VectorXd& s,
                                         RankerInputMode mode,
                                         std::uint64_t seed);

// Greedy evaluation action: argmax probability (discrete, returned as an
// index 1-vector) or the mean (continuous).
Eigen::VectorXd policy_eval_action(const PolicyModel& m,
                                   const Eigen::VectorXd& s);

// One-hot helper for discrete dataset actions (index 1-vector or one-hot in).
Eigen::VectorXd to_onehot(const Eigen::VectorXd& a, int n_actions);

// ---- action ranker -----------------------------------------------------------------

struct RankerModelSpec {
  int obs_dim = 0;
  int action_dim = 0;  // encoding size: A (probability vectors) or m
  std::vector<int> state_hidden{64, 64};
  std::vector<int> action_hidden{32, 32};
  std::vector<int> head_hidden{64};
  std::string activation = "tanh";
  double clip_eps = 1e-3;
  bool zero_init_head = false;  // exact 0.5 output at initialization
};

struct RankerModel {
  RankerModelSpec spec;
  ParamVector params;  // "senc.*", "aenc.*", "head.*"

  static RankerModel init(const RankerModelSpec& spec, std::uint64_t seed);
};

// C(s, a1, a2) for a batch: both actions pass through the same encoder, the
// head sees [state-code, code(a1), code(a2)], and the output is squashed to
// [eps, 1-eps] via eps + (1-2eps)*sigmoid (so a zero head gives exactly 0.5).
ad::NodeRef ranker_forward_node(ad::Tape& tape, const RankerModel& m,
                                const ParamNodes& pn, ad::NodeRef states,
                                ad::NodeRef a1, ad::NodeRef a2);

double ranker_forward(const RankerModel& m, const Eigen::VectorXd& s,
                      const Eigen::VectorXd& a1, const Eigen::VectorXd& a2);

struct WeightValue {
  double c = 0.0;  // ranker output in [eps, 1-eps]
  double w = 0.0;  // c when c > 1/2, else exactly 0
};

// w(s, a, pi) = 1(C(s, a, pi(s)) > 1/2) * C(s, a, pi(s)); the boundary
// resolves to 0 and the indicator never carries gradient.
WeightValue weight(const RankerModel& ranker, const PolicyModel& policy,
                   const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                   RankerInputMode mode = RankerInputMode::expectation,
                   std::uint64_t seed = 0);

// Mean of (||grad_input C|| - 1)^2 over interpolated action pairs
// (a1_hat = t a1 + (1-t) a2 and vice versa, t ~ U(0,1) per row, state
// fixed; the norm runs jointly over both action slots).  Differentiable
// with respect to psi.
ad::NodeRef gradient_penalty_node(ad::Tape& tape, const RankerModel& m,
                                  const ParamNodes& pn,
                                  const Eigen::MatrixXd& states,
                                  const Eigen::MatrixXd& a1,
                                  const Eigen::MatrixXd& a2,
                                  std::uint64_t interp_seed);

double gradient_penalty(const RankerModel& m, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& a1, const Eigen::MatrixXd& a2,
                        std::uint64_t interp_seed);

// ---- checkpoints ----------------------------------------------------------------------

// JSON-lines dump of parameter segments with shapes; loading into an
// existing layout verifies names and shapes.
void save_params(const ParamVector& p, const std::string& path);
ParamVector load_params(const std::string& path);
void load_params_into(ParamVector& dst, const std::string& path);

}  // namespace ilmar
