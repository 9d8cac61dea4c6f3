#include "ilmar/train.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace ilmar {

using ad::NodeRef;
using ad::Tape;

namespace {

// Stateless per-iteration RNG stream ids.
enum : std::uint64_t {
  kStreamExpertBatch = 1,
  kStreamDataBatch = 2,
  kStreamPairs = 3,
  kStreamGp = 4,
  kStreamPolicyActions = 5,
  kStreamEval = 6,
  kStreamPairPolicyActions = 7,
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string cell(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

struct Batch {
  Eigen::MatrixXd states;
  Eigen::MatrixXd actions;      // one-hot for discrete
  Eigen::VectorXd expert_label; // 1 when the item came from an expert source
};

Batch gather(const std::vector<TrainItem>& items, int n, int obs_d, int enc_d,
             bool discrete, std::mt19937_64& rng) {
  if (items.empty()) throw std::runtime_error("train: empty sampling pool");
  Batch b;
  b.states.resize(n, obs_d);
  b.actions.resize(n, enc_d);
  b.expert_label.resize(n);
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  for (int i = 0; i < n; ++i) {
    const TrainItem& it = items[pick(rng)];
    b.states.row(i) = it.state->transpose();
    b.actions.row(i) =
        (discrete ? to_onehot(*it.action, enc_d) : *it.action).transpose();
    b.expert_label(i) = it.from_expert_source ? 1.0 : 0.0;
  }
  return b;
}

Eigen::VectorXd random_action(const EnvSpec& env, std::mt19937_64& rng) {
  if (is_discrete(env)) {
    std::uniform_int_distribution<int> d(0, action_dim(env) - 1);
    Eigen::VectorXd oh = Eigen::VectorXd::Zero(action_dim(env));
    oh(d(rng)) = 1.0;
    return oh;
  }
  const auto& p = std::get<LinPointMassSpec>(env);
  std::uniform_real_distribution<double> u(-p.action_bound, p.action_bound);
  Eigen::VectorXd a(p.m);
  for (int i = 0; i < p.m; ++i) a(i) = u(rng);
  return a;
}

// Batched ranker-facing policy actions for a state matrix.
Eigen::MatrixXd policy_actions_for(const PolicyModel& policy,
                                   const Eigen::MatrixXd& states,
                                   RankerInputMode mode, std::uint64_t seed) {
  Tape t;
  ParamNodes pn = param_leaves(t, policy.params);
  Eigen::MatrixXd out =
      t.val(policy_ranker_action_node(t, policy, pn, t.leaf(states)));
  if (mode == RankerInputMode::expectation) return out;
  std::mt19937_64 rng(seed);
  if (policy.spec.discrete) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double r = u(rng);
      double acc = 0.0;
      int pickd = policy.spec.action_dim - 1;
      for (int a = 0; a < policy.spec.action_dim; ++a) {
        acc += out(i, a);
        if (r <= acc) {
          pickd = a;
          break;
        }
      }
      out.row(i).setZero();
      out(i, pickd) = 1.0;
    }
    return out;
  }
  const Eigen::VectorXd ls = policy.params.at("pi.logstd")
                                 .row(0)
                                 .transpose()
                                 .cwiseMax(policy.spec.logstd_min)
                                 .cwiseMin(policy.spec.logstd_max);
  std::normal_distribution<double> nrm(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      out(i, j) += std::exp(ls(j)) * nrm(rng);
  return out;
}

ParamNodes grads_as_nodes(const ParamNodes& like,
                          const std::vector<NodeRef>& grads) {
  ParamNodes g;
  for (std::size_t i = 0; i < like.segs.size(); ++i)
    g.segs.emplace_back(like.segs[i].first, grads[i]);
  return g;
}

struct AdamPair {
  AdamState policy;
  AdamState ranker;
  bool used = false;
};

}  // namespace

// ---- plumbing ------------------------------------------------------------------

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "bc") return TrainMode::bc;
  if (s == "vanilla-only") return TrainMode::vanilla_only;
  if (s == "meta-only") return TrainMode::meta_only;
  if (s == "ilmar") return TrainMode::ilmar;
  if (s == "expert-dist-wbc") return TrainMode::expert_wbc;
  if (s == "expert-dist-wbc+meta") return TrainMode::expert_wbc_meta;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::bc: return "bc";
    case TrainMode::vanilla_only: return "vanilla-only";
    case TrainMode::meta_only: return "meta-only";
    case TrainMode::ilmar: return "ilmar";
    case TrainMode::expert_wbc: return "expert-dist-wbc";
    case TrainMode::expert_wbc_meta: return "expert-dist-wbc+meta";
  }
  throw std::logic_error("unreachable");
}

void TrainConfig::validate() const {
  if (!(mu > 0.0) || !(phi > 0.0))
    throw std::invalid_argument("train config: learning rates must be positive");
  if (alpha < 0.0 || beta < 0.0)
    throw std::invalid_argument("train config: alpha and beta must be >= 0");
  if (mode != TrainMode::bc && alpha + beta <= 0.0)
    throw std::invalid_argument("train config: alpha + beta must be positive");
  if (n1 <= 0 || n2 <= 0 || iterations < 0)
    throw std::invalid_argument("train config: batch sizes and iterations");
  if (optimizer != "sgd" && optimizer != "adam")
    throw std::invalid_argument("train config: optimizer must be sgd or adam");
}

const char* const kReportCsvHeader =
    "iter,L_actor,L_vanilla,L_meta,L_C,w_mean,w_zero_frac,inner,g2sq,"
    "implied_K,eval_score";

std::string report_row_csv(const ReportRow& r) {
  std::string s = std::to_string(r.iter);
  for (const auto* v : {&r.L_actor, &r.L_vanilla, &r.L_meta, &r.L_C, &r.w_mean,
                        &r.w_zero_frac, &r.inner, &r.g2sq, &r.implied_K,
                        &r.eval_score})
    s += "," + cell(*v);
  return s;
}

// ---- pair sampling ----------------------------------------------------------------

PairBatch sample_pairs(const TrainView& view, const EnvSpec& env, int n2,
                       int action_enc_dim, std::mt19937_64& rng) {
  if (view.expert.empty() || view.all.empty())
    throw std::runtime_error("sample_pairs: empty dataset");
  const int base = n2 / 3, rem = n2 % 3;
  const int counts[3] = {base + (rem > 0 ? 1 : 0), base + (rem > 1 ? 1 : 0), base};

  PairBatch pb;
  pb.states.resize(n2, view.expert[0].state->size());
  pb.a1 = Eigen::MatrixXd::Zero(n2, action_enc_dim);
  pb.a2 = Eigen::MatrixXd::Zero(n2, action_enc_dim);
  pb.kind.reserve(n2);

  const bool discrete = is_discrete(env);
  std::uniform_int_distribution<std::size_t> pick_e(0, view.expert.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_d(0, view.all.size() - 1);
  int row = 0;
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < counts[k]; ++i, ++row) {
      pb.kind.push_back(k);
      if (k == 0) {  // expert action vs policy action at an expert state
        const TrainItem& it = view.expert[pick_e(rng)];
        pb.states.row(row) = it.state->transpose();
        pb.a1.row(row) =
            (discrete ? to_onehot(*it.action, action_enc_dim) : *it.action)
                .transpose();
      } else if (k == 1) {  // dataset action vs random action
        const TrainItem& it = view.all[pick_d(rng)];
        pb.states.row(row) = it.state->transpose();
        pb.a1.row(row) =
            (discrete ? to_onehot(*it.action, action_enc_dim) : *it.action)
                .transpose();
        pb.a2.row(row) = random_action(env, rng).transpose();
      } else {  // policy action vs random action at a dataset state
        const TrainItem& it = view.all[pick_d(rng)];
        pb.states.row(row) = it.state->transpose();
        pb.a2.row(row) = random_action(env, rng).transpose();
      }
    }
  }
  return pb;
}

void fill_policy_actions(PairBatch& pb, const PolicyModel& policy,
                         RankerInputMode mode, std::uint64_t seed) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < pb.kind.size(); ++i)
    if (pb.kind[i] == 0 || pb.kind[i] == 2) rows.push_back(static_cast<int>(i));
  if (rows.empty()) return;
  Eigen::MatrixXd st(rows.size(), pb.states.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) st.row(i) = pb.states.row(rows[i]);
  const Eigen::MatrixXd acts = policy_actions_for(policy, st, mode, seed);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (pb.kind[static_cast<std::size_t>(rows[i])] == 0)
      pb.a2.row(rows[i]) = acts.row(i);
    else
      pb.a1.row(rows[i]) = acts.row(i);
  }
}

// ---- loss builders ------------------------------------------------------------------

NodeRef weighted_bc_loss_node(Tape& t, const PolicyModel& policy,
                              const ParamNodes& pn,
                              const Eigen::MatrixXd& states,
                              const Eigen::MatrixXd& actions,
                              const Eigen::VectorXd& weights) {
  const NodeRef lp = policy_log_prob_node(t, policy, pn, t.leaf(states), actions);
  const NodeRef w = t.leaf(weights);
  return ad::neg(t, ad::mean_all(t, ad::mul(t, w, lp)));
}

ActorLossBuild build_actor_loss(Tape& t, const PolicyModel& policy,
                                const ParamNodes& pn_theta,
                                const RankerModel& ranker,
                                const ParamNodes& pn_psi,
                                const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& actions,
                                const Eigen::MatrixXd& policy_actions) {
  const NodeRef lp =
      policy_log_prob_node(t, policy, pn_theta, t.leaf(states), actions);
  const NodeRef c = ranker_forward_node(t, ranker, pn_psi, t.leaf(states),
                                        t.leaf(actions), t.leaf(policy_actions));
  ActorLossBuild out;
  out.c = t.val(c).col(0);
  Eigen::VectorXd mask(out.c.size());
  for (Eigen::Index i = 0; i < out.c.size(); ++i)
    mask(i) = out.c(i) > 0.5 ? 1.0 : 0.0;  // strict: exactly 1/2 drops out
  out.w = out.c.cwiseProduct(mask);
  const NodeRef wn = ad::mul(t, c, t.leaf(mask));
  out.loss = ad::neg(t, ad::mean_all(t, ad::mul(t, wn, lp)));
  return out;
}

NodeRef build_vanilla_nll(Tape& t, const RankerModel& ranker,
                          const ParamNodes& pn_psi, const PairBatch& pb) {
  const Eigen::Index n = pb.states.rows();
  if (n == 0) throw std::invalid_argument("build_vanilla_nll: empty batch");
  Eigen::MatrixXd s2(2 * n, pb.states.cols());
  s2 << pb.states, pb.states;
  Eigen::MatrixXd x1(2 * n, pb.a1.cols()), x2(2 * n, pb.a2.cols());
  x1 << pb.a1, pb.a2;
  x2 << pb.a2, pb.a1;
  const NodeRef c = ranker_forward_node(t, ranker, pn_psi, t.leaf(s2),
                                        t.leaf(x1), t.leaf(x2));
  Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(2 * n, 1);
  m1.topRows(n).setOnes();
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Ones(2 * n, 1) - m1;
  const NodeRef lc = ad::vlog(t, c);
  const NodeRef l1c = ad::vlog(t, ad::add_const(t, ad::neg(t, c), 1.0));
  const NodeRef sum = ad::sum_all(
      t, ad::add(t, ad::mul(t, t.leaf(m1), lc), ad::mul(t, t.leaf(m2), l1c)));
  return ad::scale(t, sum, -1.0 / static_cast<double>(n));
}

// ---- expert classifier -----------------------------------------------------------

ExpertClassifier ExpertClassifier::init(const ExpertClassifierSpec& spec,
                                        std::uint64_t seed) {
  ExpertClassifier m;
  m.spec = spec;
  MLPSpec net;
  net.in = spec.obs_dim + spec.action_dim;
  net.hidden = spec.hidden;
  net.out = 1;
  net.activation = spec.activation;
  std::mt19937_64 rng(seed);
  m.params = mlp_params(net, "cls", rng);
  return m;
}

NodeRef classifier_forward_node(Tape& t, const ExpertClassifier& m,
                                const ParamNodes& pn,
                                const Eigen::MatrixXd& states,
                                const Eigen::MatrixXd& actions) {
  Eigen::MatrixXd x(states.rows(), states.cols() + actions.cols());
  x << states, actions;
  MLPSpec net;
  net.in = m.spec.obs_dim + m.spec.action_dim;
  net.hidden = m.spec.hidden;
  net.out = 1;
  net.activation = m.spec.activation;
  const NodeRef z = mlp_forward(t, net, pn, "cls", t.leaf(x));
  const double eps = m.spec.clip_eps;
  const NodeRef centered = ad::add_const(t, ad::vsigmoid(t, z), -0.5);
  return ad::add_const(t, ad::scale(t, centered, 1.0 - 2.0 * eps), 0.5);
}

// ---- checkpoints -----------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

struct Checkpoint {
  int iter = 0;
  std::int64_t adam_t_policy = 0;
  std::int64_t adam_t_psi = 0;
};

void save_checkpoint(const std::string& dir, int iter,
                     const PolicyModel& policy,
                     const std::optional<RankerModel>& ranker,
                     const std::optional<ExpertClassifier>& cls,
                     const AdamPair& adam) {
  save_params(policy.params, dir + "/ckpt_policy.jsonl");
  if (ranker) save_params(ranker->params, dir + "/ckpt_ranker.jsonl");
  if (cls) save_params(cls->params, dir + "/ckpt_classifier.jsonl");
  nlohmann::json meta;
  meta["iter"] = iter;
  if (adam.used) {
    save_params(adam.policy.m, dir + "/ckpt_adam_policy_m.jsonl");
    save_params(adam.policy.v, dir + "/ckpt_adam_policy_v.jsonl");
    save_params(adam.ranker.m, dir + "/ckpt_adam_psi_m.jsonl");
    save_params(adam.ranker.v, dir + "/ckpt_adam_psi_v.jsonl");
    meta["adam_t_policy"] = adam.policy.t;
    meta["adam_t_psi"] = adam.ranker.t;
  }
  std::ofstream f(dir + "/ckpt_meta.json", std::ios::trunc);
  f << meta.dump() << '\n';
  if (!f) throw std::runtime_error("save_checkpoint: write failed in " + dir);
}

std::optional<Checkpoint> load_checkpoint(const std::string& dir,
                                          PolicyModel& policy,
                                          std::optional<RankerModel>& ranker,
                                          std::optional<ExpertClassifier>& cls,
                                          AdamPair& adam) {
  const std::string meta_path = dir + "/ckpt_meta.json";
  if (!fs::exists(meta_path)) return std::nullopt;
  std::ifstream f(meta_path);
  nlohmann::json meta = nlohmann::json::parse(f);
  Checkpoint ck;
  ck.iter = meta.at("iter").get<int>();
  load_params_into(policy.params, dir + "/ckpt_policy.jsonl");
  if (ranker) load_params_into(ranker->params, dir + "/ckpt_ranker.jsonl");
  if (cls) load_params_into(cls->params, dir + "/ckpt_classifier.jsonl");
  if (adam.used && meta.contains("adam_t_policy")) {
    load_params_into(adam.policy.m, dir + "/ckpt_adam_policy_m.jsonl");
    load_params_into(adam.policy.v, dir + "/ckpt_adam_policy_v.jsonl");
    load_params_into(adam.ranker.m, dir + "/ckpt_adam_psi_m.jsonl");
    load_params_into(adam.ranker.v, dir + "/ckpt_adam_psi_v.jsonl");
    adam.policy.t = meta.at("adam_t_policy").get<std::int64_t>();
    adam.ranker.t = meta.at("adam_t_psi").get<std::int64_t>();
    ck.adam_t_policy = adam.policy.t;
    ck.adam_t_psi = adam.ranker.t;
  }
  return ck;
}

}  // namespace

// ---- the loop ------------------------------------------------------------------------

TrainResult train(const TrainConfig& cfg, const DemoDataset& data,
                  const EnvSpec& env, const std::string& out_dir,
                  const EvalFn& eval_fn) {
  cfg.validate();
  const TrainView view = make_train_view(data);
  if (view.all.empty()) throw std::invalid_argument("train: dataset is empty");
  if (view.expert.empty() && cfg.mode != TrainMode::bc)
    throw std::invalid_argument("train: expert split is empty");

  const bool discrete = is_discrete(env);
  const int obs_d = obs_dim(env);
  const int enc_d = action_dim(env);  // one-hot width or action size

  PolicyModelSpec pspec;
  pspec.obs_dim = obs_d;
  pspec.action_dim = enc_d;
  pspec.discrete = discrete;
  pspec.hidden = cfg.policy_hidden;
  pspec.activation = cfg.activation;
  PolicyModel policy = PolicyModel::init(pspec, mix_seed(cfg.seed, 0xA0));

  const bool ranker_mode = cfg.mode == TrainMode::ilmar ||
                           cfg.mode == TrainMode::vanilla_only ||
                           cfg.mode == TrainMode::meta_only;
  const bool cls_mode = cfg.mode == TrainMode::expert_wbc ||
                        cfg.mode == TrainMode::expert_wbc_meta;

  std::optional<RankerModel> ranker;
  if (ranker_mode) {
    RankerModelSpec rspec;
    rspec.obs_dim = obs_d;
    rspec.action_dim = enc_d;
    rspec.state_hidden = cfg.ranker_state_hidden;
    rspec.action_hidden = cfg.ranker_action_hidden;
    rspec.head_hidden = cfg.ranker_head_hidden;
    rspec.activation = cfg.activation;
    rspec.clip_eps = cfg.clip_eps;
    ranker = RankerModel::init(rspec, mix_seed(cfg.seed, 0xB0));
  }
  std::optional<ExpertClassifier> classifier;
  if (cls_mode) {
    ExpertClassifierSpec cspec;
    cspec.obs_dim = obs_d;
    cspec.action_dim = enc_d;
    cspec.activation = cfg.activation;
    cspec.clip_eps = cfg.clip_eps;
    classifier = ExpertClassifier::init(cspec, mix_seed(cfg.seed, 0xC0));
  }

  AdamPair adam;
  adam.used = cfg.optimizer == "adam";
  if (adam.used) {
    adam.policy = AdamState::init(policy.params);
    if (ranker) adam.ranker = AdamState::init(ranker->params);
    if (classifier) adam.ranker = AdamState::init(classifier->params);
  }
  const AdamConfig adam_pi{cfg.mu, 0.9, 0.999, 1e-8};
  const AdamConfig adam_psi{cfg.phi, 0.9, 0.999, 1e-8};

  std::optional<Standardizer> stdzr;
  if (cfg.standardize_inputs) {
    const DatasetStats st = dataset_stats(data);
    stdzr = make_standardizer(st.state_mean, st.state_std);
  }
  auto xs = [&](Eigen::MatrixXd& m) {
    if (!stdzr) return;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      m.row(i) = stdzr->apply(m.row(i).transpose()).transpose();
  };

  // The effective composite coefficients per mode.
  const double eff_alpha =
      (cfg.mode == TrainMode::vanilla_only || cfg.mode == TrainMode::expert_wbc)
          ? 0.0
          : cfg.alpha;
  const double eff_beta = cfg.mode == TrainMode::meta_only ? 0.0 : cfg.beta;

  TrainResult result;
  int iter0 = 0;
  std::ofstream csv;
  std::ofstream diag_csv;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    bool resumed = false;
    if (cfg.resume) {
      auto ck = load_checkpoint(out_dir, policy, ranker, classifier, adam);
      if (ck) {
        iter0 = ck->iter;
        resumed = true;
      }
    }
    csv.open(out_dir + "/report.csv",
             resumed ? std::ios::app : std::ios::trunc);
    if (!resumed) csv << kReportCsvHeader << '\n';
    if (cfg.diag_interval > 0) {
      diag_csv.open(out_dir + "/diag.csv",
                    resumed ? std::ios::app : std::ios::trunc);
      if (!resumed)
        diag_csv << "iter,inner,g2sq,implied_K,loss_before,loss_after\n";
    }
  }

  // Last-good copies for the abort path.
  ParamVector good_policy = policy.params;
  ParamVector good_psi;
  if (ranker) good_psi = ranker->params;
  if (classifier) good_psi = classifier->params;
  int good_iter = iter0;

  auto write_ckpt = [&](int iter) {
    if (out_dir.empty()) return;
    save_checkpoint(out_dir, iter, policy, ranker, classifier, adam);
  };

  for (int iter = iter0 + 1; iter <= cfg.iterations; ++iter) {
    try {
      ReportRow row;
      row.iter = iter;

      std::mt19937_64 rngE(mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamExpertBatch));
      std::mt19937_64 rngD(mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamDataBatch));
      Batch bD = gather(view.all, cfg.n2, obs_d, enc_d, discrete, rngD);
      xs(bD.states);

      if (cfg.mode == TrainMode::bc) {
        Tape t;
        ParamNodes pn = param_leaves(t, policy.params);
        const NodeRef loss = weighted_bc_loss_node(
            t, policy, pn, bD.states, bD.actions,
            Eigen::VectorXd::Ones(cfg.n2));
        row.L_actor = t.val(loss)(0, 0);
        const auto g = t.backward(loss, pn.refs());
        const ParamVector gtheta = read_values(t, grads_as_nodes(pn, g));
        policy.params = adam.used
                            ? adam_step(adam.policy, policy.params, gtheta, adam_pi)
                            : sgd_step(policy.params, gtheta, cfg.mu);
      } else if (ranker_mode) {
        Batch bE = gather(view.expert, cfg.n1, obs_d, enc_d, discrete, rngE);
        xs(bE.states);
        const Eigen::MatrixXd p_vals = policy_actions_for(
            policy, bD.states, cfg.ranker_input,
            mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamPolicyActions));

        // One graph: actor loss -> traced lookahead -> meta loss.
        Tape t1;
        ParamNodes th = param_leaves(t1, policy.params);
        ParamNodes ps = param_leaves(t1, ranker->params);
        ActorLossBuild ab = build_actor_loss(t1, policy, th, *ranker, ps,
                                             bD.states, bD.actions, p_vals);
        row.L_actor = t1.val(ab.loss)(0, 0);
        row.w_mean = ab.w.mean();
        row.w_zero_frac =
            static_cast<double>((ab.w.array() == 0.0).count()) / ab.w.size();

        const auto g_nodes = t1.backward(ab.loss, th.refs());
        const ParamVector gtheta = read_values(t1, grads_as_nodes(th, g_nodes));

        ParamVector g_psi_meta = pv_zeros_like(ranker->params);
        ParamVector v_meta;  // grad of the meta loss at the lookahead
        double meta_before = 0.0;
        if (eff_alpha > 0.0) {
          const ParamNodes th2 = sgd_step_traced(t1, th, g_nodes, cfg.mu);
          const NodeRef lmeta = ad::neg(
              t1, ad::mean_all(t1, policy_log_prob_node(
                                       t1, policy, th2, t1.leaf(bE.states),
                                       bE.actions)));
          row.L_meta = t1.val(lmeta)(0, 0);
          if (cfg.diag_interval > 0 && iter % cfg.diag_interval == 0) {
            const NodeRef lmeta0 = ad::neg(
                t1, ad::mean_all(t1, policy_log_prob_node(
                                         t1, policy, th, t1.leaf(bE.states),
                                         bE.actions)));
            meta_before = t1.val(lmeta0)(0, 0);
          }
          std::vector<NodeRef> wrt;
          for (const auto& s : ps.segs) wrt.push_back(s.second);
          for (const auto& s : th2.segs) wrt.push_back(s.second);
          const auto gs = t1.backward(lmeta, wrt);
          std::vector<NodeRef> psi_part(gs.begin(),
                                        gs.begin() + static_cast<long>(ps.segs.size()));
          std::vector<NodeRef> th2_part(gs.begin() + static_cast<long>(ps.segs.size()),
                                        gs.end());
          g_psi_meta = read_values(t1, grads_as_nodes(ps, psi_part));
          v_meta = read_values(t1, grads_as_nodes(th2, th2_part));
        }

        // Production policy step (the traced lookahead stays plain SGD).
        const ParamVector theta_prev = policy.params;
        policy.params = adam.used
                            ? adam_step(adam.policy, policy.params, gtheta, adam_pi)
                            : sgd_step(policy.params, gtheta, cfg.mu);

        // Pairwise loss at the updated policy.
        ParamVector g_psi_van = pv_zeros_like(ranker->params);
        PairBatch pb;
        double nll_after = 0.0;
        bool have_pairs = false;
        const bool want_diag =
            cfg.diag_interval > 0 && iter % cfg.diag_interval == 0;
        ParamVector g_theta_van;  // policy-direction gradient of the nll
        if (eff_beta > 0.0 || want_diag) {
          std::mt19937_64 rngP(mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamPairs));
          pb = sample_pairs(view, env, cfg.n2, enc_d, rngP);
          xs(pb.states);
          fill_policy_actions(pb, policy, cfg.ranker_input,
                              mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamPairPolicyActions));
          have_pairs = true;
          Tape t2;
          ParamNodes ps2 = param_leaves(t2, ranker->params);
          // The pair actions live in two leaves so the diagnostic can ask
          // for the nll's gradient at the policy-filled rows.
          const Eigen::Index n = pb.states.rows();
          Eigen::MatrixXd s2(2 * n, pb.states.cols());
          s2 << pb.states, pb.states;
          Eigen::MatrixXd x1(2 * n, pb.a1.cols()), x2(2 * n, pb.a2.cols());
          x1 << pb.a1, pb.a2;
          x2 << pb.a2, pb.a1;
          const NodeRef a1n = t2.leaf(x1);
          const NodeRef a2n = t2.leaf(x2);
          const NodeRef c = ranker_forward_node(t2, *ranker, ps2, t2.leaf(s2),
                                                a1n, a2n);
          Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(2 * n, 1);
          m1.topRows(n).setOnes();
          Eigen::MatrixXd m2 = Eigen::MatrixXd::Ones(2 * n, 1) - m1;
          const NodeRef lc = ad::vlog(t2, c);
          const NodeRef l1c = ad::vlog(t2, ad::add_const(t2, ad::neg(t2, c), 1.0));
          const NodeRef nll = ad::scale(
              t2,
              ad::sum_all(t2, ad::add(t2, ad::mul(t2, t2.leaf(m1), lc),
                                      ad::mul(t2, t2.leaf(m2), l1c))),
              -1.0 / static_cast<double>(n));
          nll_after = t2.val(nll)(0, 0);
          NodeRef total = nll;
          if (cfg.gp_coef > 0.0) {
            const NodeRef gp = gradient_penalty_node(
                t2, *ranker, ps2, pb.states, pb.a1, pb.a2,
                mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamGp));
            total = ad::add(t2, nll, ad::scale(t2, gp, cfg.gp_coef));
          }
          if (eff_beta > 0.0) {
            row.L_vanilla = t2.val(total)(0, 0);
            const auto gv = t2.backward(total, ps2.refs());
            g_psi_van = read_values(t2, grads_as_nodes(ps2, gv));
          }
          if (want_diag) {
            // Gradient of the nll through the policy-filled action slots,
            // pulled back to theta via a replica of the policy forward.
            const NodeRef wrt2[] = {a1n, a2n};
            const auto gi = t2.backward(nll, wrt2);
            const Eigen::MatrixXd G1 = t2.val(gi[0]);
            const Eigen::MatrixXd G2 = t2.val(gi[1]);
            std::vector<int> rows;
            for (std::size_t i = 0; i < pb.kind.size(); ++i)
              if (pb.kind[i] == 0 || pb.kind[i] == 2)
                rows.push_back(static_cast<int>(i));
            Eigen::MatrixXd sp(rows.size(), pb.states.cols());
            Eigen::MatrixXd gp_slots(rows.size(), pb.a1.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) {
              const int r = rows[i];
              sp.row(i) = pb.states.row(r);
              // kind 0: policy action sits in the a2 slot, which is x2's
              // top half and x1's bottom half; kind 2: the a1 slot.
              if (pb.kind[static_cast<std::size_t>(r)] == 0)
                gp_slots.row(i) = G2.row(r) + G1.row(n + r);
              else
                gp_slots.row(i) = G1.row(r) + G2.row(n + r);
            }
            Tape t3;
            ParamNodes th3 = param_leaves(t3, policy.params);
            const NodeRef acts =
                policy_ranker_action_node(t3, policy, th3, t3.leaf(sp));
            const NodeRef contract =
                ad::sum_all(t3, ad::mul(t3, acts, t3.leaf(gp_slots)));
            const auto gt = t3.backward(contract, th3.refs());
            g_theta_van = read_values(t3, grads_as_nodes(th3, gt));
          }
        }

        if (row.L_meta || row.L_vanilla)
          row.L_C = eff_alpha * row.L_meta.value_or(0.0) +
                    eff_beta * row.L_vanilla.value_or(0.0);

        // Alignment diagnostics run before the discriminator moves: they
        // compare L_C across the policy step at the current psi.
        if (want_diag) {
          ParamVector g_lc_theta = pv_zeros_like(policy.params);
          if (eff_alpha > 0.0 && v_meta.count() > 0)
            g_lc_theta = pv_add(g_lc_theta, pv_scale(v_meta, eff_alpha));
          if (have_pairs && g_theta_van.count() > 0)
            g_lc_theta = pv_add(g_lc_theta, pv_scale(g_theta_van, eff_beta));
          const double inner = pv_dot(g_lc_theta, gtheta);
          const double g2sq = pv_sq_norm(gtheta);
          row.inner = inner;
          row.g2sq = g2sq;
          if (g2sq >= 1e-12) row.implied_K = inner / g2sq;

          if (diag_csv.is_open()) {
            // Realized composite change across the policy step: the same
            // pair indices and random actions, policy slots refilled at the
            // pre-step parameters.
            double nll_before = 0.0;
            if (have_pairs) {
              PolicyModel prev = policy;
              prev.params = theta_prev;
              std::mt19937_64 rngP0(mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamPairs));
              PairBatch pb0 = sample_pairs(view, env, cfg.n2, enc_d, rngP0);
              xs(pb0.states);
              fill_policy_actions(pb0, prev, cfg.ranker_input,
                                  mix_seed(cfg.seed, static_cast<std::uint64_t>(iter), kStreamPairPolicyActions));
              Tape t4;
              ParamNodes ps4 = param_leaves(t4, ranker->params);
              nll_before = t4.val(build_vanilla_nll(t4, *ranker, ps4, pb0))(0, 0);
            }
            const double before = eff_alpha * meta_before + eff_beta * nll_before;
            const double after = eff_alpha * row.L_meta.value_or(0.0) +
                                 eff_beta * nll_after;
            diag_csv << iter << ',' << fmt_double(inner) << ','
                     << fmt_double(g2sq) << ','
                     << (row.implied_K ? fmt_double(*row.implied_K) : std::string())
                     << ',' << fmt_double(before) << ',' << fmt_double(after)
                     << '\n';
          }
        }

        // Discriminator step on the composite gradient.
        ParamVector g_psi = pv_add(pv_scale(g_psi_meta, eff_alpha),
                                   pv_scale(g_psi_van, eff_beta));
        ranker->params =
            adam.used ? adam_step(adam.ranker, ranker->params, g_psi, adam_psi)
                      : sgd_step(ranker->params, g_psi, cfg.phi);
      } else {  // expert-distribution weighting, with or without the meta goal
        Batch bE = gather(view.expert, cfg.n1, obs_d, enc_d, discrete, rngE);
        xs(bE.states);
        Tape t;
        ParamNodes th = param_leaves(t, policy.params);
        ParamNodes ps = param_leaves(t, classifier->params);

        const NodeRef h =
            classifier_forward_node(t, *classifier, ps, bD.states, bD.actions);
        const NodeRef lp =
            policy_log_prob_node(t, policy, th, t.leaf(bD.states), bD.actions);
        const NodeRef actor = ad::neg(t, ad::mean_all(t, ad::mul(t, h, lp)));
        row.L_actor = t.val(actor)(0, 0);
        const Eigen::VectorXd wv = t.val(h).col(0);
        row.w_mean = wv.mean();
        row.w_zero_frac = 0.0;  // classifier outputs are clipped above zero

        // BCE on the combined batch: expert batch is all positive.
        Eigen::MatrixXd sc(cfg.n1 + cfg.n2, bD.states.cols());
        sc << bE.states, bD.states;
        Eigen::MatrixXd ac(cfg.n1 + cfg.n2, bD.actions.cols());
        ac << bE.actions, bD.actions;
        Eigen::MatrixXd y(cfg.n1 + cfg.n2, 1);
        y.topRows(cfg.n1).setOnes();
        y.bottomRows(cfg.n2) = bD.expert_label;
        const Eigen::MatrixXd y_not = Eigen::MatrixXd::Ones(y.rows(), 1) - y;
        const NodeRef hc = classifier_forward_node(t, *classifier, ps, sc, ac);
        const NodeRef bce = ad::neg(
            t,
            ad::mean_all(
                t, ad::add(t, ad::mul(t, t.leaf(y), ad::vlog(t, hc)),
                           ad::mul(t, t.leaf(y_not),
                                   ad::vlog(t, ad::add_const(
                                                   t, ad::neg(t, hc), 1.0))))));
        row.L_vanilla = t.val(bce)(0, 0);

        const auto g_nodes = t.backward(actor, th.refs());
        const ParamVector gtheta = read_values(t, grads_as_nodes(th, g_nodes));

        ParamVector g_psi_meta = pv_zeros_like(classifier->params);
        if (cfg.mode == TrainMode::expert_wbc_meta && eff_alpha > 0.0) {
          const ParamNodes th2 = sgd_step_traced(t, th, g_nodes, cfg.mu);
          const NodeRef lmeta = ad::neg(
              t, ad::mean_all(t, policy_log_prob_node(
                                     t, policy, th2, t.leaf(bE.states),
                                     bE.actions)));
          row.L_meta = t.val(lmeta)(0, 0);
          const auto gm = t.backward(lmeta, ps.refs());
          g_psi_meta = read_values(t, grads_as_nodes(ps, gm));
        }
        const auto gb = t.backward(bce, ps.refs());
        const ParamVector g_psi_bce = read_values(t, grads_as_nodes(ps, gb));

        row.L_C = eff_alpha * row.L_meta.value_or(0.0) +
                  eff_beta * row.L_vanilla.value_or(0.0);

        policy.params = adam.used
                            ? adam_step(adam.policy, policy.params, gtheta, adam_pi)
                            : sgd_step(policy.params, gtheta, cfg.mu);
        ParamVector g_psi = pv_add(pv_scale(g_psi_meta, eff_alpha),
                                   pv_scale(g_psi_bce, eff_beta));
        classifier->params =
            adam.used ? adam_step(adam.ranker, classifier->params, g_psi, adam_psi)
                      : sgd_step(classifier->params, g_psi, cfg.phi);
      }

      const bool eval_now =
          eval_fn && ((cfg.eval_interval > 0 && iter % cfg.eval_interval == 0) ||
                      iter == cfg.iterations);
      if (eval_now) row.eval_score = eval_fn(policy);

      result.rows.push_back(row);
      if (csv.is_open()) csv << report_row_csv(row) << '\n';

      good_policy = policy.params;
      if (ranker) good_psi = ranker->params;
      if (classifier) good_psi = classifier->params;
      good_iter = iter;

      if (cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0)
        write_ckpt(iter);
    } catch (const std::exception& e) {
      // Roll back to the last finished iteration and stop.
      policy.params = good_policy;
      if (ranker && good_psi.count() > 0) ranker->params = good_psi;
      if (classifier && good_psi.count() > 0) classifier->params = good_psi;
      result.aborted = true;
      result.abort_reason =
          "iteration " + std::to_string(iter) + ": " + e.what();
      write_ckpt(good_iter);
      break;
    }
  }

  if (!result.aborted) write_ckpt(cfg.iterations);
  if (csv.is_open()) csv.flush();

  result.policy = policy;
  result.ranker = ranker;
  result.classifier = classifier;
  result.input_standardizer = stdzr;
  return result;
}

// ---- meta-gradient agreement ---------------------------------------------------------

MetaGradCheck meta_gradient_threeway(const PolicyModel& policy,
                                     const RankerModel& ranker,
                                     const Eigen::MatrixXd& expert_states,
                                     const Eigen::MatrixXd& expert_actions,
                                     const Eigen::MatrixXd& data_states,
                                     const Eigen::MatrixXd& data_actions,
                                     double mu) {
  const Eigen::MatrixXd p_vals = policy_actions_for(
      policy, data_states, RankerInputMode::expectation, 0);

  // (a) + (c): the whole pipeline as a scalar function of psi.
  ScalarFn pipeline = [&](Tape& t, const ParamNodes& psi) -> NodeRef {
    ParamNodes th = param_leaves(t, policy.params);
    ActorLossBuild ab = build_actor_loss(t, policy, th, ranker, psi,
                                         data_states, data_actions, p_vals);
    const auto g = t.backward(ab.loss, th.refs());
    const ParamNodes th2 = sgd_step_traced(t, th, g, mu);
    return ad::neg(
        t, ad::mean_all(t, policy_log_prob_node(t, policy, th2,
                                                t.leaf(expert_states),
                                                expert_actions)));
  };
  const ParamVector g_a = grad(pipeline, ranker.params);
  const ParamVector g_fd = finite_diff_grad(pipeline, ranker.params);

  // (b): -mu * d/dpsi [ v . grad_theta L_actor ], v = grad L_meta at the
  // lookahead point.
  ScalarFn2 actor2 = [&](Tape& t, const ParamNodes& th,
                         const ParamNodes& psi) -> NodeRef {
    return build_actor_loss(t, policy, th, ranker, psi, data_states,
                            data_actions, p_vals)
        .loss;
  };
  ScalarFn actor_theta = [&](Tape& t, const ParamNodes& th) -> NodeRef {
    ParamNodes psi = param_leaves(t, ranker.params);
    return build_actor_loss(t, policy, th, ranker, psi, data_states,
                            data_actions, p_vals)
        .loss;
  };
  const ParamVector gtheta = grad(actor_theta, policy.params);
  const ParamVector theta2 = pv_add_scaled(policy.params, gtheta, -mu);
  ScalarFn meta_theta = [&](Tape& t, const ParamNodes& th) -> NodeRef {
    return ad::neg(
        t, ad::mean_all(t, policy_log_prob_node(t, policy, th,
                                                t.leaf(expert_states),
                                                expert_actions)));
  };
  const ParamVector v = grad(meta_theta, theta2);
  const ParamVector g_b = pv_scale(
      mixed_second_vjp(actor2, policy.params, ranker.params, v), -mu);

  MetaGradCheck out;
  out.err_ab = rel_error(g_a, g_b);
  out.err_afd = rel_error(g_a, g_fd);
  out.err_bfd = rel_error(g_b, g_fd);
  {
    Tape t;
    ParamNodes th = param_leaves(t, policy.params);
    ParamNodes psi = param_leaves(t, ranker.params);
    const ActorLossBuild ab = build_actor_loss(
        t, policy, th, ranker, psi, data_states, data_actions, p_vals);
    out.boundary_margin = (ab.c.array() - 0.5).abs().minCoeff();
  }
  return out;
}

std::vector<double> quadratic_loss_changes(const Eigen::MatrixXd& A,
                                           const Eigen::VectorXd& theta0,
                                           double mu, int steps) {
  Eigen::VectorXd th = theta0;
  std::vector<double> changes;
  changes.reserve(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double before = 0.5 * th.dot(A * th);
    th -= mu * (A * th);
    const double after = 0.5 * th.dot(A * th);
    changes.push_back(after - before);
  }
  return changes;
}

}  // namespace ilmar
