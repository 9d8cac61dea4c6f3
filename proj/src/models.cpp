#include "ilmar/models.hpp"

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace ilmar {

using ad::NodeRef;
using ad::Tape;

namespace {

NodeRef activate(Tape& t, const std::string& kind, NodeRef x) {
  if (kind == "tanh") return ad::vtanh(t, x);
  if (kind == "relu") return ad::vrelu(t, x);
  throw std::invalid_argument("unknown activation '" + kind + "'");
}

MLPSpec policy_mlp_spec(const PolicyModelSpec& s) {
  MLPSpec m;
  m.in = s.obs_dim;
  m.hidden = s.hidden;
  m.out = s.action_dim;
  m.activation = s.activation;
  return m;
}

// Encoders treat the last width as their output and keep it activated.
MLPSpec encoder_spec(int in, const std::vector<int>& widths,
                     const std::string& act) {
  if (widths.empty()) throw std::invalid_argument("encoder needs at least one layer");
  MLPSpec m;
  m.in = in;
  m.hidden.assign(widths.begin(), widths.end() - 1);
  m.out = widths.back();
  m.activation = act;
  m.activate_last = true;
  return m;
}

MLPSpec head_spec(const RankerModelSpec& s) {
  MLPSpec m;
  m.in = s.state_hidden.back() + 2 * s.action_hidden.back();
  m.hidden = s.head_hidden;
  m.out = 1;
  m.activation = s.activation;
  return m;
}

Eigen::MatrixXd glorot(int rows, int cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Eigen::MatrixXd w(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = u(rng);
  return w;
}

}  // namespace

ParamVector mlp_params(const MLPSpec& spec, const std::string& prefix,
                       std::mt19937_64& rng) {
  ParamVector p;
  int in = spec.in;
  std::vector<int> outs = spec.hidden;
  outs.push_back(spec.out);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    p.add(prefix + ".w" + std::to_string(i), glorot(in, outs[i], rng));
    p.add(prefix + ".b" + std::to_string(i), Eigen::MatrixXd::Zero(1, outs[i]));
    in = outs[i];
  }
  return p;
}

NodeRef mlp_forward(Tape& t, const MLPSpec& spec, const ParamNodes& pn,
                    const std::string& prefix, NodeRef x) {
  const std::size_t n_layers = spec.hidden.size() + 1;
  for (std::size_t i = 0; i < n_layers; ++i) {
    x = ad::affine(t, x, pn.at(prefix + ".w" + std::to_string(i)),
                   pn.at(prefix + ".b" + std::to_string(i)));
    if (i + 1 < n_layers || spec.activate_last)
      x = activate(t, spec.activation, x);
  }
  return x;
}

// ---- policy ---------------------------------------------------------------

PolicyModel PolicyModel::init(const PolicyModelSpec& spec, std::uint64_t seed) {
  PolicyModel m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  m.params = mlp_params(policy_mlp_spec(spec), "pi", rng);
  if (!spec.discrete)
    m.params.add("pi.logstd", Eigen::MatrixXd::Zero(1, spec.action_dim));
  return m;
}

NodeRef policy_net_forward(Tape& t, const PolicyModel& m, const ParamNodes& pn,
                           NodeRef states) {
  return mlp_forward(t, policy_mlp_spec(m.spec), pn, "pi", states);
}

NodeRef policy_log_prob_node(Tape& t, const PolicyModel& m,
                             const ParamNodes& pn, NodeRef states,
                             const Eigen::MatrixXd& actions) {
  const NodeRef net = policy_net_forward(t, m, pn, states);
  const auto N = t.rows(states);
  if (m.spec.discrete) {
    if (actions.rows() != N || actions.cols() != m.spec.action_dim)
      throw std::invalid_argument("policy_log_prob_node: one-hot shape");
    const NodeRef lse = ad::logsumexp_rows(t, net);
    const NodeRef sel = ad::row_sum(t, ad::mul(t, net, t.leaf(actions)));
    return ad::sub(t, sel, lse);
  }
  if (actions.rows() != N || actions.cols() != m.spec.action_dim)
    throw std::invalid_argument("policy_log_prob_node: action shape");
  const NodeRef ls =
      ad::clamp(t, pn.at("pi.logstd"), m.spec.logstd_min, m.spec.logstd_max);
  const NodeRef bls = ad::broadcast_rows(t, ls, N);
  const NodeRef diff = ad::sub(t, t.leaf(actions), net);
  const NodeRef scaled = ad::mul(t, diff, ad::vexp(t, ad::neg(t, bls)));
  const NodeRef quad = ad::row_sum(t, ad::pow_const(t, scaled, 2.0));
  const NodeRef lp = ad::sub(t, ad::scale(t, quad, -0.5), ad::row_sum(t, bls));
  const double c = -0.5 * m.spec.action_dim * std::log(2.0 * std::numbers::pi);
  return ad::add_const(t, lp, c);
}

NodeRef policy_ranker_action_node(Tape& t, const PolicyModel& m,
                                  const ParamNodes& pn, NodeRef states) {
  const NodeRef net = policy_net_forward(t, m, pn, states);
  if (!m.spec.discrete) return net;
  const NodeRef lse = ad::logsumexp_rows(t, net);
  return ad::vexp(t, ad::sub(t, net, ad::broadcast_cols(t, lse, m.spec.action_dim)));
}

Eigen::VectorXd to_onehot(const Eigen::VectorXd& a, int n_actions) {
  if (a.size() == n_actions) return a;
  if (a.size() != 1)
    throw std::invalid_argument("to_onehot: expected index 1-vector or full encoding");
  const int idx = static_cast<int>(a(0));
  if (idx < 0 || idx >= n_actions || a(0) != static_cast<double>(idx))
    throw std::invalid_argument("to_onehot: bad action index");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n_actions);
  v(idx) = 1.0;
  return v;
}

double policy_log_prob(const PolicyModel& m, const Eigen::VectorXd& s,
                       const Eigen::VectorXd& a) {
  Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  const NodeRef st = t.leaf(s.transpose());
  const Eigen::MatrixXd act =
      (m.spec.discrete ? to_onehot(a, m.spec.action_dim) : a).transpose();
  return t.val(policy_log_prob_node(t, m, pn, st, act))(0, 0);
}

Eigen::VectorXd policy_action_for_ranker(const PolicyModel& m,
                                         const Eigen::VectorXd& s,
                                         RankerInputMode mode,
                                         std::uint64_t seed) {
  Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  const NodeRef st = t.leaf(s.transpose());
  const Eigen::VectorXd out =
      t.val(policy_ranker_action_node(t, m, pn, st)).row(0).transpose();
  if (mode == RankerInputMode::expectation) return out;
  std::mt19937_64 rng(seed);
  if (m.spec.discrete) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng), acc = 0.0;
    int pick = m.spec.action_dim - 1;
    for (int i = 0; i < m.spec.action_dim; ++i) {
      acc += out(i);
      if (r <= acc) {
        pick = i;
        break;
      }
    }
    Eigen::VectorXd oh = Eigen::VectorXd::Zero(m.spec.action_dim);
    oh(pick) = 1.0;
    return oh;
  }
  const Eigen::VectorXd ls = m.params.at("pi.logstd")
                                 .row(0)
                                 .transpose()
                                 .cwiseMax(m.spec.logstd_min)
                                 .cwiseMin(m.spec.logstd_max);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd a(out.size());
  for (Eigen::Index i = 0; i < out.size(); ++i)
    a(i) = out(i) + std::exp(ls(i)) * n(rng);
  return a;
}

Eigen::VectorXd policy_eval_action(const PolicyModel& m,
                                   const Eigen::VectorXd& s) {
  Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  const Eigen::VectorXd net =
      t.val(policy_net_forward(t, m, pn, t.leaf(s.transpose()))).row(0).transpose();
  if (!m.spec.discrete) return net;
  Eigen::Index best = 0;
  net.maxCoeff(&best);
  return Eigen::VectorXd::Constant(1, static_cast<double>(best));
}

// ---- ranker ---------------------------------------------------------------

RankerModel RankerModel::init(const RankerModelSpec& spec, std::uint64_t seed) {
  RankerModel m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  ParamVector senc =
      mlp_params(encoder_spec(spec.obs_dim, spec.state_hidden, spec.activation),
                 "senc", rng);
  ParamVector aenc = mlp_params(
      encoder_spec(spec.action_dim, spec.action_hidden, spec.activation),
      "aenc", rng);
  ParamVector head = mlp_params(head_spec(spec), "head", rng);
  for (auto& [name, v] : senc.segs) m.params.add(name, v);
  for (auto& [name, v] : aenc.segs) m.params.add(name, v);
  for (auto& [name, v] : head.segs) m.params.add(name, v);
  if (spec.zero_init_head) {
    const std::size_t last = spec.head_hidden.size();
    m.params.at("head.w" + std::to_string(last)).setZero();
    m.params.at("head.b" + std::to_string(last)).setZero();
  }
  return m;
}

NodeRef ranker_forward_node(Tape& t, const RankerModel& m, const ParamNodes& pn,
                            NodeRef states, NodeRef a1, NodeRef a2) {
  const MLPSpec senc =
      encoder_spec(m.spec.obs_dim, m.spec.state_hidden, m.spec.activation);
  const MLPSpec aenc =
      encoder_spec(m.spec.action_dim, m.spec.action_hidden, m.spec.activation);
  const NodeRef sc = mlp_forward(t, senc, pn, "senc", states);
  const NodeRef c1 = mlp_forward(t, aenc, pn, "aenc", a1);
  const NodeRef c2 = mlp_forward(t, aenc, pn, "aenc", a2);
  const NodeRef h = ad::concat_cols(t, ad::concat_cols(t, sc, c1), c2);
  const NodeRef z = mlp_forward(t, head_spec(m.spec), pn, "head", h);
  // 0.5 + (1-2eps)*(sigmoid(z) - 0.5): range [eps, 1-eps], and a zero head
  // lands on 0.5 exactly (sigmoid(0) - 0.5 == 0 in floating point).
  const double eps = m.spec.clip_eps;
  const NodeRef centered = ad::add_const(t, ad::vsigmoid(t, z), -0.5);
  return ad::add_const(t, ad::scale(t, centered, 1.0 - 2.0 * eps), 0.5);
}

double ranker_forward(const RankerModel& m, const Eigen::VectorXd& s,
                      const Eigen::VectorXd& a1, const Eigen::VectorXd& a2) {
  Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  return t.val(ranker_forward_node(t, m, pn, t.leaf(s.transpose()),
                                   t.leaf(a1.transpose()),
                                   t.leaf(a2.transpose())))(0, 0);
}

WeightValue weight(const RankerModel& ranker, const PolicyModel& policy,
                   const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                   RankerInputMode mode, std::uint64_t seed) {
  const Eigen::VectorXd pa = policy_action_for_ranker(policy, s, mode, seed);
  const Eigen::VectorXd enc =
      policy.spec.discrete ? to_onehot(a, policy.spec.action_dim) : a;
  WeightValue wv;
  wv.c = ranker_forward(ranker, s, enc, pa);
  wv.w = wv.c > 0.5 ? wv.c : 0.0;  // strict inequality: exactly 1/2 drops out
  return wv;
}

NodeRef gradient_penalty_node(Tape& t, const RankerModel& m,
                              const ParamNodes& pn,
                              const Eigen::MatrixXd& states,
                              const Eigen::MatrixXd& a1,
                              const Eigen::MatrixXd& a2,
                              std::uint64_t interp_seed) {
  if (states.rows() == 0) throw std::invalid_argument("gradient_penalty: empty batch");
  const Eigen::Index N = states.rows();
  std::mt19937_64 rng(interp_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd h1(N, a1.cols()), h2(N, a2.cols());
  for (Eigen::Index i = 0; i < N; ++i) {
    const double ti = u(rng);
    h1.row(i) = ti * a1.row(i) + (1.0 - ti) * a2.row(i);
    h2.row(i) = ti * a2.row(i) + (1.0 - ti) * a1.row(i);
  }
  const NodeRef A1 = t.leaf(h1);
  const NodeRef A2 = t.leaf(h2);
  const NodeRef c = ranker_forward_node(t, m, pn, t.leaf(states), A1, A2);
  const NodeRef wrt[] = {A1, A2};
  const auto grads = t.backward(ad::sum_all(t, c), wrt);
  const NodeRef sq = ad::add(t, ad::row_sum(t, ad::pow_const(t, grads[0], 2.0)),
                             ad::row_sum(t, ad::pow_const(t, grads[1], 2.0)));
  const NodeRef norm = ad::pow_const(t, ad::add_const(t, sq, 1e-12), 0.5);
  return ad::mean_all(t, ad::pow_const(t, ad::add_const(t, norm, -1.0), 2.0));
}

double gradient_penalty(const RankerModel& m, const Eigen::MatrixXd& states,
                        const Eigen::MatrixXd& a1, const Eigen::MatrixXd& a2,
                        std::uint64_t interp_seed) {
  Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  return t.val(gradient_penalty_node(t, m, pn, states, a1, a2, interp_seed))(0, 0);
}

// ---- checkpoints ------------------------------------------------------------

void save_params(const ParamVector& p, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("save_params: cannot open " + path);
  for (const auto& [name, m] : p.segs) {
    nlohmann::json j;
    j["name"] = name;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    nlohmann::json data = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    j["data"] = std::move(data);
    f << j.dump() << '\n';
  }
  if (!f) throw std::runtime_error("save_params: write failed for " + path);
}

ParamVector load_params(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_params: cannot open " + path);
  ParamVector p;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_params: parse error at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw std::runtime_error("load_params: size mismatch at line " +
                               std::to_string(line_no));
    Eigen::MatrixXd m(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
    p.add(j.at("name").get<std::string>(), std::move(m));
  }
  return p;
}

void load_params_into(ParamVector& dst, const std::string& path) {
  ParamVector loaded = load_params(path);
  if (!dst.same_layout(loaded))
    throw std::runtime_error("load_params_into: layout mismatch for " + path);
  dst = std::move(loaded);
}

}  // namespace ilmar
