#include "ilmar/envs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ilmar {

namespace {

constexpr double kResidualTol = 1e-10;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

int sample_categorical(const Eigen::VectorXd& w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng) * w.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w(i);
    if (r <= acc) return static_cast<int>(i);
  }
  return static_cast<int>(w.size() - 1);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  // splitmix64 over a simple combination; good enough stream separation.
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL +
                    c * 0x94d049bb133111ebULL + 0x2545f4914f6cdd1dULL;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// ---- tabular exact machinery -------------------------------------------------

PolicyEvalResult policy_evaluation_tabular(const TabularMDP& mdp,
                                           const Eigen::MatrixXd& pi,
                                           double gamma_override) {
  const int S = mdp.n_states, A = mdp.n_actions, H = mdp.horizon;
  require(pi.rows() == S && pi.cols() == A, "policy_evaluation_tabular: pi shape");
  for (int s = 0; s < S; ++s) {
    require((pi.row(s).array() >= -1e-12).all() &&
                std::abs(pi.row(s).sum() - 1.0) < 1e-9,
            "policy_evaluation_tabular: row " + std::to_string(s) +
                " of pi is not a distribution");
  }
  const double gamma = gamma_override >= 0.0 ? gamma_override : mdp.gamma;

  PolicyEvalResult out;
  out.V = Eigen::MatrixXd::Zero(H + 1, S);
  out.Q.assign(static_cast<std::size_t>(H + 1), Eigen::MatrixXd::Zero(S, A));
  for (int h = 1; h <= H; ++h) {
    Eigen::MatrixXd& Q = out.Q[static_cast<std::size_t>(h)];
    const Eigen::VectorXd vprev = out.V.row(h - 1).transpose();
    for (int a = 0; a < A; ++a)
      Q.col(a) = mdp.R.col(a) + gamma * (mdp.P[static_cast<std::size_t>(a)] * vprev);
    for (int s = 0; s < S; ++s) {
      if (mdp.terminal[static_cast<std::size_t>(s)]) {
        Q.row(s).setZero();
        continue;
      }
      out.V(h, s) = pi.row(s).dot(Q.row(s));
    }
  }

  // Independent residual sweep over every (h, s).
  double res = 0.0;
  for (int h = 1; h <= H; ++h) {
    const Eigen::VectorXd vprev = out.V.row(h - 1).transpose();
    for (int s = 0; s < S; ++s) {
      if (mdp.terminal[static_cast<std::size_t>(s)]) continue;
      double v = 0.0;
      for (int a = 0; a < A; ++a) {
        v += pi(s, a) * (mdp.R(s, a) +
                         gamma * mdp.P[static_cast<std::size_t>(a)].row(s).dot(vprev));
      }
      res = std::max(res, std::abs(v - out.V(h, s)));
    }
  }
  out.bellman_residual = res;
  if (!(res <= kResidualTol))
    throw std::runtime_error("policy_evaluation_tabular: Bellman residual " +
                             std::to_string(res) + " above tolerance");
  return out;
}

Eigen::MatrixXd uniform_policy(const TabularMDP& mdp) {
  return Eigen::MatrixXd::Constant(mdp.n_states, mdp.n_actions,
                                   1.0 / mdp.n_actions);
}

Eigen::MatrixXd value_iteration_greedy(const TabularMDP& mdp) {
  const int S = mdp.n_states, A = mdp.n_actions, H = mdp.horizon;
  Eigen::VectorXd v = Eigen::VectorXd::Zero(S);
  Eigen::MatrixXd Q(S, A);
  for (int h = 1; h <= H; ++h) {
    for (int a = 0; a < A; ++a)
      Q.col(a) = mdp.R.col(a) + mdp.gamma * (mdp.P[static_cast<std::size_t>(a)] * v);
    for (int s = 0; s < S; ++s)
      v(s) = mdp.terminal[static_cast<std::size_t>(s)] ? 0.0 : Q.row(s).maxCoeff();
  }
  Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(S, A);
  for (int s = 0; s < S; ++s) {
    int best = 0;
    for (int a = 1; a < A; ++a)
      if (Q(s, a) > Q(s, best)) best = a;
    pi(s, best) = 1.0;
  }
  return pi;
}

double exact_return(const TabularMDP& mdp, const Eigen::MatrixXd& pi,
                    double gamma) {
  PolicyEvalResult ev = policy_evaluation_tabular(mdp, pi, gamma);
  return mdp.p0.dot(ev.V.row(mdp.horizon).transpose());
}

// ---- gridworld ----------------------------------------------------------------

namespace {

// dx, dy per action: east, west, north, south.
constexpr int kDx[4] = {1, -1, 0, 0};
constexpr int kDy[4] = {0, 0, 1, -1};

int grid_move(const GridWorldSpec& g, int cell, int dir) {
  const int x = cell % g.width, y = cell / g.width;
  const int nx = std::clamp(x + kDx[dir], 0, g.width - 1);
  const int ny = std::clamp(y + kDy[dir], 0, g.height - 1);
  return g.cell(nx, ny);
}

}  // namespace

TabularMDP to_tabular(const GridWorldSpec& g) {
  require(g.width > 0 && g.height > 0, "gridworld: empty grid");
  require(g.slip_prob >= 0.0 && g.slip_prob < 1.0, "gridworld: slip_prob in [0,1)");
  require(g.goal_x >= 0 && g.goal_x < g.width && g.goal_y >= 0 && g.goal_y < g.height,
          "gridworld: goal outside grid");
  require(g.start_x >= 0 && g.start_x < g.width && g.start_y >= 0 && g.start_y < g.height,
          "gridworld: start outside grid");

  const int S = g.n_cells(), A = 4;
  TabularMDP m;
  m.n_states = S;
  m.n_actions = A;
  m.horizon = g.horizon;
  m.gamma = g.gamma;
  m.p0 = Eigen::VectorXd::Zero(S);
  m.p0(g.start_cell()) = 1.0;
  m.terminal.assign(static_cast<std::size_t>(S), 0);
  m.terminal[static_cast<std::size_t>(g.goal_cell())] = 1;
  m.P.assign(4, Eigen::MatrixXd::Zero(S, S));
  m.R = Eigen::MatrixXd::Zero(S, A);

  for (int s = 0; s < S; ++s) {
    for (int a = 0; a < A; ++a) {
      if (m.terminal[static_cast<std::size_t>(s)]) {
        m.P[static_cast<std::size_t>(a)](s, s) = 1.0;
        continue;
      }
      // Intended direction keeps 1 - slip + slip/4; the rest get slip/4.
      for (int d = 0; d < 4; ++d) {
        const double p = (d == a ? 1.0 - g.slip_prob : 0.0) + g.slip_prob / 4.0;
        if (p == 0.0) continue;
        const int ns = grid_move(g, s, d);
        m.P[static_cast<std::size_t>(a)](s, ns) += p;
        m.R(s, a) += p * (g.step_reward + (ns == g.goal_cell() ? g.goal_reward : 0.0));
      }
    }
  }
  return m;
}

Eigen::VectorXd grid_obs(const GridWorldSpec& g, int cell) {
  Eigen::VectorXd o = Eigen::VectorXd::Zero(g.n_cells());
  o(cell) = 1.0;
  return o;
}

// ---- point-mass -----------------------------------------------------------------

LinPointMassSpec LinPointMassSpec::make_default() {
  LinPointMassSpec s;
  s.A = Eigen::MatrixXd::Identity(s.n, s.n);
  s.B = 0.1 * Eigen::MatrixXd::Identity(s.n, s.m);
  s.Qc = Eigen::MatrixXd::Identity(s.n, s.n);
  s.Rc = 0.1 * Eigen::MatrixXd::Identity(s.m, s.m);
  return s;
}

std::vector<Eigen::MatrixXd> lqr_gains(const LinPointMassSpec& s) {
  std::vector<Eigen::MatrixXd> K(static_cast<std::size_t>(s.horizon + 1),
                                 Eigen::MatrixXd::Zero(s.m, s.n));
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(s.n, s.n);
  for (int h = 1; h <= s.horizon; ++h) {
    Eigen::MatrixXd G = s.Rc + s.gamma * s.B.transpose() * P * s.B;
    Eigen::MatrixXd Kh =
        G.ldlt().solve(s.gamma * s.B.transpose() * P * s.A);
    Eigen::MatrixXd acl = s.A - s.B * Kh;
    P = s.Qc + Kh.transpose() * s.Rc * Kh + s.gamma * acl.transpose() * P * acl;
    K[static_cast<std::size_t>(h)] = Kh;
  }
  return K;
}

// ---- runtime episodes -------------------------------------------------------------

int obs_dim(const EnvSpec& e) {
  return std::visit(
      [](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, GridWorldSpec>)
          return s.n_cells();
        else
          return s.n;
      },
      e);
}

int action_dim(const EnvSpec& e) {
  return std::visit(
      [](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, GridWorldSpec>)
          return 4;
        else
          return s.m;
      },
      e);
}

bool is_discrete(const EnvSpec& e) {
  return std::holds_alternative<GridWorldSpec>(e);
}

int env_horizon(const EnvSpec& e) {
  return std::visit([](const auto& s) { return s.horizon; }, e);
}

EnvState env_reset(const EnvSpec& e, std::mt19937_64& rng) {
  EnvState st;
  if (const auto* g = std::get_if<GridWorldSpec>(&e)) {
    const int c = g->start_cell();
    st.obs = grid_obs(*g, c);
    st.x = Eigen::VectorXd::Constant(1, static_cast<double>(c));
    st.done = c == g->goal_cell();
  } else {
    const auto& p = std::get<LinPointMassSpec>(e);
    std::normal_distribution<double> n(0.0, p.start_std);
    Eigen::VectorXd x(p.n);
    for (int i = 0; i < p.n; ++i) x(i) = n(rng);
    st.x = x;
    st.obs = x;
  }
  return st;
}

double env_step(const EnvSpec& e, EnvState& st, const Eigen::VectorXd& action,
                std::mt19937_64& rng) {
  if (st.done) throw std::invalid_argument("env_step: episode already finished");
  if (const auto* g = std::get_if<GridWorldSpec>(&e)) {
    require(action.size() == 1, "env_step: gridworld action must be a 1-vector");
    const int a = static_cast<int>(action(0));
    require(a >= 0 && a < 4 && action(0) == static_cast<double>(a),
            "env_step: gridworld action index out of range");
    int dir = a;
    if (g->slip_prob > 0.0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      if (u(rng) < g->slip_prob) {
        std::uniform_int_distribution<int> d4(0, 3);
        dir = d4(rng);
      }
    }
    const int cell = static_cast<int>(st.x(0));
    const int next = grid_move(*g, cell, dir);
    const double reward =
        g->step_reward + (next == g->goal_cell() ? g->goal_reward : 0.0);
    st.x(0) = static_cast<double>(next);
    st.obs = grid_obs(*g, next);
    st.t += 1;
    st.done = next == g->goal_cell() || st.t >= g->horizon;
    return reward;
  }
  const auto& p = std::get<LinPointMassSpec>(e);
  require(action.size() == p.m, "env_step: point-mass action dimension");
  Eigen::VectorXd a =
      action.cwiseMax(-p.action_bound).cwiseMin(p.action_bound);
  const double reward = -(st.x.dot(p.Qc * st.x) + a.dot(p.Rc * a));
  st.x = p.A * st.x + p.B * a;
  st.obs = st.x;
  st.t += 1;
  st.done = st.t >= p.horizon;
  return reward;
}

RolloutResult rollout(const EnvSpec& e, const PolicyFn& pi,
                      std::mt19937_64& rng) {
  EnvState st = env_reset(e, rng);
  RolloutResult r;
  while (!st.done) {
    const Eigen::VectorXd a = pi(st, rng);
    r.ret += env_step(e, st, a, rng);
    r.steps += 1;
  }
  return r;
}

PolicyFn tabular_policy_fn(const GridWorldSpec& g, const Eigen::MatrixXd& pi) {
  require(pi.rows() == g.n_cells() && pi.cols() == 4,
          "tabular_policy_fn: pi shape");
  return [pi](const EnvState& st, std::mt19937_64& rng) {
    const int cell = static_cast<int>(st.x(0));
    const int a = sample_categorical(pi.row(cell).transpose(), rng);
    return Eigen::VectorXd::Constant(1, static_cast<double>(a));
  };
}

PolicyFn lqr_policy_fn(const LinPointMassSpec& s) {
  auto K = lqr_gains(s);
  return [s, K](const EnvState& st, std::mt19937_64&) {
    const int left = std::max(1, s.horizon - st.t);
    Eigen::VectorXd a = -K[static_cast<std::size_t>(left)] * st.x;
    return a.cwiseMax(-s.action_bound).cwiseMin(s.action_bound).eval();
  };
}

PolicyFn uniform_random_policy_fn(const EnvSpec& e) {
  if (const auto* g = std::get_if<GridWorldSpec>(&e)) {
    (void)g;
    return [](const EnvState&, std::mt19937_64& rng) {
      std::uniform_int_distribution<int> d4(0, 3);
      return Eigen::VectorXd::Constant(1, static_cast<double>(d4(rng)));
    };
  }
  const auto& p = std::get<LinPointMassSpec>(e);
  return [p](const EnvState&, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-p.action_bound, p.action_bound);
    Eigen::VectorXd a(p.m);
    for (int i = 0; i < p.m; ++i) a(i) = u(rng);
    return a;
  };
}

// ---- advantages --------------------------------------------------------------------

AdvantageOracle AdvantageOracle::exact(const TabularMDP& mdp,
                                       const Eigen::MatrixXd& pi) {
  AdvantageOracle o;
  o.mdp = mdp;
  o.pi = pi;
  o.eval = policy_evaluation_tabular(mdp, pi);
  return o;
}

AdvantageEstimate AdvantageOracle::advantage(int s, int a, int steps_left) const {
  const int h = steps_left < 0 ? mdp.horizon : steps_left;
  require(h >= 0 && h <= mdp.horizon, "advantage: steps_left out of range");
  require(s >= 0 && s < mdp.n_states && a >= 0 && a < mdp.n_actions,
          "advantage: state or action out of range");
  const auto& Q = eval.Q[static_cast<std::size_t>(h)];
  return AdvantageEstimate{Q(s, a) - eval.V(h, s), 0.0};
}

namespace {

double mc_return_from(const TabularMDP& mdp, const Eigen::MatrixXd& pi,
                      int s, int first_action, int steps,
                      std::mt19937_64& rng) {
  double ret = 0.0, disc = 1.0;
  int cur = s;
  for (int k = 0; k < steps; ++k) {
    if (mdp.terminal[static_cast<std::size_t>(cur)]) break;
    const int a = (k == 0 && first_action >= 0)
                      ? first_action
                      : sample_categorical(pi.row(cur).transpose(), rng);
    ret += disc * mdp.R(cur, a);
    disc *= mdp.gamma;
    cur = sample_categorical(
        mdp.P[static_cast<std::size_t>(a)].row(cur).transpose(), rng);
  }
  return ret;
}

}  // namespace

AdvantageEstimate advantage_mc(const TabularMDP& mdp, const Eigen::MatrixXd& pi,
                               int s, int a, int n_rollouts,
                               std::uint64_t seed, int steps_left) {
  const int h = steps_left < 0 ? mdp.horizon : steps_left;
  require(n_rollouts >= 2, "advantage_mc: need at least two rollouts");
  Eigen::VectorXd diffs(n_rollouts);
  for (int j = 0; j < n_rollouts; ++j) {
    // Common random numbers: the Q and V rollouts of pair j share a seed.
    std::mt19937_64 rq(mix_seed(seed, static_cast<std::uint64_t>(j)));
    std::mt19937_64 rv(mix_seed(seed, static_cast<std::uint64_t>(j)));
    const double q = mc_return_from(mdp, pi, s, a, h, rq);
    const double v = mc_return_from(mdp, pi, s, -1, h, rv);
    diffs(j) = q - v;
  }
  const double mean = diffs.mean();
  const double var =
      (diffs.array() - mean).square().sum() / static_cast<double>(n_rollouts - 1);
  return AdvantageEstimate{
      mean, std::sqrt(var / static_cast<double>(n_rollouts))};
}

// ---- scores and tiers ------------------------------------------------------------------

double normalized_score(double mean_return, double random_ref,
                        double expert_ref) {
  if (std::abs(expert_ref - random_ref) < 1e-9)
    throw std::invalid_argument(
        "normalized_score: expert and random references coincide");
  return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref);
}

ScoreRefs score_refs(const EnvSpec& e) {
  if (const auto* g = std::get_if<GridWorldSpec>(&e)) {
    TabularMDP tab = to_tabular(*g);
    ScoreRefs r;
    r.expert_ref = exact_return(tab, value_iteration_greedy(tab), 1.0);
    r.random_ref = exact_return(tab, uniform_policy(tab), 1.0);
    return r;
  }
  const auto& p = std::get<LinPointMassSpec>(e);
  const int n_ep = 512;
  auto mc = [&](const PolicyFn& pi, std::uint64_t salt) {
    double acc = 0.0;
    for (int i = 0; i < n_ep; ++i) {
      std::mt19937_64 rng(mix_seed(0x5eedf00dULL, salt, static_cast<std::uint64_t>(i)));
      acc += rollout(e, pi, rng).ret;
    }
    return acc / n_ep;
  };
  ScoreRefs r;
  r.expert_ref = mc(lqr_policy_fn(p), 1);
  r.random_ref = mc(uniform_random_policy_fn(e), 2);
  return r;
}

namespace {

bool moves_away(const GridWorldSpec& g, int cell, int a) {
  const int x = cell % g.width, y = cell / g.width;
  const int before = std::abs(x - g.goal_x) + std::abs(y - g.goal_y);
  const int nc = grid_move(g, cell, a);
  const int nx = nc % g.width, ny = nc / g.width;
  return std::abs(nx - g.goal_x) + std::abs(ny - g.goal_y) > before;
}

// Calibrates knob -> score by bisection against a decreasing score curve,
// then falls back to a fine scan when the curve steps over the window.
double calibrate_knob(const std::function<double(double)>& score,
                      double target, double tol, double* achieved) {
  double lo = 0.0, hi = 1.0;
  double t = 0.5;
  for (int it = 0; it < 60; ++it) {
    t = 0.5 * (lo + hi);
    const double sc = score(t);
    if (std::abs(sc - target) <= tol) {
      *achieved = sc;
      return t;
    }
    (sc > target ? lo : hi) = t;
  }
  double best_t = t, best_err = std::abs(score(t) - target);
  for (int i = 0; i <= 400; ++i) {
    const double cand = i / 400.0;
    const double err = std::abs(score(cand) - target);
    if (err < best_err) {
      best_err = err;
      best_t = cand;
    }
  }
  *achieved = score(best_t);
  if (best_err > tol) return -1.0;
  return best_t;
}

}  // namespace

std::vector<TierPolicy> make_tier_policies(const GridWorldSpec& g,
                                           const std::vector<double>& fractions,
                                           unsigned seed) {
  const TabularMDP tab = to_tabular(g);
  const int S = tab.n_states, A = tab.n_actions;

  // Full-horizon optimal Q in the task's discount geometry.
  Eigen::VectorXd v = Eigen::VectorXd::Zero(S);
  Eigen::MatrixXd qstar(S, A);
  for (int h = 1; h <= tab.horizon; ++h) {
    for (int a = 0; a < A; ++a)
      qstar.col(a) = tab.R.col(a) + tab.gamma * (tab.P[static_cast<std::size_t>(a)] * v);
    for (int s = 0; s < S; ++s)
      v(s) = tab.terminal[static_cast<std::size_t>(s)] ? 0.0 : qstar.row(s).maxCoeff();
  }

  // A fixed noise field shared by every tier: corruption is systematic
  // (same wrong action favoured on every visit) and nests as the knob grows,
  // the way snapshots of one imperfect learner would.  Actions that increase
  // the distance to goal get a bias so mistakes cost something.
  std::mt19937_64 rng(mix_seed(seed, 0xE7A));
  std::normal_distribution<double> nrm(0.0, 1.0);
  Eigen::MatrixXd eta(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a)
      eta(s, a) = nrm(rng) + (moves_away(g, s, a) ? 1.0 : 0.0);

  // Softmax over perturbed optimal values.  Both the perturbation and the
  // temperature grow with the knob, so the score curve is continuous and
  // bisection can land on any target.
  const double beta_hi = 12.0, beta_lo = 1.0, noise_scale = 3.0;
  auto tier_pi = [&](double t) {
    const double beta = beta_hi + (beta_lo - beta_hi) * t;
    const Eigen::MatrixXd logits = beta * (qstar + t * noise_scale * eta);
    Eigen::MatrixXd pi(S, A);
    for (int s = 0; s < S; ++s) {
      Eigen::RowVectorXd z = logits.row(s);
      z.array() -= z.maxCoeff();
      Eigen::RowVectorXd e = z.array().exp();
      pi.row(s) = e / e.sum();
    }
    return pi;
  };

  const ScoreRefs refs = score_refs(EnvSpec{g});
  auto score_of = [&](double t) {
    return normalized_score(exact_return(tab, tier_pi(t), 1.0),
                            refs.random_ref, refs.expert_ref);
  };

  std::vector<TierPolicy> out;
  std::vector<double> achieved_all;
  bool ok = true;
  for (double f : fractions) {
    require(f > 0.0 && f < 1.0, "make_tier_policies: fractions must be in (0,1)");
    TierPolicy tp;
    tp.target_fraction = f;
    double achieved = 0.0;
    // 10% relative tolerance on the normalized scale: |score - 100f| <= 10f.
    const double knob = calibrate_knob(score_of, 100.0 * f, 10.0 * f, &achieved);
    tp.knob = knob;
    tp.achieved_score = achieved;
    achieved_all.push_back(achieved);
    if (knob < 0.0) ok = false;
    else tp.pi = tier_pi(knob);
    out.push_back(std::move(tp));
  }
  if (!ok) {
    std::string msg = "make_tier_policies: calibration failed; achieved scores:";
    for (double a : achieved_all) msg += " " + std::to_string(a);
    throw std::runtime_error(msg);
  }
  return out;
}

std::vector<PmTierPolicy> make_tier_policies_pm(
    const LinPointMassSpec& s, const std::vector<double>& fractions,
    unsigned seed) {
  const EnvSpec env{s};
  const ScoreRefs refs = score_refs(env);
  const int n_ep = 200;

  auto policy_at = [&](double t) {
    PmTierPolicy p;
    p.knob = t;
    p.gain_scale = 1.0 - 0.95 * t;
    p.noise_std = 0.75 * t * s.action_bound;
    return p;
  };
  auto score_of = [&](double t) {
    const PmTierPolicy p = policy_at(t);
    const PolicyFn fn = pm_tier_policy_fn(s, p);
    double acc = 0.0;
    for (int i = 0; i < n_ep; ++i) {
      std::mt19937_64 rng(mix_seed(seed, 0xCA11B, static_cast<std::uint64_t>(i)));
      acc += rollout(env, fn, rng).ret;
    }
    return normalized_score(acc / n_ep, refs.random_ref, refs.expert_ref);
  };

  std::vector<PmTierPolicy> out;
  std::vector<double> achieved_all;
  bool ok = true;
  for (double f : fractions) {
    double achieved = 0.0;
    const double knob = calibrate_knob(score_of, 100.0 * f, 10.0 * f, &achieved);
    PmTierPolicy p = policy_at(std::max(knob, 0.0));
    p.target_fraction = f;
    p.achieved_score = achieved;
    achieved_all.push_back(achieved);
    if (knob < 0.0) ok = false;
    out.push_back(p);
  }
  if (!ok) {
    std::string msg = "make_tier_policies_pm: calibration failed; achieved scores:";
    for (double a : achieved_all) msg += " " + std::to_string(a);
    throw std::runtime_error(msg);
  }
  return out;
}

PolicyFn pm_tier_policy_fn(const LinPointMassSpec& s, const PmTierPolicy& t) {
  auto K = lqr_gains(s);
  return [s, K, t](const EnvState& st, std::mt19937_64& rng) {
    const int left = std::max(1, s.horizon - st.t);
    Eigen::VectorXd a = -t.gain_scale * (K[static_cast<std::size_t>(left)] * st.x);
    if (t.noise_std > 0.0) {
      std::normal_distribution<double> n(0.0, t.noise_std);
      for (int i = 0; i < s.m; ++i) a(i) += n(rng);
    }
    return a.cwiseMax(-s.action_bound).cwiseMin(s.action_bound).eval();
  };
}

}  // namespace ilmar
