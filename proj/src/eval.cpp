#include "ilmar/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ilmar {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::invalid_argument(
        "spearman_rho: constant input, correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

EvalResult evaluate_policy(const PolicyModel& policy, const EnvSpec& env,
                           int episodes, std::uint64_t seed,
                           const Standardizer* stdzr) {
  if (episodes <= 0)
    throw std::invalid_argument("evaluate_policy: episodes must be positive");
  const PolicyFn fn = [&](const EnvState& st, std::mt19937_64&) {
    return policy_eval_action(policy,
                              stdzr ? stdzr->apply(st.obs) : st.obs);
  };
  EvalResult out;
  out.episodes = episodes;
  std::vector<double> rets(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    rets[static_cast<std::size_t>(e)] = rollout(env, fn, rng).ret;
    out.mean += rets[static_cast<std::size_t>(e)];
  }
  out.mean /= episodes;
  if (episodes > 1) {
    double ss = 0.0;
    for (const double r : rets) ss += (r - out.mean) * (r - out.mean);
    out.stddev = std::sqrt(ss / (episodes - 1));
  }
  return out;
}

double spearman_rho(const std::vector<double>& x,
                    const std::vector<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("spearman_rho: length mismatch");
  if (x.size() < 2)
    throw std::invalid_argument("spearman_rho: need at least two points");
  return pearson(average_ranks(x), average_ranks(y));
}

WeightQualityResult weight_quality(const RankerModel& ranker,
                                   const PolicyModel& policy,
                                   const DemoDataset& data) {
  const auto* g = std::get_if<GridWorldSpec>(&data.env);
  if (!g)
    throw std::invalid_argument(
        "weight_quality: the exact advantage oracle is tabular; gridworld "
        "datasets only");
  const TabularMDP mdp = to_tabular(*g);
  const Eigen::MatrixXd pi_star = value_iteration_greedy(mdp);
  const AdvantageOracle oracle = AdvantageOracle::exact(mdp, pi_star);

  WeightQualityResult out;
  const std::size_t n_traj = data.supplementary.size();
  out.traj_mean_weight.assign(n_traj, 0.0);
  out.traj_return.assign(n_traj, 0.0);
  std::vector<int> traj_len(n_traj, 0);

  for (std::size_t ti = 0; ti < n_traj; ++ti) {
    const Trajectory& tr = data.supplementary[ti];
    for (std::size_t step = 0; step < tr.size(); ++step) {
      const Transition& x = tr[step];
      int cell = 0;
      x.state.maxCoeff(&cell);  // gridworld observations are one-hot
      const int a = static_cast<int>(x.action(0));
      const int steps_left = g->horizon - static_cast<int>(step);
      out.advantages.push_back(oracle.advantage(cell, a, steps_left).value);
      const double w = weight(ranker, policy, x.state, x.action).w;
      out.weights.push_back(w);
      out.traj_mean_weight[ti] += w;
      out.traj_return[ti] += x.reward;
      traj_len[ti]++;
    }
    if (traj_len[ti] > 0) out.traj_mean_weight[ti] /= traj_len[ti];
  }

  bool any_nonzero = false;
  for (const double w : out.weights) any_nonzero |= (w != 0.0);
  if (!any_nonzero)
    throw std::runtime_error(
        "weight_quality: every weight is zero; the rank statistic is "
        "undefined");

  out.rho_transition = spearman_rho(out.weights, out.advantages);
  if (n_traj >= 2)
    out.rho_trajectory = spearman_rho(out.traj_mean_weight, out.traj_return);
  return out;
}

// ---- learning curves ---------------------------------------------------------------

std::vector<CurvePoint> aggregate_eval_curves(
    const std::vector<std::vector<ReportRow>>& runs) {
  std::map<int, std::vector<double>> by_iter;
  for (const auto& run : runs)
    for (const auto& r : run)
      if (r.eval_score) by_iter[r.iter].push_back(*r.eval_score);
  std::vector<CurvePoint> pts;
  pts.reserve(by_iter.size());
  for (const auto& [iter, scores] : by_iter) {
    CurvePoint p;
    p.iter = iter;
    p.n_seeds = static_cast<int>(scores.size());
    for (const double s : scores) p.mean_score += s;
    p.mean_score /= p.n_seeds;
    double sd = 0.0;
    if (p.n_seeds > 1) {
      double ss = 0.0;
      for (const double s : scores)
        ss += (s - p.mean_score) * (s - p.mean_score);
      sd = std::sqrt(ss / (p.n_seeds - 1));
    }
    const double half = 1.96 * sd / std::sqrt(static_cast<double>(p.n_seeds));
    p.ci_lo = p.mean_score - half;
    p.ci_hi = p.mean_score + half;
    pts.push_back(p);
  }
  return pts;
}

void write_curve_csv(const std::vector<CurvePoint>& pts,
                     const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  f << "iter,mean_score,ci_lo,ci_hi,n_seeds\n";
  for (const auto& p : pts)
    f << p.iter << ',' << fmt_double(p.mean_score) << ','
      << fmt_double(p.ci_lo) << ',' << fmt_double(p.ci_hi) << ','
      << p.n_seeds << '\n';
  if (!f) throw std::runtime_error("write_curve_csv: write failed: " + path);
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_report_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != kReportCsvHeader)
    throw std::runtime_error("read_report_csv: bad header in " + path);
  std::vector<ReportRow> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    cells.resize(11);  // trailing empty cells are dropped by getline
    ReportRow r;
    try {
      r.iter = std::stoi(cells[0]);
      auto opt = [&](int i) -> std::optional<double> {
        if (cells[static_cast<std::size_t>(i)].empty()) return std::nullopt;
        return std::stod(cells[static_cast<std::size_t>(i)]);
      };
      r.L_actor = opt(1);
      r.L_vanilla = opt(2);
      r.L_meta = opt(3);
      r.L_C = opt(4);
      r.w_mean = opt(5);
      r.w_zero_frac = opt(6);
      r.inner = opt(7);
      r.g2sq = opt(8);
      r.implied_K = opt(9);
      r.eval_score = opt(10);
    } catch (const std::exception&) {
      throw std::runtime_error("read_report_csv: parse error at " + path +
                               ":" + std::to_string(lineno));
    }
    rows.push_back(r);
  }
  return rows;
}

void write_correlation_json(const std::string& path, double rho, int n,
                            const std::string& variant) {
  nlohmann::json j;
  j["rho"] = rho;
  j["n"] = n;
  j["variant"] = variant;
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << '\n';
  if (!f)
    throw std::runtime_error("write_correlation_json: write failed: " + path);
}

}  // namespace ilmar
