#include "ilmar/dataset.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace ilmar {

using nlohmann::json;

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vec_from_json(const json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_to_json(m.row(r).transpose()));
  return rows;
}

Eigen::MatrixXd mat_from_json(const json& rows) {
  const Eigen::Index nr = static_cast<Eigen::Index>(rows.size());
  if (nr == 0) return Eigen::MatrixXd(0, 0);
  const Eigen::Index nc = static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd m(nr, nc);
  for (Eigen::Index r = 0; r < nr; ++r)
    m.row(r) = vec_from_json(rows[static_cast<std::size_t>(r)]).transpose();
  return m;
}

bool bits_equal(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

bool vec_bits_equal(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (!bits_equal(a(i), b(i))) return false;
  return true;
}

[[noreturn]] void load_fail(std::size_t line, const std::string& what) {
  throw std::runtime_error("dataset load: " + what + " at line " +
                           std::to_string(line));
}

}  // namespace

std::string env_to_json(const EnvSpec& e) {
  json j;
  if (const auto* g = std::get_if<GridWorldSpec>(&e)) {
    j["kind"] = "gridworld";
    j["width"] = g->width;
    j["height"] = g->height;
    j["start_x"] = g->start_x;
    j["start_y"] = g->start_y;
    j["goal_x"] = g->goal_x;
    j["goal_y"] = g->goal_y;
    j["horizon"] = g->horizon;
    j["gamma"] = g->gamma;
    j["step_reward"] = g->step_reward;
    j["goal_reward"] = g->goal_reward;
    j["slip_prob"] = g->slip_prob;
  } else {
    const auto& p = std::get<LinPointMassSpec>(e);
    j["kind"] = "pointmass";
    j["n"] = p.n;
    j["m"] = p.m;
    j["A"] = mat_to_json(p.A);
    j["B"] = mat_to_json(p.B);
    j["Qc"] = mat_to_json(p.Qc);
    j["Rc"] = mat_to_json(p.Rc);
    j["horizon"] = p.horizon;
    j["gamma"] = p.gamma;
    j["action_bound"] = p.action_bound;
    j["start_std"] = p.start_std;
  }
  return j.dump();
}

EnvSpec env_from_json(const std::string& text) {
  const json j = json::parse(text);
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "gridworld") {
    GridWorldSpec g;
    g.width = j.at("width").get<int>();
    g.height = j.at("height").get<int>();
    g.start_x = j.at("start_x").get<int>();
    g.start_y = j.at("start_y").get<int>();
    g.goal_x = j.at("goal_x").get<int>();
    g.goal_y = j.at("goal_y").get<int>();
    g.horizon = j.at("horizon").get<int>();
    g.gamma = j.at("gamma").get<double>();
    g.step_reward = j.at("step_reward").get<double>();
    g.goal_reward = j.at("goal_reward").get<double>();
    g.slip_prob = j.at("slip_prob").get<double>();
    return EnvSpec{g};
  }
  if (kind == "pointmass") {
    LinPointMassSpec p;
    p.n = j.at("n").get<int>();
    p.m = j.at("m").get<int>();
    p.A = mat_from_json(j.at("A"));
    p.B = mat_from_json(j.at("B"));
    p.Qc = mat_from_json(j.at("Qc"));
    p.Rc = mat_from_json(j.at("Rc"));
    p.horizon = j.at("horizon").get<int>();
    p.gamma = j.at("gamma").get<double>();
    p.action_bound = j.at("action_bound").get<double>();
    p.start_std = j.at("start_std").get<double>();
    return EnvSpec{p};
  }
  throw std::runtime_error("env_from_json: unknown kind '" + kind + "'");
}

std::vector<Trajectory> collect(const EnvSpec& env, const PolicyFn& policy,
                                int n_episodes, std::uint64_t seed,
                                const std::string& source_id,
                                std::int64_t first_episode_id) {
  if (n_episodes < 0)
    throw std::invalid_argument("collect: negative episode count");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n_episodes));
  for (int e = 0; e < n_episodes; ++e) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    EnvState st = env_reset(env, rng);
    Trajectory traj;
    while (!st.done) {
      Transition tr;
      tr.state = st.obs;
      tr.action = policy(st, rng);
      tr.reward = env_step(env, st, tr.action, rng);
      tr.done = st.done;
      tr.episode_id = first_episode_id + e;
      tr.source_id = source_id;
      traj.push_back(std::move(tr));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

DemoDataset build_mixture(const MixtureSpec& spec, const EnvSpec& env) {
  if (spec.n_expert_in_DE < 0 || spec.n_expert_in_DS < 0 ||
      spec.suboptimal_ratio < 0.0)
    throw std::invalid_argument("build_mixture: negative counts");

  const int n_sub_total = static_cast<int>(
      std::llround(spec.suboptimal_ratio * spec.n_expert_in_DS));
  const int n_tiers = static_cast<int>(spec.tier_fractions.size());
  std::vector<int> per_tier(static_cast<std::size_t>(n_tiers), 0);
  if (n_sub_total > 0) {
    for (int k = 0; k < n_tiers; ++k) per_tier[static_cast<std::size_t>(k)] = n_sub_total / n_tiers;
    for (int r = 0; r < n_sub_total % n_tiers; ++r) per_tier[static_cast<std::size_t>(r)] += 1;
  }

  PolicyFn expert;
  std::vector<PolicyFn> tier_fns;
  if (const auto* g = std::get_if<GridWorldSpec>(&env)) {
    expert = tabular_policy_fn(*g, value_iteration_greedy(to_tabular(*g)));
    if (n_sub_total > 0) {
      auto tiers = make_tier_policies(*g, spec.tier_fractions, spec.seed);
      for (const auto& t : tiers) tier_fns.push_back(tabular_policy_fn(*g, t.pi));
    }
  } else {
    const auto& p = std::get<LinPointMassSpec>(env);
    expert = lqr_policy_fn(p);
    if (n_sub_total > 0) {
      auto tiers = make_tier_policies_pm(p, spec.tier_fractions, spec.seed);
      for (const auto& t : tiers) tier_fns.push_back(pm_tier_policy_fn(p, t));
    }
  }

  DemoDataset d;
  d.env = env;
  d.expert = collect(env, expert, spec.n_expert_in_DE,
                     mix_seed(spec.seed, 101), "expert", 0);
  if (spec.n_expert_in_DE > 0) d.provenance["DE:expert"] = spec.n_expert_in_DE;

  d.supplementary = collect(env, expert, spec.n_expert_in_DS,
                            mix_seed(spec.seed, 202), "expert", 0);
  if (spec.n_expert_in_DS > 0) d.provenance["DS:expert"] = spec.n_expert_in_DS;

  std::int64_t next_id = spec.n_expert_in_DS;
  for (int k = 0; k < n_tiers; ++k) {
    const int n_k = per_tier[static_cast<std::size_t>(k)];
    if (n_k == 0) continue;
    const std::string tag = "tier-" + std::to_string(k + 1);
    auto trajs = collect(env, tier_fns[static_cast<std::size_t>(k)], n_k,
                         mix_seed(spec.seed, 303 + static_cast<std::uint64_t>(k)),
                         tag, next_id);
    next_id += n_k;
    d.provenance["DS:" + tag] = n_k;
    for (auto& t : trajs) d.supplementary.push_back(std::move(t));
  }
  return d;
}

void save_dataset(const DemoDataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("save_dataset: cannot open " + path);
  json header;
  header["schema"] = 1;
  header["env"] = json::parse(env_to_json(d.env));
  header["provenance"] = d.provenance;
  f << header.dump() << '\n';

  const bool discrete = is_discrete(d.env);
  auto write_split = [&](const std::vector<Trajectory>& split,
                         const char* name) {
    for (const auto& traj : split) {
      for (const auto& tr : traj) {
        json j;
        j["split"] = name;
        j["state"] = vec_to_json(tr.state);
        if (discrete)
          j["action"] = static_cast<std::int64_t>(std::llround(tr.action(0)));
        else
          j["action"] = vec_to_json(tr.action);
        j["reward"] = tr.reward;
        j["done"] = tr.done;
        j["episode_id"] = tr.episode_id;
        j["source_id"] = tr.source_id;
        f << j.dump() << '\n';
      }
    }
  };
  write_split(d.expert, "DE");
  write_split(d.supplementary, "DS");
  if (!f) throw std::runtime_error("save_dataset: write failed for " + path);
}

DemoDataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path);

  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(f, line)) load_fail(1, "missing header");
  line_no = 1;

  DemoDataset d;
  try {
    const json header = json::parse(line);
    const int schema = header.at("schema").get<int>();
    if (schema != 1)
      load_fail(1, "unsupported schema " + std::to_string(schema));
    d.env = env_from_json(header.at("env").dump());
    for (const auto& [k, v] : header.at("provenance").items())
      d.provenance[k] = v.get<int>();
  } catch (const json::exception& e) {
    load_fail(1, std::string("header parse error: ") + e.what());
  }

  // Episodes are stored contiguously; a new (split, episode_id) before the
  // previous episode reached done means the file was torn.
  std::string cur_split;
  std::int64_t cur_id = -1;
  bool cur_done = true;
  Trajectory cur;
  auto flush = [&]() {
    if (cur.empty()) return;
    auto& split = cur_split == "DE" ? d.expert : d.supplementary;
    split.push_back(std::move(cur));
    cur.clear();
  };

  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      load_fail(line_no, std::string("parse error: ") + e.what());
    }
    try {
      Transition tr;
      const std::string split = j.at("split").get<std::string>();
      if (split != "DE" && split != "DS")
        load_fail(line_no, "unknown split '" + split + "'");
      tr.state = vec_from_json(j.at("state"));
      const json& act = j.at("action");
      if (act.is_number_integer())
        tr.action = Eigen::VectorXd::Constant(
            1, static_cast<double>(act.get<std::int64_t>()));
      else
        tr.action = vec_from_json(act);
      tr.reward = j.at("reward").get<double>();
      tr.done = j.at("done").get<bool>();
      tr.episode_id = j.at("episode_id").get<std::int64_t>();
      tr.source_id = j.at("source_id").get<std::string>();

      if (split != cur_split || tr.episode_id != cur_id) {
        if (!cur_done) load_fail(line_no, "torn episode (previous episode never finished)");
        flush();
        cur_split = split;
        cur_id = tr.episode_id;
        cur_done = false;
      } else if (cur_done) {
        load_fail(line_no, "transition after episode end");
      }
      cur_done = tr.done;
      cur.push_back(std::move(tr));
    } catch (const json::exception& e) {
      load_fail(line_no, std::string("bad transition: ") + e.what());
    }
  }
  if (!cur_done) load_fail(line_no, "truncated file (last episode never finished)");
  flush();

  // Episode ids must be unique within each split.
  for (const auto* split : {&d.expert, &d.supplementary}) {
    std::map<std::int64_t, int> seen;
    for (const auto& t : *split)
      if (++seen[t.front().episode_id] > 1)
        throw std::runtime_error("load_dataset: duplicate episode id " +
                                 std::to_string(t.front().episode_id) +
                                 " within a split");
  }
  return d;
}

bool dataset_bit_equal(const DemoDataset& a, const DemoDataset& b) {
  if (env_to_json(a.env) != env_to_json(b.env)) return false;
  if (a.provenance != b.provenance) return false;
  auto split_equal = [](const std::vector<Trajectory>& x,
                        const std::vector<Trajectory>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].size() != y[i].size()) return false;
      for (std::size_t k = 0; k < x[i].size(); ++k) {
        const Transition& p = x[i][k];
        const Transition& q = y[i][k];
        if (!vec_bits_equal(p.state, q.state)) return false;
        if (!vec_bits_equal(p.action, q.action)) return false;
        if (!bits_equal(p.reward, q.reward)) return false;
        if (p.done != q.done || p.episode_id != q.episode_id ||
            p.source_id != q.source_id)
          return false;
      }
    }
    return true;
  };
  return split_equal(a.expert, b.expert) &&
         split_equal(a.supplementary, b.supplementary);
}

DatasetStats dataset_stats(const DemoDataset& d) {
  DatasetStats st;
  const Eigen::Index sd = obs_dim(d.env);
  const Eigen::Index ad =
      is_discrete(d.env) ? 1 : action_dim(d.env);
  Eigen::VectorXd s_sum = Eigen::VectorXd::Zero(sd), s_sq = Eigen::VectorXd::Zero(sd);
  Eigen::VectorXd a_sum = Eigen::VectorXd::Zero(ad), a_sq = Eigen::VectorXd::Zero(ad);

  auto eat_split = [&](const std::vector<Trajectory>& split, const char* name) {
    for (const auto& traj : split) {
      const std::string key = std::string(name) + ":" + traj.front().source_id;
      SourceStats& ss = st.per_source[key];
      ss.n_traj += 1;
      double ret = 0.0;
      for (const auto& tr : traj) {
        ret += tr.reward;
        ss.n_transitions += 1;
        st.n_transitions += 1;
        s_sum += tr.state;
        s_sq += tr.state.cwiseProduct(tr.state);
        a_sum += tr.action;
        a_sq += tr.action.cwiseProduct(tr.action);
      }
      ss.mean_return += ret;  // divided by n_traj below
    }
  };
  eat_split(d.expert, "DE");
  eat_split(d.supplementary, "DS");
  for (auto& [k, ss] : st.per_source) ss.mean_return /= ss.n_traj;

  const double n = std::max(1, st.n_transitions);
  st.state_mean = s_sum / n;
  st.state_std =
      (s_sq / n - st.state_mean.cwiseProduct(st.state_mean)).cwiseMax(0.0).cwiseSqrt();
  st.action_mean = a_sum / n;
  st.action_std =
      (a_sq / n - st.action_mean.cwiseProduct(st.action_mean)).cwiseMax(0.0).cwiseSqrt();
  return st;
}

Standardizer make_standardizer(const Eigen::VectorXd& mean,
                               const Eigen::VectorXd& std_raw) {
  Standardizer s;
  s.mean = mean;
  s.std = std_raw.cwiseMax(1e-8);
  return s;
}

TrainView make_train_view(const DemoDataset& d) {
  TrainView v;
  for (const auto& traj : d.expert) {
    for (const auto& tr : traj) {
      TrainItem it;
      it.state = &tr.state;
      it.action = &tr.action;
      it.from_expert_source = tr.source_id == "expert";
      v.expert.push_back(it);
      v.all.push_back(it);
    }
  }
  int traj_idx = 0;
  for (const auto& traj : d.supplementary) {
    int step = 0;
    for (const auto& tr : traj) {
      TrainItem it;
      it.state = &tr.state;
      it.action = &tr.action;
      it.from_expert_source = tr.source_id == "expert";
      it.supplementary_index = static_cast<int>(v.sup_traj.size());
      v.all.push_back(it);
      v.sup_traj.push_back(traj_idx);
      v.sup_step.push_back(step++);
      v.sup_source.push_back(tr.source_id);
    }
    ++traj_idx;
  }
  return v;
}

void poison_rewards(DemoDataset& d) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (auto* split : {&d.expert, &d.supplementary})
    for (auto& traj : *split)
      for (auto& tr : traj) tr.reward = nan;
}

}  // namespace ilmar
