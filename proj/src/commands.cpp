#include "ilmar/commands.hpp"

#include "ilmar/eval.hpp"
#include "ilmar/runconfig.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace ilmar {

namespace fs = std::filesystem;

namespace {

// Exit-code policy: invalid_argument marks usage/config problems (1),
// everything else that throws is treated as a numerical/runtime failure (2).
template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
}

RunConfig load_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_config_file(path);
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// The evaluation stream is fixed per run so periodic evaluations, resumes
// and re-runs all see identical episodes.
constexpr std::uint64_t kEvalStream = 0xE7A1;

EvalFn make_eval_fn(const EnvSpec& env, const TrainConfig& tc,
                    const DemoDataset& data) {
  const ScoreRefs refs = score_refs(env);
  std::optional<Standardizer> stdzr;
  if (tc.standardize_inputs) {
    const DatasetStats st = dataset_stats(data);
    stdzr = make_standardizer(st.state_mean, st.state_std);
  }
  const int episodes = tc.eval_episodes;
  const std::uint64_t seed = mix_seed(tc.seed, kEvalStream);
  return [env, refs, stdzr, episodes, seed](const PolicyModel& p) {
    const EvalResult er = evaluate_policy(p, env, episodes, seed,
                                          stdzr ? &*stdzr : nullptr);
    return normalized_score(er.mean, refs.random_ref, refs.expert_ref);
  };
}

// Mirrors the model-shape setup inside train() so checkpoints reload into
// identical layouts.
PolicyModel policy_from_run(const TrainConfig& tc, const EnvSpec& env,
                            const std::string& run_dir) {
  PolicyModelSpec ps;
  ps.obs_dim = obs_dim(env);
  ps.action_dim = action_dim(env);
  ps.discrete = is_discrete(env);
  ps.hidden = tc.policy_hidden;
  ps.activation = tc.activation;
  PolicyModel pol = PolicyModel::init(ps, mix_seed(tc.seed, 0xA0));
  load_params_into(pol.params, run_dir + "/ckpt_policy.jsonl");
  return pol;
}

RankerModel ranker_from_run(const TrainConfig& tc, const EnvSpec& env,
                            const std::string& run_dir) {
  RankerModelSpec rs;
  rs.obs_dim = obs_dim(env);
  rs.action_dim = action_dim(env);
  rs.state_hidden = tc.ranker_state_hidden;
  rs.action_hidden = tc.ranker_action_hidden;
  rs.head_hidden = tc.ranker_head_hidden;
  rs.activation = tc.activation;
  rs.clip_eps = tc.clip_eps;
  RankerModel rk = RankerModel::init(rs, mix_seed(tc.seed, 0xB0));
  load_params_into(rk.params, run_dir + "/ckpt_ranker.jsonl");
  return rk;
}

DemoDataset load_dataset_checked(const std::string& path) {
  if (path.empty())
    throw std::invalid_argument(
        "no dataset given: pass --data or set data.path in the config");
  if (!fs::exists(path))
    throw std::invalid_argument("dataset file not found: " + path);
  return load_dataset(path);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

struct DiagRow {
  int iter = 0;
  double inner = 0.0, g2sq = 0.0;
  std::optional<double> implied_K;
  double before = 0.0, after = 0.0;
};

std::vector<DiagRow> read_diag_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(f, line);  // header
  std::vector<DiagRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string c;
    std::vector<std::string> cells;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    cells.resize(6);
    DiagRow r;
    r.iter = std::stoi(cells[0]);
    r.inner = std::stod(cells[1]);
    r.g2sq = std::stod(cells[2]);
    if (!cells[3].empty()) r.implied_K = std::stod(cells[3]);
    r.before = std::stod(cells[4]);
    r.after = std::stod(cells[5]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

// ---- gen-data --------------------------------------------------------------------

int cmd_gen_data(const CommonOpts& o) {
  return guarded([&]() -> int {
    RunConfig rc = load_or_default(o.config_path);
    const std::string task = rc.get_str("env.task", "grid");
    const EnvSpec env = env_from_task(task);
    MixtureSpec ms = mixture_from(rc);
    if (!o.seeds.empty()) ms.seed = static_cast<unsigned>(o.seeds.front());

    const fs::path dir = fs::path(o.out) / task;
    const fs::path file = dir / "dataset.jsonl";
    if (fs::exists(file) && !o.force)
      throw std::invalid_argument(file.string() +
                                  " exists; pass --force to replace it");
    fs::create_directories(dir);

    const DemoDataset d = build_mixture(ms, env);
    save_dataset(d, file.string());

    RunConfig echo;
    echo.set("env.task", task);
    mixture_into(echo, ms);
    echo.set("data.path", file.string());
    write_text(dir / "gen-config.ini", serialize_config(echo));

    const DatasetStats st = dataset_stats(d);
    std::cout << "wrote " << file.string() << " (" << st.n_transitions
              << " transitions)\n";
    for (const auto& [src, s] : st.per_source)
      std::cout << "  " << src << ": " << s.n_traj << " episodes, mean return "
                << fmt_g(s.mean_return) << '\n';
    return 0;
  });
}

// ---- train -----------------------------------------------------------------------

namespace {

struct RunOutcome {
  std::string dir;
  bool aborted = false;
  std::optional<double> final_score;
};

// One training run into <out>/<mode>/<task>/<seed>; echoes the resolved
// config first so even aborted runs can be reproduced.
RunOutcome run_one(const RunConfig& base, TrainConfig tc,
                   const DemoDataset& data, const std::string& data_file,
                   const fs::path& run_dir, bool force) {
  if (fs::exists(run_dir) && !tc.resume) {
    if (!force)
      throw std::invalid_argument(
          run_dir.string() +
          " exists; pass --force to replace it or set train.resume = true");
    fs::remove_all(run_dir);
  }
  fs::create_directories(run_dir);

  RunConfig echo = base;
  train_config_into(echo, tc);
  echo.set("data.path", data_file);
  echo.set("env.task", task_name(data.env));
  write_text(run_dir / "config.ini", serialize_config(echo));

  const TrainResult res =
      train(tc, data, data.env, run_dir.string(), make_eval_fn(data.env, tc, data));

  RunOutcome out;
  out.dir = run_dir.string();
  out.aborted = res.aborted;
  for (auto it = res.rows.rbegin(); it != res.rows.rend(); ++it)
    if (it->eval_score) {
      out.final_score = *it->eval_score;
      break;
    }
  if (res.aborted)
    std::cerr << "aborted: " << run_dir.string() << ": " << res.abort_reason
              << '\n';
  return out;
}

}  // namespace

int cmd_train(const CommonOpts& o) {
  return guarded([&]() -> int {
    RunConfig rc = load_or_default(o.config_path);
    const std::string data_file =
        !o.data_path.empty() ? o.data_path : rc.get_str("data.path", "");
    const DemoDataset data = load_dataset_checked(data_file);
    const std::string task = task_name(data.env);

    const TrainConfig base = train_config_from(rc);
    std::vector<std::uint64_t> seeds =
        o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;

    int code = 0;
    for (const std::uint64_t seed : seeds) {
      TrainConfig tc = base;
      tc.seed = seed;
      const fs::path run_dir = fs::path(o.out) / to_string(tc.mode) / task /
                               std::to_string(seed);
      const RunOutcome r = run_one(rc, tc, data, data_file, run_dir, o.force);
      if (r.aborted) code = 2;
      std::cout << to_string(tc.mode) << '/' << task << '/' << seed
                << (r.aborted ? " aborted" : " done");
      if (r.final_score)
        std::cout << ", final score " << fmt_g(*r.final_score);
      std::cout << " -> " << r.dir << '\n';
    }
    return code;
  });
}

// ---- sweep -----------------------------------------------------------------------

int cmd_sweep(const CommonOpts& o) {
  return guarded([&]() -> int {
    RunConfig rc = load_or_default(o.config_path);
    const std::string data_file =
        !o.data_path.empty() ? o.data_path : rc.get_str("data.path", "");
    const DemoDataset data = load_dataset_checked(data_file);
    const std::string task = task_name(data.env);

    const std::vector<double> alphas =
        rc.get_double_list("sweep.alphas", {0.0, 0.1, 0.3, 0.7, 1.0});
    const std::vector<double> betas =
        rc.get_double_list("sweep.betas", {0.0, 0.01, 0.05, 0.5, 1.0});

    const TrainConfig base = train_config_from(rc);
    std::vector<std::uint64_t> seeds =
        o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;

    std::string summary = "alpha,beta,seed,final_score,aborted\n";
    int code = 0;
    for (const double a : alphas) {
      for (const double b : betas) {
        if (a == 0.0 && b == 0.0) continue;  // no objective left
        for (const std::uint64_t seed : seeds) {
          TrainConfig tc = base;
          tc.mode = TrainMode::ilmar;
          tc.alpha = a;
          tc.beta = b;
          tc.seed = seed;
          const fs::path run_dir = fs::path(o.out) / "sweep" / task /
                                   ("a" + fmt_g(a) + "_b" + fmt_g(b)) /
                                   std::to_string(seed);
          const RunOutcome r =
              run_one(rc, tc, data, data_file, run_dir, o.force);
          if (r.aborted) code = 2;
          summary += fmt_g(a) + "," + fmt_g(b) + "," + std::to_string(seed) +
                     "," +
                     (r.final_score ? fmt_g(*r.final_score) : std::string()) +
                     "," + (r.aborted ? "1" : "0") + "\n";
          std::cout << "sweep a=" << fmt_g(a) << " b=" << fmt_g(b) << " seed "
                    << seed << (r.aborted ? " aborted" : " done") << '\n';
        }
      }
    }
    const fs::path sum_path = fs::path(o.out) / "sweep" / task / "summary.csv";
    fs::create_directories(sum_path.parent_path());
    write_text(sum_path, summary);
    std::cout << "sweep summary -> " << sum_path.string() << '\n';
    return code;
  });
}

// ---- evaluate --------------------------------------------------------------------

int cmd_evaluate(const std::string& run_dir, const std::string& data_path,
                 int episodes) {
  return guarded([&]() -> int {
    const fs::path cfg = fs::path(run_dir) / "config.ini";
    if (!fs::exists(cfg))
      throw std::invalid_argument("no config.ini in " + run_dir +
                                  " (not a run directory?)");
    const RunConfig rc = load_config_file(cfg.string());
    const TrainConfig tc = train_config_from(rc);

    EnvSpec env = env_from_task(rc.get_str("env.task", "grid"));
    std::optional<Standardizer> stdzr;
    if (tc.standardize_inputs) {
      const std::string dfile =
          !data_path.empty() ? data_path : rc.get_str("data.path", "");
      const DemoDataset data = load_dataset_checked(dfile);
      env = data.env;
      const DatasetStats st = dataset_stats(data);
      stdzr = make_standardizer(st.state_mean, st.state_std);
    }

    const PolicyModel pol = policy_from_run(tc, env, run_dir);
    const int n = episodes > 0 ? episodes : tc.eval_episodes;
    const EvalResult er = evaluate_policy(pol, env, n,
                                          mix_seed(tc.seed, kEvalStream),
                                          stdzr ? &*stdzr : nullptr);
    const ScoreRefs refs = score_refs(env);
    const double ns = normalized_score(er.mean, refs.random_ref,
                                       refs.expert_ref);

    nlohmann::json j;
    j["mean_return"] = er.mean;
    j["stddev"] = er.stddev;
    j["episodes"] = er.episodes;
    j["normalized_score"] = ns;
    write_text(fs::path(run_dir) / "eval.json", j.dump(2) + "\n");
    std::cout << "return " << fmt_g(er.mean) << " +- " << fmt_g(er.stddev)
              << " over " << n << " episodes, normalized score " << fmt_g(ns)
              << '\n';
    return 0;
  });
}

// ---- analyze ---------------------------------------------------------------------

namespace {

struct RunRef {
  std::string mode, task;
  std::string dir;
  std::vector<ReportRow> rows;
};

std::vector<RunRef> discover_runs(const fs::path& root) {
  std::vector<RunRef> runs;
  if (!fs::exists(root)) return runs;
  for (const auto& mode_e : fs::directory_iterator(root)) {
    if (!mode_e.is_directory()) continue;
    const std::string mode = mode_e.path().filename().string();
    if (mode == "analysis" || mode == "sweep") continue;
    for (const auto& task_e : fs::directory_iterator(mode_e.path())) {
      if (!task_e.is_directory()) continue;
      for (const auto& seed_e : fs::directory_iterator(task_e.path())) {
        const fs::path rep = seed_e.path() / "report.csv";
        if (!fs::exists(rep)) continue;
        RunRef r;
        r.mode = mode;
        r.task = task_e.path().filename().string();
        r.dir = seed_e.path().string();
        r.rows = read_report_csv(rep.string());
        runs.push_back(std::move(r));
      }
    }
  }
  std::sort(runs.begin(), runs.end(), [](const RunRef& a, const RunRef& b) {
    return std::tie(a.mode, a.task, a.dir) < std::tie(b.mode, b.task, b.dir);
  });
  return runs;
}

}  // namespace

int cmd_analyze(const std::string& runs_root, const std::string& data_path) {
  return guarded([&]() -> int {
    const fs::path root(runs_root);
    const std::vector<RunRef> runs = discover_runs(root);
    if (runs.empty())
      throw std::invalid_argument("no finished runs under " + runs_root);

    std::optional<DemoDataset> data;
    if (!data_path.empty()) data = load_dataset_checked(data_path);

    const fs::path adir = root / "analysis";
    fs::create_directories(adir);

    std::map<std::pair<std::string, std::string>, std::vector<const RunRef*>>
        groups;
    for (const RunRef& r : runs) groups[{r.mode, r.task}].push_back(&r);

    nlohmann::json summary = nlohmann::json::array();
    for (const auto& [key, members] : groups) {
      const auto& [mode, task] = key;
      std::vector<std::vector<ReportRow>> rows;
      for (const RunRef* r : members) rows.push_back(r->rows);
      const auto curve = aggregate_eval_curves(rows);
      const fs::path curve_path = adir / (mode + "_" + task + "_curve.csv");
      write_curve_csv(curve, curve_path.string());

      nlohmann::json g;
      g["mode"] = mode;
      g["task"] = task;
      g["n_runs"] = members.size();

      std::vector<double> finals;
      for (const RunRef* r : members)
        for (auto it = r->rows.rbegin(); it != r->rows.rend(); ++it)
          if (it->eval_score) {
            finals.push_back(*it->eval_score);
            break;
          }
      if (!finals.empty()) {
        double mean = 0.0;
        for (const double v : finals) mean += v;
        mean /= static_cast<double>(finals.size());
        double sd = 0.0;
        if (finals.size() > 1) {
          for (const double v : finals) sd += (v - mean) * (v - mean);
          sd = std::sqrt(sd / (static_cast<double>(finals.size()) - 1.0));
        }
        g["final_scores"] = finals;
        g["final_mean"] = mean;
        g["final_std"] = sd;
      }

      // Alignment diagnostics, when the runs recorded them.
      std::vector<double> ks;
      int n_steps = 0, n_noninc = 0;
      for (const RunRef* r : members) {
        const fs::path dpath = fs::path(r->dir) / "diag.csv";
        if (!fs::exists(dpath)) continue;
        for (const DiagRow& d : read_diag_csv(dpath.string())) {
          if (d.implied_K) ks.push_back(*d.implied_K);
          ++n_steps;
          if (d.after <= d.before + 1e-12) ++n_noninc;
        }
      }
      if (n_steps > 0) {
        nlohmann::json dk;
        if (!ks.empty()) {
          double kmean = 0.0;
          for (const double k : ks) kmean += k;
          dk["mean"] = kmean / static_cast<double>(ks.size());
          dk["min"] = *std::min_element(ks.begin(), ks.end());
          dk["max"] = *std::max_element(ks.begin(), ks.end());
          dk["n"] = ks.size();
        }
        g["implied_K"] = dk;
        g["nonincreasing_frac"] =
            static_cast<double>(n_noninc) / static_cast<double>(n_steps);
      }

      // Ranker-weight quality against the exact advantage oracle.
      if (data && std::holds_alternative<GridWorldSpec>(data->env)) {
        std::vector<double> rhos;
        for (const RunRef* r : members) {
          if (!fs::exists(fs::path(r->dir) / "ckpt_ranker.jsonl")) continue;
          const RunConfig rcfg =
              load_config_file((fs::path(r->dir) / "config.ini").string());
          const TrainConfig tc = train_config_from(rcfg);
          const PolicyModel pol = policy_from_run(tc, data->env, r->dir);
          const RankerModel rk = ranker_from_run(tc, data->env, r->dir);
          WeightQualityResult wq;
          try {
            wq = weight_quality(rk, pol, *data);
          } catch (const std::exception& e) {
            // a collapsed ranker (all weights zero) has no rank statistic;
            // skip the run rather than abort the whole analysis
            std::cerr << "warning: " << r->dir << ": " << e.what() << '\n';
            continue;
          }
          write_correlation_json(r->dir + "/correlation.json",
                                 wq.rho_transition,
                                 static_cast<int>(wq.weights.size()),
                                 "per-transition");
          write_correlation_json(r->dir + "/correlation_traj.json",
                                 wq.rho_trajectory,
                                 static_cast<int>(wq.traj_return.size()),
                                 "per-trajectory");
          rhos.push_back(wq.rho_transition);
        }
        if (!rhos.empty()) {
          double rmean = 0.0;
          for (const double v : rhos) rmean += v;
          g["weight_rho"] = {{"per_run", rhos},
                             {"mean", rmean / static_cast<double>(rhos.size())}};
        }
      }

      summary.push_back(g);
      std::cout << mode << '/' << task << ": " << members.size() << " runs";
      if (g.contains("final_mean"))
        std::cout << ", final " << fmt_g(g["final_mean"].get<double>())
                  << " +- " << fmt_g(g["final_std"].get<double>());
      std::cout << '\n';
    }

    write_text(adir / "summary.json", summary.dump(2) + "\n");
    std::cout << "analysis -> " << adir.string() << '\n';
    return 0;
  });
}

// ---- gradcheck -------------------------------------------------------------------

int cmd_gradcheck(int trials, std::uint64_t seed) {
  return guarded([&]() -> int {
    if (trials <= 0) throw std::invalid_argument("trials must be positive");
    const int obs = 2, na = 3;
    const double mu = 0.01;
    bool all_pass = true;

    auto make_data = [&](std::mt19937_64& rng, Eigen::Index n) {
      std::normal_distribution<double> nrm(0.0, 1.0);
      std::uniform_int_distribution<int> pick(0, na - 1);
      Eigen::MatrixXd S(n, obs);
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, na);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < obs; ++j) S(i, j) = nrm(rng);
        A(i, pick(rng)) = 1.0;
      }
      return std::make_pair(S, A);
    };

    PolicyModel last_pol;
    RankerModel last_rk;
    Eigen::MatrixXd lSE, lAE, lSD, lAD;

    for (int trial = 0; trial < trials; ++trial) {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(trial), 0x6C));
      const auto [SE, AE] = make_data(rng, 6);
      const auto [SD, AD] = make_data(rng, 8);

      // Resample networks until every ranker output clears the strict-mask
      // boundary; differentiating across a mask flip is meaningless.
      MetaGradCheck mgc;
      bool found = false;
      for (int attempt = 0; attempt < 200 && !found; ++attempt) {
        PolicyModelSpec psp;
        psp.obs_dim = obs;
        psp.action_dim = na;
        psp.hidden = {4};
        PolicyModel pol = PolicyModel::init(psp, rng());
        RankerModelSpec rsp;
        rsp.obs_dim = obs;
        rsp.action_dim = na;
        rsp.state_hidden = {4};
        rsp.action_hidden = {4};
        rsp.head_hidden = {4};
        RankerModel rk = RankerModel::init(rsp, rng());
        mgc = meta_gradient_threeway(pol, rk, SE, AE, SD, AD, mu);
        if (mgc.boundary_margin > 1e-3) {
          found = true;
          last_pol = pol;
          last_rk = rk;
          lSE = SE;
          lAE = AE;
          lSD = SD;
          lAD = AD;
        }
      }
      if (!found)
        throw std::runtime_error("gradcheck: no boundary-safe trial found");
      const bool ok = mgc.err_ab <= 1e-6 && mgc.err_afd <= 1e-4;
      all_pass = all_pass && ok;
      std::printf(
          "trial %2d: traced-vs-chain %.3e, traced-vs-fd %.3e, margin %.3e %s\n",
          trial, mgc.err_ab, mgc.err_afd, mgc.boundary_margin,
          ok ? "ok" : "FAIL");
    }

    // Mutation check: recompose the chain rule with the wrong sign; the
    // comparison must reject it loudly, or the suite proves nothing.
    {
      Eigen::MatrixXd p_vals(lSD.rows(), na);
      for (Eigen::Index i = 0; i < lSD.rows(); ++i)
        p_vals.row(i) =
            policy_action_for_ranker(last_pol, lSD.row(i).transpose(),
                                     RankerInputMode::expectation, 0)
                .transpose();
      ScalarFn pipeline = [&](ad::Tape& t, const ParamNodes& psi) {
        ParamNodes th = param_leaves(t, last_pol.params);
        const ActorLossBuild ab =
            build_actor_loss(t, last_pol, th, last_rk, psi, lSD, lAD, p_vals);
        const auto g = t.backward(ab.loss, th.refs());
        const ParamNodes th2 = sgd_step_traced(t, th, g, mu);
        return ad::neg(
            t, ad::mean_all(t, policy_log_prob_node(t, last_pol, th2,
                                                    t.leaf(lSE), lAE)));
      };
      const ParamVector g_a = grad(pipeline, last_rk.params);

      ScalarFn2 actor2 = [&](ad::Tape& t, const ParamNodes& th,
                             const ParamNodes& psi) {
        return build_actor_loss(t, last_pol, th, last_rk, psi, lSD, lAD,
                                p_vals)
            .loss;
      };
      ScalarFn actor_theta = [&](ad::Tape& t, const ParamNodes& th) {
        ParamNodes psi = param_leaves(t, last_rk.params);
        return build_actor_loss(t, last_pol, th, last_rk, psi, lSD, lAD,
                                p_vals)
            .loss;
      };
      const ParamVector gth = grad(actor_theta, last_pol.params);
      const ParamVector th2 = pv_add_scaled(last_pol.params, gth, -mu);
      ScalarFn meta_fn = [&](ad::Tape& t, const ParamNodes& th) {
        return ad::neg(
            t, ad::mean_all(t, policy_log_prob_node(t, last_pol, th,
                                                    t.leaf(lSE), lAE)));
      };
      const ParamVector v = grad(meta_fn, th2);
      const ParamVector wrong = pv_scale(
          mixed_second_vjp(actor2, last_pol.params, last_rk.params, v), +mu);
      const double err = rel_error(g_a, wrong);
      const bool caught = err > 1e-3;
      all_pass = all_pass && caught;
      std::printf("mutation: sign-flipped chain rule rel err %.3e %s\n", err,
                  caught ? "(rejected, as it must be)" : "NOT CAUGHT");
    }

    std::printf("gradcheck: %s\n", all_pass ? "all checks passed" : "FAILED");
    return all_pass ? 0 : 2;
  });
}

}  // namespace ilmar
