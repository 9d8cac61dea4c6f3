#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ilmar/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace ilmar;

namespace {

std::string tmp_path(const char* name) {
  return std::string("/tmp/ilmar_test_") + name;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(f, l)) lines.push_back(l);
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  for (const auto& l : lines) f << l << '\n';
}

DemoDataset tiny_grid_dataset() {
  GridWorldSpec g;
  EnvSpec env{g};
  MixtureSpec spec;
  spec.n_expert_in_DE = 1;
  spec.n_expert_in_DS = 4;
  spec.suboptimal_ratio = 1.0;
  spec.seed = 3;
  return build_mixture(spec, env);
}

}  // namespace

TEST_CASE("collect: zero episodes, exact optimal returns, determinism") {
  GridWorldSpec g;
  EnvSpec env{g};
  PolicyFn pi = tabular_policy_fn(g, value_iteration_greedy(to_tabular(g)));

  CHECK(collect(env, pi, 0, 1, "expert").empty());

  auto trajs = collect(env, pi, 1, 42, "expert", 7);
  REQUIRE(trajs.size() == 1);
  const Trajectory& t = trajs[0];
  CHECK(t.size() == 12);
  double ret = 0.0;
  for (const auto& tr : t) {
    ret += tr.reward;
    CHECK(tr.state.sum() == 1.0);  // one-hot
    CHECK(tr.episode_id == 7);
    CHECK(tr.source_id == "expert");
  }
  CHECK(ret == -12.0);
  CHECK(t.back().done);
  for (std::size_t i = 0; i + 1 < t.size(); ++i) CHECK_FALSE(t[i].done);

  auto again = collect(env, pi, 1, 42, "expert", 7);
  REQUIRE(again.size() == 1);
  REQUIRE(again[0].size() == t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(again[0][i].state == t[i].state);
    CHECK(again[0][i].action == t[i].action);
    CHECK(again[0][i].reward == t[i].reward);
  }
}

TEST_CASE("mixture counts: equal tiers with round-robin remainder") {
  GridWorldSpec g;
  EnvSpec env{g};

  MixtureSpec t2;
  t2.suboptimal_ratio = 1.0;
  t2.seed = 0;
  DemoDataset d2 = build_mixture(t2, env);
  CHECK(d2.provenance.at("DE:expert") == 1);
  CHECK(d2.provenance.at("DS:expert") == 40);
  for (int k = 1; k <= 4; ++k)
    CHECK(d2.provenance.at("DS:tier-" + std::to_string(k)) == 10);
  CHECK(d2.expert.size() == 1);
  CHECK(d2.supplementary.size() == 80);

  MixtureSpec t1;
  t1.suboptimal_ratio = 0.25;
  t1.seed = 1;
  DemoDataset d1 = build_mixture(t1, env);
  CHECK(d1.provenance.at("DS:tier-1") == 3);
  CHECK(d1.provenance.at("DS:tier-2") == 3);
  CHECK(d1.provenance.at("DS:tier-3") == 2);
  CHECK(d1.provenance.at("DS:tier-4") == 2);
  CHECK(d1.supplementary.size() == 50);

  MixtureSpec t0;
  t0.suboptimal_ratio = 0.0;
  t0.seed = 2;
  DemoDataset d0 = build_mixture(t0, env);
  CHECK(d0.supplementary.size() == 40);
  CHECK(d0.provenance.count("DS:tier-1") == 0);
  for (const auto& traj : d0.supplementary) CHECK(traj.front().source_id == "expert");

  // Episode ids unique within the supplementary split.
  std::vector<std::int64_t> ids;
  for (const auto& traj : d2.supplementary) ids.push_back(traj.front().episode_id);
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
}

TEST_CASE("json-lines round trip is bit-exact") {
  DemoDataset d = tiny_grid_dataset();
  const std::string path = tmp_path("roundtrip.jsonl");
  save_dataset(d, path);
  DemoDataset back = load_dataset(path);
  CHECK(dataset_bit_equal(d, back));

  // Empty dataset round-trips too.
  DemoDataset empty;
  empty.env = EnvSpec{GridWorldSpec{}};
  const std::string epath = tmp_path("empty.jsonl");
  save_dataset(empty, epath);
  CHECK(dataset_bit_equal(empty, load_dataset(epath)));
}

TEST_CASE("continuous actions and awkward doubles survive the file format") {
  LinPointMassSpec p = LinPointMassSpec::make_default();
  EnvSpec env{p};
  DemoDataset d;
  d.env = env;
  d.expert = collect(env, lqr_policy_fn(p), 2, 9, "expert");
  d.provenance["DE:expert"] = 2;
  // Inject values that sloppy serialization would mangle.
  d.expert[0][0].reward = -0.0;
  d.expert[0][1].action(0) = 5e-312;  // subnormal
  d.expert[0][2].state(1) = 1e300;
  d.expert[1][0].action(1) = -1.0 / 3.0;
  const std::string path = tmp_path("pm.jsonl");
  save_dataset(d, path);
  CHECK(dataset_bit_equal(d, load_dataset(path)));
}

TEST_CASE("load errors cite the offending line") {
  DemoDataset d = tiny_grid_dataset();
  const std::string path = tmp_path("corrupt.jsonl");
  save_dataset(d, path);
  auto lines = read_lines(path);
  REQUIRE(lines.size() > 20);

  SUBCASE("garbage json") {
    lines[2] = "{not json";
    write_lines(path, lines);
    try {
      load_dataset(path);
      FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SUBCASE("schema mismatch") {
    lines[0] = R"({"schema":99,"env":{},"provenance":{}})";
    write_lines(path, lines);
    try {
      load_dataset(path);
      FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("line 1") != std::string::npos);
      CHECK(std::string(e.what()).find("schema") != std::string::npos);
    }
  }
  SUBCASE("truncated tail") {
    lines.pop_back();
    write_lines(path, lines);
    CHECK_THROWS_WITH_AS(load_dataset(path),
                         doctest::Contains("truncated"), std::runtime_error);
  }
}

TEST_CASE("stats: exact single-trajectory return and tier monotonicity") {
  GridWorldSpec g;
  EnvSpec env{g};
  MixtureSpec spec;
  spec.suboptimal_ratio = 4.0;  // 160 suboptimal, 40 per tier
  spec.seed = 2;
  DemoDataset d = build_mixture(spec, env);
  DatasetStats st = dataset_stats(d);

  CHECK(st.per_source.at("DE:expert").mean_return == -12.0);
  CHECK(st.per_source.at("DE:expert").n_traj == 1);
  CHECK(st.per_source.at("DS:expert").mean_return == -12.0);

  double prev = st.per_source.at("DS:expert").mean_return;
  for (int k = 1; k <= 4; ++k) {
    const double m = st.per_source.at("DS:tier-" + std::to_string(k)).mean_return;
    CHECK(m <= prev + 1e-12);
    prev = m;
  }

  // Standardizing with the fitted moments recentres the visited dims.
  Standardizer z = make_standardizer(st.state_mean, st.state_std);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(st.state_mean.size());
  int n = 0;
  for (const auto* split : {&d.expert, &d.supplementary})
    for (const auto& traj : *split)
      for (const auto& tr : traj) {
        acc += z.apply(tr.state);
        ++n;
      }
  acc /= n;
  CHECK(acc.cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("train view carries no rewards and labels sources") {
  DemoDataset d = tiny_grid_dataset();
  int n_de = 0, n_ds = 0;
  for (const auto& t : d.expert) n_de += static_cast<int>(t.size());
  for (const auto& t : d.supplementary) n_ds += static_cast<int>(t.size());

  TrainView v = make_train_view(d);
  CHECK(int(v.expert.size()) == n_de);
  CHECK(int(v.all.size()) == n_de + n_ds);
  CHECK(int(v.sup_traj.size()) == n_ds);
  CHECK(int(v.sup_source.size()) == n_ds);

  for (const auto& it : v.expert) {
    CHECK(it.from_expert_source);
    CHECK(it.supplementary_index == -1);
  }
  bool saw_tier = false, saw_expert_in_ds = false;
  for (std::size_t i = v.expert.size(); i < v.all.size(); ++i) {
    const auto& it = v.all[i];
    CHECK(it.supplementary_index == int(i - v.expert.size()));
    if (it.from_expert_source) saw_expert_in_ds = true;
    if (!it.from_expert_source) saw_tier = true;
  }
  CHECK(saw_tier);
  CHECK(saw_expert_in_ds);

  // Poisoning rewards leaves everything the view exposes untouched.
  const Eigen::VectorXd s0 = *v.all[0].state;
  poison_rewards(d);
  for (const auto& traj : d.expert)
    for (const auto& tr : traj) CHECK(std::isnan(tr.reward));
  CHECK(*v.all[0].state == s0);
}

TEST_CASE("environment specs round trip through json") {
  GridWorldSpec g;
  g.slip_prob = 0.2;
  g.gamma = 0.97;
  const std::string jg = env_to_json(EnvSpec{g});
  CHECK(env_to_json(env_from_json(jg)) == jg);

  LinPointMassSpec p = LinPointMassSpec::make_default();
  p.action_bound = 1.5;
  const std::string jp = env_to_json(EnvSpec{p});
  CHECK(env_to_json(env_from_json(jp)) == jp);
  CHECK(is_discrete(env_from_json(jg)));
  CHECK_FALSE(is_discrete(env_from_json(jp)));
}
