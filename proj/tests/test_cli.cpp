#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ilmar/commands.hpp"
#include "ilmar/eval.hpp"
#include "ilmar/runconfig.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ilmar;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "ilmar_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  f << text;
  REQUIRE(f.good());
}

// Small-everything dataset + run settings shared by the command tests.
const char* kTinyGen = R"(
[env]
task = grid
[data]
n_expert_demo = 1
n_expert_supplementary = 4
suboptimal_ratio = 1.0
seed = 9
)";

std::string tiny_train_ini(const std::string& data_path) {
  return std::string(R"(
[train]
mode = ilmar
iterations = 8
eval_interval = 4
eval_episodes = 2
diag_interval = 4
checkpoint_interval = 4
n1 = 8
n2 = 8
mu = 1e-2
phi = 1e-2
optimizer = adam
policy_hidden = 8
ranker_state_hidden = 8
ranker_action_hidden = 4
ranker_head_hidden = 8
[data]
path = )") +
         data_path + "\n";
}

// Builds a tiny dataset on disk and returns its path.
std::string make_tiny_dataset(const fs::path& dir) {
  const fs::path cfg = dir / "gen.ini";
  spit(cfg, kTinyGen);
  CommonOpts o;
  o.config_path = cfg.string();
  o.out = (dir / "data").string();
  REQUIRE(cmd_gen_data(o) == 0);
  return (dir / "data" / "grid" / "dataset.jsonl").string();
}

}  // namespace

TEST_CASE("config parsing: sections, comments, line-cited errors") {
  const RunConfig c = parse_config(
      "# top comment\n"
      "global = 1\n"
      "[train]\n"
      "mu = 0.5   ; trailing comment\n"
      "mode = ilmar\n"
      "\n"
      "[data]\n"
      "path = /x/y.jsonl\n");
  CHECK(c.get_str("global", "") == "1");
  CHECK(c.get_double("train.mu", 0.0) == 0.5);
  CHECK(c.get_str("train.mode", "") == "ilmar");
  CHECK(c.get_str("data.path", "") == "/x/y.jsonl");
  CHECK(c.get_str("absent", "fallback") == "fallback");

  CHECK_THROWS_WITH_AS(parse_config("[train\nmu = 1\n"),
                       doctest::Contains("line 1"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[a]\nnot a pair\n"),
                       doctest::Contains("line 2"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[a]\n= 3\n"),
                       doctest::Contains("empty key"), std::invalid_argument);
  CHECK_THROWS_AS(load_config_file("/no/such/file.ini"),
                  std::invalid_argument);
}

TEST_CASE("config serialization groups sections and round-trips") {
  RunConfig c;
  c.set("train.mode", "bc");
  c.set_num("train.mu", 3e-4);
  c.set_num("train.iterations", 50000);
  c.set("data.path", "d.jsonl");
  c.set_num("data.seed", std::uint64_t{7});
  c.set("env.task", "grid");

  const std::string text = serialize_config(c);
  CHECK(text.find("[train]") != std::string::npos);
  CHECK(text.find("[data]") != std::string::npos);
  // each section header appears exactly once
  CHECK(text.find("[train]") == text.rfind("[train]"));

  const RunConfig back = parse_config(text);
  CHECK(back.kv == c.kv);
  // a second round trip is byte-stable
  CHECK(serialize_config(back) == text);
}

TEST_CASE("typed getters parse or fail loudly with the key name") {
  RunConfig c;
  c.set("k.d", "2.5");
  c.set("k.i", "42");
  c.set("k.u", "18446744073709551615");
  c.set("k.b", "true");
  c.set("k.il", "8, 16");
  c.set("k.dl", "0.1,0.3");
  c.set("k.junk", "2.5x");

  CHECK(c.get_double("k.d", 0) == 2.5);
  CHECK(c.get_int("k.i", 0) == 42);
  CHECK(c.get_u64("k.u", 0) == 18446744073709551615ull);
  CHECK(c.get_bool("k.b", false));
  CHECK(c.get_int_list("k.il", {}) == std::vector<int>{8, 16});
  CHECK(c.get_double_list("k.dl", {}) == std::vector<double>{0.1, 0.3});
  CHECK(c.get_int("missing", 5) == 5);

  CHECK_THROWS_WITH_AS(c.get_double("k.junk", 0), doctest::Contains("k.junk"),
                       std::invalid_argument);
  CHECK_THROWS_AS(c.get_int("k.d", 0), std::invalid_argument);
  CHECK_THROWS_AS(c.get_bool("k.i", false), std::invalid_argument);
}

TEST_CASE("train settings echo through the key-value layer unchanged") {
  TrainConfig tc;
  tc.mode = TrainMode::expert_wbc_meta;
  tc.mu = 1.25e-3;
  tc.phi = 7e-4;
  tc.alpha = 0.3;
  tc.beta = 0.05;
  tc.n1 = 17;
  tc.n2 = 33;
  tc.iterations = 123;
  tc.eval_interval = 11;
  tc.eval_episodes = 3;
  tc.diag_interval = 7;
  tc.checkpoint_interval = 9;
  tc.seed = 0xDEADBEEFull;
  tc.gp_coef = 0.25;
  tc.ranker_input = RankerInputMode::sample;
  tc.optimizer = "adam";
  tc.standardize_inputs = true;
  tc.policy_hidden = {8, 4};
  tc.ranker_state_hidden = {16};
  tc.ranker_action_hidden = {4, 4};
  tc.ranker_head_hidden = {8};
  tc.activation = "relu";
  tc.clip_eps = 1e-4;
  tc.resume = false;

  RunConfig rc;
  train_config_into(rc, tc);
  const TrainConfig back = train_config_from(rc);
  CHECK(back.mode == tc.mode);
  CHECK(back.mu == tc.mu);
  CHECK(back.phi == tc.phi);
  CHECK(back.alpha == tc.alpha);
  CHECK(back.beta == tc.beta);
  CHECK(back.n1 == tc.n1);
  CHECK(back.n2 == tc.n2);
  CHECK(back.iterations == tc.iterations);
  CHECK(back.eval_interval == tc.eval_interval);
  CHECK(back.eval_episodes == tc.eval_episodes);
  CHECK(back.diag_interval == tc.diag_interval);
  CHECK(back.checkpoint_interval == tc.checkpoint_interval);
  CHECK(back.seed == tc.seed);
  CHECK(back.gp_coef == tc.gp_coef);
  CHECK(back.ranker_input == tc.ranker_input);
  CHECK(back.optimizer == tc.optimizer);
  CHECK(back.standardize_inputs == tc.standardize_inputs);
  CHECK(back.policy_hidden == tc.policy_hidden);
  CHECK(back.ranker_state_hidden == tc.ranker_state_hidden);
  CHECK(back.ranker_action_hidden == tc.ranker_action_hidden);
  CHECK(back.ranker_head_hidden == tc.ranker_head_hidden);
  CHECK(back.activation == tc.activation);
  CHECK(back.clip_eps == tc.clip_eps);

  RunConfig bad;
  bad.set("train.ranker_input", "nonsense");
  CHECK_THROWS_AS(train_config_from(bad), std::invalid_argument);

  CHECK_THROWS_AS(env_from_task("jenga"), std::invalid_argument);
}

TEST_CASE("gen-data writes a loadable mixture and respects --force") {
  const fs::path dir = fresh_dir("gendata");
  const std::string data_path = make_tiny_dataset(dir);

  const DemoDataset d = load_dataset(data_path);
  CHECK(d.provenance.at("DE:expert") == 1);
  CHECK(d.provenance.at("DS:expert") == 4);
  CHECK(d.provenance.at("DS:tier-1") == 1);
  CHECK(d.provenance.at("DS:tier-4") == 1);
  CHECK(std::holds_alternative<GridWorldSpec>(d.env));
  CHECK(fs::exists(dir / "data" / "grid" / "gen-config.ini"));

  CommonOpts o;
  o.config_path = (dir / "gen.ini").string();
  o.out = (dir / "data").string();
  CHECK(cmd_gen_data(o) == 1);  // refuses to clobber
  o.force = true;
  CHECK(cmd_gen_data(o) == 0);

  // the echoed generator config reproduces the dataset byte for byte
  const std::string first = slurp(data_path);
  CommonOpts o2;
  o2.config_path = (dir / "data" / "grid" / "gen-config.ini").string();
  o2.out = (dir / "data2").string();
  CHECK(cmd_gen_data(o2) == 0);
  CHECK(slurp(dir / "data2" / "grid" / "dataset.jsonl") == first);
}

TEST_CASE("train lays out runs and the echoed config reproduces them") {
  const fs::path dir = fresh_dir("trainrun");
  const std::string data_path = make_tiny_dataset(dir);
  spit(dir / "train.ini", tiny_train_ini(data_path));

  CommonOpts o;
  o.config_path = (dir / "train.ini").string();
  o.out = (dir / "runs").string();
  o.seeds = {11};
  REQUIRE(cmd_train(o) == 0);

  const fs::path run = dir / "runs" / "ilmar" / "grid" / "11";
  for (const char* f : {"config.ini", "report.csv", "diag.csv",
                        "ckpt_policy.jsonl", "ckpt_ranker.jsonl",
                        "ckpt_meta.json"})
    CHECK(fs::exists(run / f));

  // refuses to clobber without --force
  CHECK(cmd_train(o) == 1);

  // rerun from the echo alone, into a fresh root: byte-identical outputs
  CommonOpts o2;
  o2.config_path = (run / "config.ini").string();
  o2.out = (dir / "rerun").string();
  REQUIRE(cmd_train(o2) == 0);
  const fs::path rerun = dir / "rerun" / "ilmar" / "grid" / "11";
  for (const char* f : {"report.csv", "diag.csv", "ckpt_policy.jsonl",
                        "ckpt_ranker.jsonl", "config.ini"})
    CHECK(slurp(rerun / f) == slurp(run / f));
}

TEST_CASE("evaluate reloads a run's checkpoint and writes eval.json") {
  const fs::path dir = fresh_dir("evalcmd");
  const std::string data_path = make_tiny_dataset(dir);
  spit(dir / "train.ini", tiny_train_ini(data_path));

  CommonOpts o;
  o.config_path = (dir / "train.ini").string();
  o.out = (dir / "runs").string();
  o.seeds = {4};
  REQUIRE(cmd_train(o) == 0);

  const fs::path run = dir / "runs" / "ilmar" / "grid" / "4";
  CHECK(cmd_evaluate(run.string(), "", 6) == 0);
  const auto j = nlohmann::json::parse(slurp(run / "eval.json"));
  CHECK(j["episodes"].get<int>() == 6);
  CHECK(std::isfinite(j["mean_return"].get<double>()));
  CHECK(std::isfinite(j["normalized_score"].get<double>()));

  CHECK(cmd_evaluate((dir / "nope").string(), "", 0) == 1);
}

TEST_CASE("analyze aggregates runs into curves, diagnostics and correlations") {
  const fs::path dir = fresh_dir("analyze");
  const std::string data_path = make_tiny_dataset(dir);
  spit(dir / "train.ini", tiny_train_ini(data_path));

  CommonOpts o;
  o.config_path = (dir / "train.ini").string();
  o.out = (dir / "runs").string();
  o.seeds = {1, 2};
  REQUIRE(cmd_train(o) == 0);

  REQUIRE(cmd_analyze((dir / "runs").string(), data_path) == 0);
  const fs::path adir = dir / "runs" / "analysis";
  CHECK(fs::exists(adir / "ilmar_grid_curve.csv"));

  const auto curve = std::ifstream(adir / "ilmar_grid_curve.csv").good();
  CHECK(curve);
  const auto summary = nlohmann::json::parse(slurp(adir / "summary.json"));
  REQUIRE(summary.is_array());
  REQUIRE(summary.size() == 1);
  CHECK(summary[0]["mode"] == "ilmar");
  CHECK(summary[0]["task"] == "grid");
  CHECK(summary[0]["n_runs"].get<int>() == 2);
  CHECK(summary[0].contains("final_mean"));
  CHECK(summary[0].contains("implied_K"));
  CHECK(summary[0].contains("weight_rho"));

  for (const char* seed : {"1", "2"}) {
    const auto cj = nlohmann::json::parse(
        slurp(dir / "runs" / "ilmar" / "grid" / seed / "correlation.json"));
    CHECK(cj["variant"] == "per-transition");
    CHECK(cj["n"].get<int>() > 0);
    CHECK(std::abs(cj["rho"].get<double>()) <= 1.0 + 1e-12);
  }

  CHECK(cmd_analyze((dir / "empty").string(), "") == 1);
}

TEST_CASE("sweep covers the grid, skips the empty objective, summarizes") {
  const fs::path dir = fresh_dir("sweepcmd");
  const std::string data_path = make_tiny_dataset(dir);
  spit(dir / "sweep.ini",
       tiny_train_ini(data_path) +
           "[sweep]\nalphas = 0, 1\nbetas = 0, 0.5\n");

  CommonOpts o;
  o.config_path = (dir / "sweep.ini").string();
  o.out = (dir / "out").string();
  o.seeds = {3};
  REQUIRE(cmd_sweep(o) == 0);

  const std::string sum = slurp(dir / "out" / "sweep" / "grid" / "summary.csv");
  std::vector<std::string> lines;
  std::stringstream ss(sum);
  for (std::string l; std::getline(ss, l);)
    if (!l.empty()) lines.push_back(l);
  REQUIRE(lines.size() == 4);  // header + 3 cells; (0,0) skipped
  CHECK(lines[0] == "alpha,beta,seed,final_score,aborted");
  CHECK(lines[1].rfind("0,0.5,3,", 0) == 0);
  CHECK(lines[2].rfind("1,0,3,", 0) == 0);
  CHECK(lines[3].rfind("1,0.5,3,", 0) == 0);
  CHECK(fs::exists(dir / "out" / "sweep" / "grid" / "a1_b0.5" / "3" /
                   "config.ini"));
}

TEST_CASE("exit codes: usage errors 1, numerical failures 2") {
  const fs::path dir = fresh_dir("exitcodes");

  CommonOpts missing;
  missing.data_path = (dir / "absent.jsonl").string();
  CHECK(cmd_train(missing) == 1);

  CommonOpts noopts;
  CHECK(cmd_train(noopts) == 1);  // no dataset anywhere

  // a divergent learning rate aborts the run and surfaces as exit 2
  const std::string data_path = make_tiny_dataset(dir);
  spit(dir / "diverge.ini",
       "[train]\nmode = bc\niterations = 4\nmu = 1e308\nn1 = 4\nn2 = 4\n"
       "policy_hidden = 8\neval_interval = 0\n[data]\npath = " +
           data_path + "\n");
  CommonOpts div;
  div.config_path = (dir / "diverge.ini").string();
  div.out = (dir / "runs").string();
  CHECK(cmd_train(div) == 2);

  CHECK(cmd_gradcheck(0, 0) == 1);
  CHECK(cmd_gradcheck(2, 5) == 0);
}
