#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ilmar/grad.hpp"
#include "ilmar/models.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace ilmar;

namespace {

void zero_all(ParamVector& p) {
  for (auto& [name, m] : p.segs) m.setZero();
}

PolicyModelSpec tiny_discrete() {
  PolicyModelSpec s;
  s.obs_dim = 3;
  s.action_dim = 3;
  s.discrete = true;
  s.hidden = {4};
  return s;
}

PolicyModelSpec tiny_gaussian() {
  PolicyModelSpec s;
  s.obs_dim = 3;
  s.action_dim = 2;
  s.discrete = false;
  s.hidden = {4};
  return s;
}

RankerModelSpec tiny_ranker() {
  RankerModelSpec s;
  s.obs_dim = 3;
  s.action_dim = 3;
  s.state_hidden = {4};
  s.action_hidden = {3};
  s.head_hidden = {4};
  return s;
}

Eigen::MatrixXd randn(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

}  // namespace

TEST_CASE("categorical log-prob: uniform net gives log(1/4)") {
  PolicyModelSpec s = tiny_discrete();
  s.action_dim = 4;
  PolicyModel m = PolicyModel::init(s, 1);
  zero_all(m.params);
  const Eigen::VectorXd st = Eigen::VectorXd::Ones(3);
  for (int a = 0; a < 4; ++a) {
    const double lp = policy_log_prob(m, st, Eigen::VectorXd::Constant(1, double(a)));
    CHECK(lp == doctest::Approx(std::log(0.25)).epsilon(1e-12));
  }
}

TEST_CASE("gaussian log-prob at the mean with unit sigma") {
  PolicyModel m = PolicyModel::init(tiny_gaussian(), 1);
  zero_all(m.params);  // mean 0, logstd 0
  const Eigen::VectorXd st = Eigen::VectorXd::Ones(3);
  const double lp = policy_log_prob(m, st, Eigen::VectorXd::Zero(2));
  CHECK(lp == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
}

TEST_CASE("log-prob gradients match finite differences") {
  const Eigen::MatrixXd states = randn(5, 3, 10);

  PolicyModel disc = PolicyModel::init(tiny_discrete(), 2);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(5, 3);
  for (int i = 0; i < 5; ++i) onehot(i, i % 3) = 1.0;
  ScalarFn f_disc = [&](ad::Tape& t, const ParamNodes& pn) {
    return ad::mean_all(
        t, policy_log_prob_node(t, disc, pn, t.leaf(states), onehot));
  };
  CHECK(rel_error(grad(f_disc, disc.params),
                  finite_diff_grad(f_disc, disc.params)) <= 1e-6);

  PolicyModel cont = PolicyModel::init(tiny_gaussian(), 3);
  cont.params.at("pi.logstd") = 0.3 * Eigen::MatrixXd::Ones(1, 2);
  const Eigen::MatrixXd acts = randn(5, 2, 11);
  ScalarFn f_cont = [&](ad::Tape& t, const ParamNodes& pn) {
    return ad::mean_all(
        t, policy_log_prob_node(t, cont, pn, t.leaf(states), acts));
  };
  CHECK(rel_error(grad(f_cont, cont.params),
                  finite_diff_grad(f_cont, cont.params)) <= 1e-6);
}

TEST_CASE("ranker-facing policy actions") {
  PolicyModelSpec s = tiny_discrete();
  s.action_dim = 4;
  PolicyModel m = PolicyModel::init(s, 4);
  const Eigen::VectorXd st = Eigen::VectorXd::Ones(3);

  const Eigen::VectorXd e1 = policy_action_for_ranker(m, st, RankerInputMode::expectation, 1);
  const Eigen::VectorXd e2 = policy_action_for_ranker(m, st, RankerInputMode::expectation, 999);
  CHECK(e1 == e2);  // expectation ignores the seed
  CHECK(e1.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e1.minCoeff() > 0.0);

  const Eigen::VectorXd s1 = policy_action_for_ranker(m, st, RankerInputMode::sample, 7);
  const Eigen::VectorXd s2 = policy_action_for_ranker(m, st, RankerInputMode::sample, 7);
  CHECK(s1 == s2);
  CHECK(s1.sum() == 1.0);  // one-hot
  CHECK(s1.maxCoeff() == 1.0);

  // Near-deterministic categorical: logits {10, 0, 0, 0}.
  zero_all(m.params);
  m.params.at("pi.b1")(0, 0) = 10.0;
  const Eigen::VectorXd p = policy_action_for_ranker(m, st, RankerInputMode::expectation, 0);
  CHECK(p(0) > 0.9998);
  CHECK(policy_eval_action(m, st)(0) == 0.0);

  // Continuous: expectation is the mean; samples reproduce by seed.
  PolicyModel c = PolicyModel::init(tiny_gaussian(), 5);
  const Eigen::VectorXd mean = policy_action_for_ranker(c, st, RankerInputMode::expectation, 0);
  CHECK(mean == policy_eval_action(c, st));
  const Eigen::VectorXd cs1 = policy_action_for_ranker(c, st, RankerInputMode::sample, 3);
  CHECK(cs1 == policy_action_for_ranker(c, st, RankerInputMode::sample, 3));
  CHECK(cs1 != policy_action_for_ranker(c, st, RankerInputMode::sample, 4));
}

TEST_CASE("zero-initialized ranker head outputs exactly one half") {
  RankerModelSpec s = tiny_ranker();
  s.zero_init_head = true;
  RankerModel m = RankerModel::init(s, 6);
  const Eigen::VectorXd st = randn(1, 3, 1).row(0).transpose();
  const Eigen::VectorXd a1 = randn(1, 3, 2).row(0).transpose();
  const Eigen::VectorXd a2 = randn(1, 3, 3).row(0).transpose();
  CHECK(ranker_forward(m, st, a1, a2) == 0.5);

  // The boundary weight drops to zero under the strict indicator.
  PolicyModel pi = PolicyModel::init(tiny_discrete(), 7);
  WeightValue wv = weight(m, pi, st, Eigen::VectorXd::Constant(1, 1.0));
  CHECK(wv.c == 0.5);
  CHECK(wv.w == 0.0);
}

TEST_CASE("ranker output stays clipped for adversarially large inputs") {
  RankerModel m = RankerModel::init(tiny_ranker(), 8);
  const double eps = m.spec.clip_eps;
  const Eigen::VectorXd big = Eigen::VectorXd::Constant(3, 1e6);
  const Eigen::VectorXd neg = Eigen::VectorXd::Constant(3, -1e6);
  for (const auto& s : {big, neg})
    for (const auto& a1 : {big, neg})
      for (const auto& a2 : {big, neg}) {
        const double c = ranker_forward(m, s, a1, a2);
        CHECK(c >= eps);
        CHECK(c <= 1.0 - eps);
        CHECK(std::isfinite(c));
      }
}

TEST_CASE("batch ranker forward equals per-row forward, in any order") {
  RankerModel m = RankerModel::init(tiny_ranker(), 9);
  const Eigen::MatrixXd st = randn(4, 3, 20);
  const Eigen::MatrixXd a1 = randn(4, 3, 21);
  const Eigen::MatrixXd a2 = randn(4, 3, 22);

  ad::Tape t;
  ParamNodes pn = param_leaves(t, m.params);
  const Eigen::MatrixXd batch = t.val(ranker_forward_node(
      t, m, pn, t.leaf(st), t.leaf(a1), t.leaf(a2)));
  REQUIRE(batch.rows() == 4);
  for (int i = 0; i < 4; ++i) {
    const double single = ranker_forward(m, st.row(i).transpose(),
                                         a1.row(i).transpose(),
                                         a2.row(i).transpose());
    CHECK(batch(i, 0) == doctest::Approx(single).epsilon(1e-12));
  }

  // Swapping the operands feeds the same shared encoder in the other order.
  const double fwd = ranker_forward(m, st.row(0).transpose(),
                                    a1.row(0).transpose(), a2.row(0).transpose());
  const double rev = ranker_forward(m, st.row(0).transpose(),
                                    a2.row(0).transpose(), a1.row(0).transpose());
  CHECK(fwd != rev);  // order matters, but both are valid clipped outputs
  CHECK(std::isfinite(rev));
}

TEST_CASE("weight agrees with the indicator-times-c definition") {
  RankerModel m = RankerModel::init(tiny_ranker(), 10);
  PolicyModel pi = PolicyModel::init(tiny_discrete(), 11);
  std::mt19937_64 rng(12);
  int above = 0, below = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::VectorXd st = randn(1, 3, 100 + trial).row(0).transpose();
    const Eigen::VectorXd a = Eigen::VectorXd::Constant(1, double(trial % 3));
    const WeightValue wv = weight(m, pi, st, a);
    const double c = ranker_forward(
        m, st, to_onehot(a, 3),
        policy_action_for_ranker(pi, st, RankerInputMode::expectation, 0));
    CHECK(wv.c == c);
    CHECK(wv.w == (c > 0.5 ? c : 0.0));
    (c > 0.5 ? above : below) += 1;
  }
  CHECK(above + below == 40);
}

TEST_CASE("gradient penalty: constant ranker lands at one, fd agrees on a random net") {
  RankerModelSpec zs = tiny_ranker();
  zs.zero_init_head = true;
  RankerModel zero = RankerModel::init(zs, 13);
  const Eigen::MatrixXd st = randn(6, 3, 30);
  const Eigen::MatrixXd a1 = randn(6, 3, 31);
  const Eigen::MatrixXd a2 = randn(6, 3, 32);
  CHECK(std::abs(gradient_penalty(zero, st, a1, a2, 5) - 1.0) <= 1e-5);

  RankerModel m = RankerModel::init(tiny_ranker(), 14);
  const double pen = gradient_penalty(m, st.topRows(1), a1.topRows(1), a2.topRows(1), 5);
  CHECK(pen >= 0.0);

  // Reconstruct the interpolated pair exactly, then finite-difference the
  // input gradient of C and recompute the penalty by hand.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double ti = u(rng);
  Eigen::VectorXd h1 = (ti * a1.row(0) + (1 - ti) * a2.row(0)).transpose();
  Eigen::VectorXd h2 = (ti * a2.row(0) + (1 - ti) * a1.row(0)).transpose();
  const Eigen::VectorXd s0 = st.row(0).transpose();
  const double step = 1e-6;
  double sq = 0.0;
  for (Eigen::VectorXd* v : {&h1, &h2}) {
    for (int i = 0; i < 3; ++i) {
      const double keep = (*v)(i);
      (*v)(i) = keep + step;
      const double up = ranker_forward(m, s0, h1, h2);
      (*v)(i) = keep - step;
      const double dn = ranker_forward(m, s0, h1, h2);
      (*v)(i) = keep;
      const double g = (up - dn) / (2 * step);
      sq += g * g;
    }
  }
  const double pen_fd = std::pow(std::sqrt(sq + 1e-12) - 1.0, 2.0);
  CHECK(std::abs(pen - pen_fd) <= 1e-3 * std::max(1.0, std::abs(pen_fd)));
}

TEST_CASE("ranker and penalty gradients with respect to psi match finite differences") {
  RankerModel m = RankerModel::init(tiny_ranker(), 15);
  const Eigen::MatrixXd st = randn(3, 3, 40);
  const Eigen::MatrixXd a1 = randn(3, 3, 41);
  const Eigen::MatrixXd a2 = randn(3, 3, 42);

  ScalarFn f_c = [&](ad::Tape& t, const ParamNodes& pn) {
    return ad::mean_all(t, ranker_forward_node(t, m, pn, t.leaf(st),
                                               t.leaf(a1), t.leaf(a2)));
  };
  CHECK(rel_error(grad(f_c, m.params), finite_diff_grad(f_c, m.params)) <= 1e-6);

  // The penalty differentiates through an inner backward pass.
  ScalarFn f_gp = [&](ad::Tape& t, const ParamNodes& pn) {
    return gradient_penalty_node(t, m, pn, st, a1, a2, 77);
  };
  CHECK(rel_error(grad(f_gp, m.params), finite_diff_grad(f_gp, m.params)) <= 1e-5);
}

TEST_CASE("parameter checkpoints round trip and verify shapes") {
  RankerModel m = RankerModel::init(tiny_ranker(), 16);
  const std::string path = "/tmp/ilmar_test_params.jsonl";
  save_params(m.params, path);
  ParamVector back = load_params(path);
  REQUIRE(back.same_layout(m.params));
  CHECK((back.flatten() - m.params.flatten()).cwiseAbs().maxCoeff() == 0.0);

  load_params_into(m.params, path);  // same layout: fine

  PolicyModel other = PolicyModel::init(tiny_discrete(), 17);
  CHECK_THROWS_AS(load_params_into(other.params, path), std::runtime_error);
}
