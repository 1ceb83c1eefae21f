#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "u2o/env.hpp"
#include "u2o/offline_rl.hpp"
#include "u2o/rng.hpp"

using namespace u2o;
using offline_rl::Agent;
using offline_rl::Batch;
using offline_rl::TrainConfig;

namespace {

bool params_equal(const nn::Params& a, const nn::Params& b) {
  if (a.w.size() != b.w.size()) return false;
  for (std::size_t l = 0; l < a.w.size(); ++l)
    if (a.w[l] != b.w[l] || a.b[l] != b.b[l]) return false;
  return true;
}

bool agents_equal(const Agent& a, const Agent& b) {
  if (!params_equal(a.policy.p, b.policy.p)) return false;
  if (!params_equal(a.critics.q1, b.critics.q1)) return false;
  if (!params_equal(a.critics.q2, b.critics.q2)) return false;
  if (!params_equal(a.critics.t1, b.critics.t1)) return false;
  if (!params_equal(a.critics.t2, b.critics.t2)) return false;
  if (a.value.has_value() != b.value.has_value()) return false;
  if (a.value && !params_equal(a.value->p, b.value->p)) return false;
  if (a.policy.target.has_value() != b.policy.target.has_value()) return false;
  if (a.policy.target && !params_equal(*a.policy.target, *b.policy.target)) return false;
  return true;
}

// Forces a net to output the constant c for every input.
void set_const_output(nn::Params& p, double c) {
  p.w.back().setZero();
  p.b.back().setConstant(c);
}

env::ActionSpec grid_aspec() {
  return env::make_gridworld(5).action_spec();
}

env::ActionSpec pm_aspec() {
  return env::make_pointmass().action_spec();
}

Batch tiny_discrete_batch(int B, std::uint64_t seed, int state_dim = 2, int count = 5) {
  rng::Stream st(seed);
  Batch batch;
  batch.s.resize(state_dim, B);
  batch.s2.resize(state_dim, B);
  batch.ad.resize(static_cast<std::size_t>(B));
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);
  for (int c = 0; c < B; ++c) {
    for (int r = 0; r < state_dim; ++r) {
      batch.s(r, c) = st.uniform();
      batch.s2(r, c) = st.uniform();
    }
    batch.ad[static_cast<std::size_t>(c)] = static_cast<int>(st.bounded(count));
    batch.r[c] = st.gaussian();
  }
  return batch;
}

Batch tiny_continuous_batch(int B, std::uint64_t seed, int state_dim = 2, int adim = 2) {
  rng::Stream st(seed);
  Batch batch;
  batch.s.resize(state_dim, B);
  batch.s2.resize(state_dim, B);
  batch.a.resize(adim, B);
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);
  for (int c = 0; c < B; ++c) {
    for (int r = 0; r < state_dim; ++r) {
      batch.s(r, c) = st.uniform();
      batch.s2(r, c) = st.uniform();
    }
    for (int r = 0; r < adim; ++r) batch.a(r, c) = st.uniform(-1.0, 1.0);
    batch.r[c] = st.gaussian();
  }
  return batch;
}

}  // namespace

TEST_CASE("expectile loss identities") {
  using offline_rl::expectile_loss;
  CHECK(expectile_loss(2.0, 0.9) == doctest::Approx(3.6).epsilon(1e-14));
  CHECK(expectile_loss(-2.0, 0.9) == doctest::Approx(0.4).epsilon(1e-14));
  for (double x : {-3.0, -0.5, 0.0, 0.5, 3.0}) {
    CHECK(expectile_loss(x, 0.5) == 0.5 * x * x);
    for (double tau : {0.5, 0.7, 0.9}) {
      double mirror = expectile_loss(-x, 1.0 - tau);
      CHECK(std::abs(expectile_loss(x, tau) - mirror) <=
            4e-16 * std::max(1.0, std::abs(mirror)));
    }
  }
}

TEST_CASE("iql q loss scalar cases") {
  TrainConfig cfg;
  cfg.gamma = 0.99;
  Agent agent = offline_rl::make_agent(2, grid_aspec(), cfg, 0);
  set_const_output(agent.critics.q1, 0.0);
  set_const_output(agent.critics.q2, 0.0);
  set_const_output(agent.value->p, 10.0);

  Batch batch = tiny_discrete_batch(1, 1);
  batch.r[0] = 1.0;
  batch.mask[0] = 1.0;
  // single transition, Q=0, r=1, gamma=0.99, V(s2)=10 -> (10.9)^2
  CHECK(offline_rl::iql_q_loss(agent, batch) == doctest::Approx(118.81).epsilon(1e-12));

  // terminal transition bootstraps nothing: target = r
  batch.mask[0] = 0.0;
  CHECK(offline_rl::iql_q_loss(agent, batch) == doctest::Approx(1.0).epsilon(1e-12));

  // exact fit has zero loss
  set_const_output(agent.critics.q1, 1.0);
  set_const_output(agent.critics.q2, 1.0);
  CHECK(offline_rl::iql_q_loss(agent, batch) == 0.0);

  Batch empty_r = batch;
  empty_r.r.resize(0);
  CHECK_THROWS_AS(offline_rl::iql_q_loss(agent, empty_r), Error);
}

TEST_CASE("iql v loss scalar cases") {
  TrainConfig cfg;
  cfg.expectile_tau = 0.7;
  Agent agent = offline_rl::make_agent(2, grid_aspec(), cfg, 0);
  Batch batch = tiny_discrete_batch(1, 2);

  // min-twin target Q = 5, V = 3, tau = 0.7 -> 0.7 * 4
  set_const_output(agent.critics.t1, 5.0);
  set_const_output(agent.critics.t2, 9.0);
  set_const_output(agent.value->p, 3.0);
  CHECK(offline_rl::iql_v_loss(agent, batch) == doctest::Approx(2.8).epsilon(1e-12));

  // Q = 3, V = 5 -> 0.3 * 4
  set_const_output(agent.critics.t1, 3.0);
  set_const_output(agent.critics.t2, 8.0);
  set_const_output(agent.value->p, 5.0);
  CHECK(offline_rl::iql_v_loss(agent, batch) == doctest::Approx(1.2).epsilon(1e-12));

  // V = min twin Q everywhere -> 0
  set_const_output(agent.value->p, 3.0);
  CHECK(offline_rl::iql_v_loss(agent, batch) == 0.0);

  // tau = 0.5: twice the loss equals the mean squared error
  agent.cfg.expectile_tau = 0.5;
  set_const_output(agent.critics.t1, 4.0);
  set_const_output(agent.critics.t2, 7.0);
  set_const_output(agent.value->p, 1.5);
  CHECK(2.0 * offline_rl::iql_v_loss(agent, batch) ==
        doctest::Approx((4.0 - 1.5) * (4.0 - 1.5)).epsilon(1e-12));
}

TEST_CASE("awr actor loss weights") {
  TrainConfig cfg;
  cfg.awr_temperature = 3.0;
  Agent agent = offline_rl::make_agent(2, grid_aspec(), cfg, 3);
  Batch batch = tiny_discrete_batch(6, 4);

  // behavioral-cloning reference value: -mean log pi(a|s)
  auto bc_loss = [&]() {
    double total = 0.0;
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
      Eigen::VectorXd logits =
          oracle::naive_forward(agent.policy.spec, agent.policy.p, batch.s.col(i));
      double mx = logits.maxCoeff();
      double z = (logits.array() - mx).exp().sum();
      double logp = logits[batch.ad[static_cast<std::size_t>(i)]] - (mx + std::log(z));
      total += -logp;
    }
    return total / static_cast<double>(batch.size());
  };

  // zero advantage -> unit weights -> behavioral cloning
  set_const_output(agent.critics.q1, 2.0);
  set_const_output(agent.critics.q2, 2.0);
  set_const_output(agent.value->p, 2.0);
  CHECK(offline_rl::awr_actor_loss(agent, batch) == doctest::Approx(bc_loss()).epsilon(1e-12));

  // huge advantage -> weight capped at 100
  set_const_output(agent.critics.q1, 50.0);
  set_const_output(agent.critics.q2, 50.0);
  set_const_output(agent.value->p, 0.0);
  CHECK(offline_rl::awr_actor_loss(agent, batch) ==
        doctest::Approx(100.0 * bc_loss()).epsilon(1e-10));

  // beta = 0 ignores advantages entirely
  agent.cfg.awr_temperature = 0.0;
  CHECK(offline_rl::awr_actor_loss(agent, batch) == doctest::Approx(bc_loss()).epsilon(1e-12));
}

TEST_CASE("td3 critic loss cases") {
  TrainConfig cfg;
  cfg.backbone = offline_rl::Backbone::td3;
  Agent agent = offline_rl::make_agent(2, pm_aspec(), cfg, 5);
  Batch batch = tiny_continuous_batch(2, 6);
  Eigen::MatrixXd zero_noise = Eigen::MatrixXd::Zero(2, 2);

  // critics and targets all zero, r = 0 -> exact fit
  set_const_output(agent.critics.q1, 0.0);
  set_const_output(agent.critics.q2, 0.0);
  set_const_output(agent.critics.t1, 0.0);
  set_const_output(agent.critics.t2, 0.0);
  Batch fit = batch;
  fit.r.setZero();
  CHECK(offline_rl::td3_critic_loss(agent, fit, zero_noise) == 0.0);

  // terminal mask drops the bootstrap: loss = mean r^2 over twins
  set_const_output(agent.critics.t1, 11.0);
  set_const_output(agent.critics.t2, 11.0);
  Batch done = batch;
  done.r.setConstant(7.0);
  done.mask.setZero();
  CHECK(offline_rl::td3_critic_loss(agent, done, zero_noise) ==
        doctest::Approx(49.0).epsilon(1e-12));

  // independent recomputation on a 2-transition batch with clipping noise
  Agent rnd = offline_rl::make_agent(2, pm_aspec(), cfg, 7);
  Eigen::MatrixXd noise(2, 2);
  noise << 3.0, -4.0, 0.5, 2.0;  // 0.2*3 = 0.6 exceeds the 0.5 clip
  double got = offline_rl::td3_critic_loss(rnd, batch, noise);

  double want = 0.0;
  for (Eigen::Index i = 0; i < 2; ++i) {
    Eigen::VectorXd mu = oracle::naive_forward(rnd.policy.spec, *rnd.policy.target, batch.s2.col(i));
    Eigen::VectorXd a2(2);
    for (int r = 0; r < 2; ++r) {
      double eps = std::clamp(rnd.cfg.td3_policy_noise * noise(r, i), -rnd.cfg.td3_noise_clip,
                              rnd.cfg.td3_noise_clip);
      a2[r] = std::clamp(mu[r] + eps, -1.0, 1.0);
    }
    Eigen::VectorXd x2(4);
    x2 << batch.s2.col(i), a2;
    double q1t = oracle::naive_forward(rnd.critics.spec, rnd.critics.t1, x2)[0];
    double q2t = oracle::naive_forward(rnd.critics.spec, rnd.critics.t2, x2)[0];
    double target = batch.r[i] + rnd.cfg.gamma * batch.mask[i] * std::min(q1t, q2t);
    Eigen::VectorXd x(4);
    x << batch.s.col(i), batch.a.col(i);
    double q1 = oracle::naive_forward(rnd.critics.spec, rnd.critics.q1, x)[0];
    double q2 = oracle::naive_forward(rnd.critics.spec, rnd.critics.q2, x)[0];
    want += ((q1 - target) * (q1 - target) + (q2 - target) * (q2 - target)) / 4.0;
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_AS(offline_rl::td3_critic_loss(rnd, batch, Eigen::MatrixXd::Zero(3, 2)), Error);
}

TEST_CASE("ddpg actor loss") {
  TrainConfig cfg;
  cfg.backbone = offline_rl::Backbone::td3;
  Agent agent = offline_rl::make_agent(2, pm_aspec(), cfg, 8);
  Batch batch = tiny_continuous_batch(4, 9);

  // constant critic -> flat landscape -> zero policy gradient
  set_const_output(agent.critics.q1, 2.5);
  nn::Params gp = nn::zeros_like(agent.policy.p);
  double loss = offline_rl::ddpg_actor_loss_grad(agent, batch, gp);
  CHECK(loss == doctest::Approx(-2.5).epsilon(1e-12));
  for (auto& m : gp.w) CHECK(m.isZero(0.0));
  for (auto& v : gp.b) CHECK(v.isZero(0.0));

  Agent disc = offline_rl::make_agent(2, grid_aspec(), TrainConfig{}, 0);
  CHECK_THROWS_AS(offline_rl::ddpg_actor_loss(disc, tiny_discrete_batch(2, 0)), Error);
}

TEST_CASE("loss gradients match finite differences") {
  TrainConfig small;
  small.hidden = {8, 8};

  // IQL family on a discrete agent
  Agent iql = offline_rl::make_agent(2, grid_aspec(), small, 11);
  Batch db = tiny_discrete_batch(5, 12);
  {
    nn::Params g1 = nn::zeros_like(iql.critics.q1), g2 = nn::zeros_like(iql.critics.q2);
    offline_rl::iql_q_loss_grad(iql, db, g1, g2);
    auto f = [&]() { return offline_rl::iql_q_loss(iql, db); };
    CHECK(oracle::fd_max_rel_err(f, iql.critics.q1, g1) < 1e-4);
    CHECK(oracle::fd_max_rel_err(f, iql.critics.q2, g2) < 1e-4);
  }
  {
    nn::Params gv = nn::zeros_like(iql.value->p);
    offline_rl::iql_v_loss_grad(iql, db, gv);
    auto f = [&]() { return offline_rl::iql_v_loss(iql, db); };
    CHECK(oracle::fd_max_rel_err(f, iql.value->p, gv) < 1e-4);
  }
  {
    nn::Params gp = nn::zeros_like(iql.policy.p);
    offline_rl::awr_actor_loss_grad(iql, db, gp);
    auto f = [&]() { return offline_rl::awr_actor_loss(iql, db); };
    CHECK(oracle::fd_max_rel_err(f, iql.policy.p, gp) < 1e-4);
  }

  // TD3 family on a continuous agent
  TrainConfig tdcfg = small;
  tdcfg.backbone = offline_rl::Backbone::td3;
  Agent td3 = offline_rl::make_agent(2, pm_aspec(), tdcfg, 13);
  Batch cb = tiny_continuous_batch(5, 14);
  rng::Stream nstream(15);
  Eigen::MatrixXd noise(2, 5);
  for (Eigen::Index c = 0; c < 5; ++c)
    for (Eigen::Index r = 0; r < 2; ++r) noise(r, c) = nstream.gaussian();
  {
    nn::Params g1 = nn::zeros_like(td3.critics.q1), g2 = nn::zeros_like(td3.critics.q2);
    offline_rl::td3_critic_loss_grad(td3, cb, noise, g1, g2);
    auto f = [&]() { return offline_rl::td3_critic_loss(td3, cb, noise); };
    CHECK(oracle::fd_max_rel_err(f, td3.critics.q1, g1) < 1e-4);
    CHECK(oracle::fd_max_rel_err(f, td3.critics.q2, g2) < 1e-4);
  }
  {
    nn::Params gp = nn::zeros_like(td3.policy.p);
    offline_rl::ddpg_actor_loss_grad(td3, cb, gp);
    auto f = [&]() { return offline_rl::ddpg_actor_loss(td3, cb); };
    CHECK(oracle::fd_max_rel_err(f, td3.policy.p, gp) < 1e-4);
  }
}

TEST_CASE("update_step ordering matches a manual replication") {
  // IQL: value -> critics -> actor -> Polyak on critic targets only
  {
    TrainConfig cfg;
    cfg.hidden = {8, 8};
    Agent a = offline_rl::make_agent(2, grid_aspec(), cfg, 21);
    Agent b = a;
    auto opt_a = offline_rl::make_optimizers(a);
    auto opt_b = offline_rl::make_optimizers(b);
    Batch batch = tiny_discrete_batch(6, 22);
    rng::Stream sa(33);

    offline_rl::LossReport rep = offline_rl::update_step(a, opt_a, batch, sa);

    nn::Params gv, g1, g2, gp;
    double lv = offline_rl::iql_v_loss_grad(b, batch, gv);
    opt_b.value.step(b.value->p, gv);
    double lq = offline_rl::iql_q_loss_grad(b, batch, g1, g2);
    opt_b.q1.step(b.critics.q1, g1);
    opt_b.q2.step(b.critics.q2, g2);
    double la = offline_rl::awr_actor_loss_grad(b, batch, gp);
    opt_b.actor.step(b.policy.p, gp);
    nn::polyak_update(b.critics.t1, b.critics.q1, cfg.polyak);
    nn::polyak_update(b.critics.t2, b.critics.q2, cfg.polyak);

    CHECK(rep.value == lv);
    CHECK(rep.critic == lq);
    CHECK(rep.actor == la);
    CHECK(agents_equal(a, b));
  }

  // TD3: critics -> actor -> Polyak on critic and actor targets
  {
    TrainConfig cfg;
    cfg.backbone = offline_rl::Backbone::td3;
    cfg.hidden = {8, 8};
    Agent a = offline_rl::make_agent(2, pm_aspec(), cfg, 23);
    Agent b = a;
    auto opt_a = offline_rl::make_optimizers(a);
    auto opt_b = offline_rl::make_optimizers(b);
    Batch batch = tiny_continuous_batch(6, 24);

    rng::Stream sa(44), sb(44);
    offline_rl::LossReport rep = offline_rl::update_step(a, opt_a, batch, sa);

    Eigen::MatrixXd noise(2, 6);
    for (Eigen::Index c = 0; c < 6; ++c)
      for (Eigen::Index r = 0; r < 2; ++r) noise(r, c) = sb.gaussian();
    nn::Params g1, g2, gp;
    double lq = offline_rl::td3_critic_loss_grad(b, batch, noise, g1, g2);
    opt_b.q1.step(b.critics.q1, g1);
    opt_b.q2.step(b.critics.q2, g2);
    double la = offline_rl::ddpg_actor_loss_grad(b, batch, gp);
    opt_b.actor.step(b.policy.p, gp);
    nn::polyak_update(*b.policy.target, b.policy.p, cfg.polyak);
    nn::polyak_update(b.critics.t1, b.critics.q1, cfg.polyak);
    nn::polyak_update(b.critics.t2, b.critics.q2, cfg.polyak);

    CHECK(rep.critic == lq);
    CHECK(rep.actor == la);
    CHECK(agents_equal(a, b));
  }
}

TEST_CASE("update_step determinism and zero learning rates") {
  TrainConfig cfg;
  cfg.hidden = {8, 8};
  Agent a = offline_rl::make_agent(2, grid_aspec(), cfg, 31);
  Agent b = a;
  auto oa = offline_rl::make_optimizers(a);
  auto ob = offline_rl::make_optimizers(b);
  Batch batch = tiny_discrete_batch(4, 32);
  rng::Stream sa(1), sb(1);
  for (int i = 0; i < 3; ++i) {
    offline_rl::update_step(a, oa, batch, sa);
    offline_rl::update_step(b, ob, batch, sb);
  }
  CHECK(agents_equal(a, b));

  TrainConfig frozen = cfg;
  frozen.lr_critic = frozen.lr_value = frozen.lr_actor = 0.0;
  Agent f = offline_rl::make_agent(2, grid_aspec(), frozen, 33);
  Agent before = f;
  auto of = offline_rl::make_optimizers(f);
  rng::Stream sf(2);
  offline_rl::update_step(f, of, batch, sf);
  CHECK(agents_equal(f, before));
}

TEST_CASE("batch plumbing") {
  Eigen::MatrixXd oh = offline_rl::one_hot({0, 2, 1}, 3);
  REQUIRE(oh.rows() == 3);
  REQUIRE(oh.cols() == 3);
  CHECK(oh(0, 0) == 1.0);
  CHECK(oh(2, 1) == 1.0);
  CHECK(oh(1, 2) == 1.0);
  CHECK(oh.sum() == 3.0);
  CHECK_THROWS_AS(offline_rl::one_hot({3}, 3), Error);
  CHECK_THROWS_AS(offline_rl::one_hot({-1}, 3), Error);

  Eigen::MatrixXd top = Eigen::MatrixXd::Ones(2, 3);
  Eigen::MatrixXd bot = Eigen::MatrixXd::Zero(1, 3);
  Eigen::MatrixXd st = offline_rl::stack_rows(top, bot);
  CHECK(st.rows() == 3);
  CHECK(st(2, 0) == 0.0);
  CHECK_THROWS_AS(offline_rl::stack_rows(top, Eigen::MatrixXd::Zero(1, 4)), Error);

  CHECK_THROWS_AS(
      offline_rl::make_agent(2, grid_aspec(),
                             TrainConfig{.backbone = offline_rl::Backbone::td3}, 0),
      Error);
}

TEST_CASE("acting respects bounds and distributions") {
  TrainConfig cfg;
  cfg.backbone = offline_rl::Backbone::td3;
  Agent agent = offline_rl::make_agent(2, pm_aspec(), cfg, 51);
  rng::Stream st(52);
  Eigen::Vector2d x(0.3, 0.7);

  env::Action det = offline_rl::act_deterministic(agent, x);
  Eigen::VectorXd mu = oracle::naive_forward(agent.policy.spec, agent.policy.p, x);
  CHECK((det.cont - mu * 0.1).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < 200; ++i) {
    env::Action a = offline_rl::act_exploring(agent, x, st);
    CHECK(a.cont.cwiseAbs().maxCoeff() <= 0.1);
  }

  // discrete deterministic action is the logits argmax; exploring samples softmax
  Agent disc = offline_rl::make_agent(2, grid_aspec(), TrainConfig{}, 53);
  Eigen::VectorXd logits = oracle::naive_forward(disc.policy.spec, disc.policy.p, x);
  Eigen::Index want;
  logits.maxCoeff(&want);
  CHECK(offline_rl::policy_argmax(disc, x) == static_cast<int>(want));
  set_const_output(disc.policy.p, 0.0);  // uniform softmax
  std::vector<std::int64_t> counts(5, 0);
  for (int i = 0; i < 50000; ++i)
    ++counts[static_cast<std::size_t>(offline_rl::act_exploring(disc, x, st).disc)];
  // chi-square, 4 dof, p=0.01 critical value 13.277
  CHECK(oracle::chi_square_uniform(counts) < 13.277);
  CHECK_THROWS_AS(offline_rl::policy_argmax(agent, x), Error);
}

TEST_CASE("agent checkpoints round trip") {
  TrainConfig cfg;
  cfg.gamma = 0.95;
  cfg.hidden = {16, 8};
  cfg.expectile_tau = 0.8;
  Agent a = offline_rl::make_agent(2, grid_aspec(), cfg, 61);
  std::string dir = "/tmp/u2o_test_agent";
  offline_rl::save_agent(a, dir);
  Agent b = offline_rl::load_agent(dir);

  CHECK(b.state_dim == 2);
  CHECK(b.cfg.gamma == 0.95);
  CHECK(b.cfg.expectile_tau == 0.8);
  CHECK(b.cfg.hidden == std::vector<int>{16, 8});
  CHECK(b.aspec.type == env::ActionType::discrete);
  CHECK(b.aspec.count == 5);
  REQUIRE(b.value.has_value());

  // values survive exactly up to f32 quantization
  for (std::size_t l = 0; l < a.policy.p.w.size(); ++l)
    for (Eigen::Index i = 0; i < a.policy.p.w[l].size(); ++i)
      CHECK(b.policy.p.w[l].data()[i] ==
            static_cast<double>(static_cast<float>(a.policy.p.w[l].data()[i])));

  // a reloaded agent reloads identically (fixed point)
  offline_rl::save_agent(b, dir);
  Agent c = offline_rl::load_agent(dir);
  CHECK(agents_equal(b, c));

  TrainConfig td = cfg;
  td.backbone = offline_rl::Backbone::td3;
  Agent t = offline_rl::make_agent(4, pm_aspec(), td, 62);
  std::string tdir = "/tmp/u2o_test_agent_td3";
  offline_rl::save_agent(t, tdir);
  Agent t2 = offline_rl::load_agent(tdir);
  REQUIRE(t2.policy.target.has_value());
  CHECK(!t2.value.has_value());
  CHECK(t2.aspec.high == 0.1);
  CHECK(t2.state_dim == 4);

  CHECK_THROWS_AS(offline_rl::load_agent("/tmp/u2o_test_agent_missing"), Error);
}

TEST_CASE("iql on a full-coverage gridworld matches value iteration") {
  env::EnvSpec spec = env::make_gridworld(5);
  env::Task task = env::make_task(spec, "goal_dense");
  auto data = env::collect_offline_dataset(spec, 20000, env::Behavior::uniform_random, 71);

  TrainConfig cfg;
  cfg.gamma = 0.98;
  cfg.expectile_tau = 0.9;
  cfg.awr_temperature = 10.0;
  cfg.lr_critic = cfg.lr_value = cfg.lr_actor = 1e-3;
  cfg.batch_size = 256;
  Agent agent = offline_rl::make_agent(2, spec.action_spec(), cfg, 72);
  auto opt = offline_rl::make_optimizers(agent);

  rng::Stream pick(73), update(74);
  auto B = static_cast<Eigen::Index>(cfg.batch_size);
  Batch batch;
  batch.s.resize(2, B);
  batch.s2.resize(2, B);
  batch.ad.resize(static_cast<std::size_t>(B));
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);  // time-limit ends bootstrap normally
  for (int step = 0; step < 5000; ++step) {
    for (Eigen::Index c = 0; c < B; ++c) {
      auto i = static_cast<Eigen::Index>(pick.bounded(data.size()));
      batch.s.col(c) = data.s.col(i);
      batch.s2.col(c) = data.s2.col(i);
      int ai = data.ad[static_cast<std::size_t>(i)];
      batch.ad[static_cast<std::size_t>(c)] = ai;
      batch.r[c] = env::task_reward(task, data.s.col(i), env::Action::discrete(ai), data.s2.col(i));
    }
    offline_rl::update_step(agent, opt, batch, update);
  }

  oracle::TabularVI vi = oracle::value_iteration(spec, task, cfg.gamma, 600);
  int hits = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      int a = offline_rl::policy_argmax(agent, env::encode_cell(spec, {x, y}));
      const auto& greedy = vi.greedy[static_cast<std::size_t>(y * 5 + x)];
      if (std::find(greedy.begin(), greedy.end(), a) != greedy.end()) ++hits;
    }
  CHECK(hits >= 24);  // >= 95% of 25 states
}
