#include "u2o/offline_rl.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace u2o::offline_rl {

namespace {

constexpr double kAwrWeightCap = 100.0;

void check_finite(double loss, const char* what) {
  if (!std::isfinite(loss)) throw NumericalFailure(std::string(what) + " is not finite");
}

// Reuse caller-provided gradient buffers when shapes already match.
void reset_grad(nn::Params& g, const nn::Params& ref) {
  if (g.w.size() == ref.w.size()) {
    bool ok = true;
    for (std::size_t l = 0; l < ref.w.size() && ok; ++l)
      ok = g.w[l].rows() == ref.w[l].rows() && g.w[l].cols() == ref.w[l].cols();
    if (ok) {
      g.set_zero();
      return;
    }
  }
  g = nn::zeros_like(ref);
}

Eigen::RowVectorXd value_row(const nn::MlpSpec& spec, const nn::Params& p,
                             const Eigen::MatrixXd& X) {
  nn::Cache cache;
  return nn::forward(spec, p, X, cache).row(0);
}

// Smoothed target action: clamp(pi_target(s2) + clamp(sigma*eps, +-clip), -1, 1).
Eigen::MatrixXd td3_target_action(const Agent& agent, const Batch& batch,
                                  const Eigen::MatrixXd& noise) {
  nn::Cache cache;
  const Eigen::MatrixXd& mu = nn::forward(agent.policy.spec, *agent.policy.target, batch.s2, cache);
  double clip = agent.cfg.td3_noise_clip;
  Eigen::MatrixXd eps =
      (agent.cfg.td3_policy_noise * noise).cwiseMax(-clip).cwiseMin(clip);
  return (mu + eps).cwiseMax(-1.0).cwiseMin(1.0);
}

// Shared TD-loss core: L = (1/2B) * (|Q1 - t|^2 + |Q2 - t|^2).
double twin_td_loss(const Agent& agent, const Batch& batch, const Eigen::RowVectorXd& boot,
                    const char* what, nn::Params* g1, nn::Params* g2) {
  Eigen::MatrixXd X = stack_rows(batch.s, action_matrix(agent, batch));
  Eigen::RowVectorXd target =
      batch.r.transpose() + agent.cfg.gamma * batch.mask.transpose().cwiseProduct(boot);
  double B = static_cast<double>(batch.size());
  double loss = 0.0;
  auto one = [&](const nn::Params& q, nn::Params* g) {
    nn::Cache cache;
    Eigen::RowVectorXd e = nn::forward(agent.critics.spec, q, X, cache).row(0) - target;
    loss += e.squaredNorm() / (2.0 * B);
    if (g) {
      reset_grad(*g, q);
      Eigen::MatrixXd dY = e / B;
      nn::backward(agent.critics.spec, q, cache, dY, *g);
    }
  };
  one(agent.critics.q1, g1);
  one(agent.critics.q2, g2);
  check_finite(loss, what);
  return loss;
}

}  // namespace

Agent make_agent(int state_dim, const env::ActionSpec& aspec, const TrainConfig& cfg,
                 std::uint64_t seed) {
  bool discrete = aspec.type == env::ActionType::discrete;
  if (cfg.backbone == Backbone::td3 && discrete)
    throw Error("td3 backbone requires continuous actions");
  Agent agent;
  agent.cfg = cfg;
  agent.aspec = aspec;
  agent.state_dim = state_dim;

  auto widths = [&](int in, int out) {
    std::vector<int> w{in};
    w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
    w.push_back(out);
    return w;
  };

  int out_dim = discrete ? aspec.count : aspec.dim;
  agent.policy.discrete = discrete;
  agent.policy.spec = {widths(state_dim, out_dim), nn::Act::relu,
                       discrete ? nn::OutAct::identity : nn::OutAct::tanh};
  agent.policy.p = nn::init_params(agent.policy.spec, rng::derive(seed, "policy"));
  if (cfg.backbone == Backbone::td3) agent.policy.target = agent.policy.p;

  agent.critics.spec = {widths(state_dim + agent.action_repr_dim(), 1), nn::Act::relu,
                        nn::OutAct::identity};
  agent.critics.q1 = nn::init_params(agent.critics.spec, rng::derive(seed, "q1"));
  agent.critics.q2 = nn::init_params(agent.critics.spec, rng::derive(seed, "q2"));
  agent.critics.t1 = agent.critics.q1;
  agent.critics.t2 = agent.critics.q2;

  if (cfg.backbone == Backbone::iql) {
    ValueNet v;
    v.spec = {widths(state_dim, 1), nn::Act::relu, nn::OutAct::identity};
    v.p = nn::init_params(v.spec, rng::derive(seed, "value"));
    agent.value = std::move(v);
  }
  return agent;
}

Optimizers make_optimizers(const Agent& agent) {
  Optimizers opt;
  const TrainConfig& cfg = agent.cfg;
  opt.actor = nn::Adam(agent.policy.p, {.lr = cfg.lr_actor});
  opt.q1 = nn::Adam(agent.critics.q1, {.lr = cfg.lr_critic});
  opt.q2 = nn::Adam(agent.critics.q2, {.lr = cfg.lr_critic});
  if (agent.value) opt.value = nn::Adam(agent.value->p, {.lr = cfg.lr_value});
  return opt;
}

Eigen::MatrixXd one_hot(const std::vector<int>& a, int k) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(k, static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < 0 || a[i] >= k) throw Error("one_hot: action out of range");
    out(a[i], static_cast<Eigen::Index>(i)) = 1.0;
  }
  return out;
}

Eigen::MatrixXd action_matrix(const Agent& agent, const Batch& batch) {
  if (agent.policy.discrete) return one_hot(batch.ad, agent.aspec.count);
  return batch.a;
}

Eigen::MatrixXd stack_rows(const Eigen::MatrixXd& top, const Eigen::MatrixXd& bottom) {
  if (top.cols() != bottom.cols()) throw Error("stack_rows: column mismatch");
  Eigen::MatrixXd out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

// --- IQL --------------------------------------------------------------------

double iql_q_loss(const Agent& agent, const Batch& batch) {
  if (!agent.value) throw Error("iql_q_loss requires a value net");
  if (batch.r.size() != batch.size()) throw Error("iql_q_loss: batch rewards missing");
  Eigen::RowVectorXd v2 = value_row(agent.value->spec, agent.value->p, batch.s2);
  return twin_td_loss(agent, batch, v2, "iql_q_loss", nullptr, nullptr);
}

double iql_q_loss_grad(const Agent& agent, const Batch& batch, nn::Params& g1, nn::Params& g2) {
  if (!agent.value) throw Error("iql_q_loss requires a value net");
  if (batch.r.size() != batch.size()) throw Error("iql_q_loss: batch rewards missing");
  Eigen::RowVectorXd v2 = value_row(agent.value->spec, agent.value->p, batch.s2);
  return twin_td_loss(agent, batch, v2, "iql_q_loss", &g1, &g2);
}

namespace {

double iql_v_loss_impl(const Agent& agent, const Batch& batch, nn::Params* gv) {
  if (!agent.value) throw Error("iql_v_loss requires a value net");
  Eigen::MatrixXd X = stack_rows(batch.s, action_matrix(agent, batch));
  Eigen::RowVectorXd qt = value_row(agent.critics.spec, agent.critics.t1, X)
                              .cwiseMin(value_row(agent.critics.spec, agent.critics.t2, X));
  nn::Cache cache;
  Eigen::RowVectorXd v = nn::forward(agent.value->spec, agent.value->p, batch.s, cache).row(0);
  Eigen::RowVectorXd x = qt - v;
  double tau = agent.cfg.expectile_tau;
  double B = static_cast<double>(batch.size());
  double loss = 0.0;
  Eigen::MatrixXd dY(1, batch.size());
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    double w = expectile_weight(x[i], tau);
    loss += w * x[i] * x[i] / B;
    dY(0, i) = -2.0 * w * x[i] / B;
  }
  check_finite(loss, "iql_v_loss");
  if (gv) {
    reset_grad(*gv, agent.value->p);
    nn::backward(agent.value->spec, agent.value->p, cache, dY, *gv);
  }
  return loss;
}

}  // namespace

double iql_v_loss(const Agent& agent, const Batch& batch) {
  return iql_v_loss_impl(agent, batch, nullptr);
}

double iql_v_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gv) {
  return iql_v_loss_impl(agent, batch, &gv);
}

namespace {

// AWR advantage weights from online critics and value net; constants w.r.t. policy.
Eigen::RowVectorXd awr_weights(const Agent& agent, const Batch& batch) {
  Eigen::MatrixXd X = stack_rows(batch.s, action_matrix(agent, batch));
  Eigen::RowVectorXd q = value_row(agent.critics.spec, agent.critics.q1, X)
                             .cwiseMin(value_row(agent.critics.spec, agent.critics.q2, X));
  Eigen::RowVectorXd v = value_row(agent.value->spec, agent.value->p, batch.s);
  double beta = agent.cfg.awr_temperature;
  double cap = std::log(kAwrWeightCap);
  Eigen::RowVectorXd w(batch.size());
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    w[i] = std::exp(std::min(beta * (q[i] - v[i]), cap));
  return w;
}

double awr_actor_loss_impl(const Agent& agent, const Batch& batch, nn::Params* gp) {
  if (!agent.value) throw Error("awr_actor_loss requires the iql backbone");
  Eigen::RowVectorXd w = awr_weights(agent, batch);
  nn::Cache cache;
  const Eigen::MatrixXd& out = nn::forward(agent.policy.spec, agent.policy.p, batch.s, cache);
  double B = static_cast<double>(batch.size());
  double loss = 0.0;
  Eigen::MatrixXd dY(out.rows(), out.cols());
  if (agent.policy.discrete) {
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
      Eigen::VectorXd logits = out.col(i);
      double mx = logits.maxCoeff();
      Eigen::VectorXd p = (logits.array() - mx).exp();
      double zsum = p.sum();
      p /= zsum;
      double logp = logits[batch.ad[static_cast<std::size_t>(i)]] - (mx + std::log(zsum));
      loss += -w[i] * logp / B;
      Eigen::VectorXd d = p * (w[i] / B);
      d[batch.ad[static_cast<std::size_t>(i)]] -= w[i] / B;
      dY.col(i) = d;
    }
  } else {
    double sigma = std::exp(agent.cfg.iql_log_std);
    double log_norm = agent.cfg.iql_log_std + 0.5 * std::log(2.0 * M_PI);
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
      Eigen::VectorXd diff = batch.a.col(i) - out.col(i);
      double logp = -0.5 * diff.squaredNorm() / (sigma * sigma) -
                    static_cast<double>(diff.size()) * log_norm;
      loss += -w[i] * logp / B;
      dY.col(i) = -(w[i] / B) * diff / (sigma * sigma);
    }
  }
  check_finite(loss, "awr_actor_loss");
  if (gp) {
    reset_grad(*gp, agent.policy.p);
    nn::backward(agent.policy.spec, agent.policy.p, cache, dY, *gp);
  }
  return loss;
}

}  // namespace

double awr_actor_loss(const Agent& agent, const Batch& batch) {
  return awr_actor_loss_impl(agent, batch, nullptr);
}

double awr_actor_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gp) {
  return awr_actor_loss_impl(agent, batch, &gp);
}

// --- TD3 --------------------------------------------------------------------

namespace {

Eigen::RowVectorXd td3_bootstrap(const Agent& agent, const Batch& batch,
                                 const Eigen::MatrixXd& noise) {
  if (agent.policy.discrete || !agent.policy.target)
    throw Error("td3_critic_loss requires a continuous td3 agent");
  if (noise.rows() != agent.aspec.dim || noise.cols() != batch.size())
    throw Error("td3_critic_loss: noise shape mismatch");
  Eigen::MatrixXd a2 = td3_target_action(agent, batch, noise);
  Eigen::MatrixXd X2 = stack_rows(batch.s2, a2);
  return value_row(agent.critics.spec, agent.critics.t1, X2)
      .cwiseMin(value_row(agent.critics.spec, agent.critics.t2, X2));
}

}  // namespace

double td3_critic_loss(const Agent& agent, const Batch& batch, const Eigen::MatrixXd& noise) {
  return twin_td_loss(agent, batch, td3_bootstrap(agent, batch, noise), "td3_critic_loss",
                      nullptr, nullptr);
}

double td3_critic_loss_grad(const Agent& agent, const Batch& batch, const Eigen::MatrixXd& noise,
                            nn::Params& g1, nn::Params& g2) {
  return twin_td_loss(agent, batch, td3_bootstrap(agent, batch, noise), "td3_critic_loss", &g1,
                      &g2);
}

namespace {

double ddpg_actor_loss_impl(const Agent& agent, const Batch& batch, nn::Params* gp) {
  if (agent.policy.discrete) throw Error("ddpg_actor_loss requires continuous actions");
  nn::Cache pol_cache;
  const Eigen::MatrixXd& a = nn::forward(agent.policy.spec, agent.policy.p, batch.s, pol_cache);
  Eigen::MatrixXd X = stack_rows(batch.s, a);
  nn::Cache q_cache;
  const Eigen::MatrixXd& q = nn::forward(agent.critics.spec, agent.critics.q1, X, q_cache);
  double B = static_cast<double>(batch.size());
  double loss = -q.row(0).sum() / B;
  check_finite(loss, "ddpg_actor_loss");
  if (gp) {
    Eigen::MatrixXd dY = Eigen::MatrixXd::Constant(1, batch.size(), -1.0 / B);
    nn::Params discard = nn::zeros_like(agent.critics.q1);
    Eigen::MatrixXd dX;
    nn::backward(agent.critics.spec, agent.critics.q1, q_cache, dY, discard, &dX);
    Eigen::MatrixXd dA = dX.bottomRows(agent.aspec.dim);
    reset_grad(*gp, agent.policy.p);
    nn::backward(agent.policy.spec, agent.policy.p, pol_cache, dA, *gp);
  }
  return loss;
}

}  // namespace

double ddpg_actor_loss(const Agent& agent, const Batch& batch) {
  return ddpg_actor_loss_impl(agent, batch, nullptr);
}

double ddpg_actor_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gp) {
  return ddpg_actor_loss_impl(agent, batch, &gp);
}

// --- update step ----------------------------------------------------------------

LossReport update_step(Agent& agent, Optimizers& opt, const Batch& batch, rng::Stream& stream) {
  LossReport report;
  thread_local nn::Params g1, g2, gv, gp;
  if (agent.cfg.backbone == Backbone::iql) {
    report.value = iql_v_loss_grad(agent, batch, gv);
    opt.value.step(agent.value->p, gv);
    report.critic = iql_q_loss_grad(agent, batch, g1, g2);
    opt.q1.step(agent.critics.q1, g1);
    opt.q2.step(agent.critics.q2, g2);
    report.actor = awr_actor_loss_grad(agent, batch, gp);
    opt.actor.step(agent.policy.p, gp);
  } else {
    Eigen::MatrixXd noise(agent.aspec.dim, batch.size());
    for (Eigen::Index c = 0; c < noise.cols(); ++c)
      for (Eigen::Index r = 0; r < noise.rows(); ++r) noise(r, c) = stream.gaussian();
    report.critic = td3_critic_loss_grad(agent, batch, noise, g1, g2);
    opt.q1.step(agent.critics.q1, g1);
    opt.q2.step(agent.critics.q2, g2);
    report.actor = ddpg_actor_loss_grad(agent, batch, gp);
    opt.actor.step(agent.policy.p, gp);
    nn::polyak_update(*agent.policy.target, agent.policy.p, agent.cfg.polyak);
  }
  nn::polyak_update(agent.critics.t1, agent.critics.q1, agent.cfg.polyak);
  nn::polyak_update(agent.critics.t2, agent.critics.q2, agent.cfg.polyak);
  return report;
}

// --- acting -----------------------------------------------------------------------

int policy_argmax(const Agent& agent, const Eigen::VectorXd& x) {
  if (!agent.policy.discrete) throw Error("policy_argmax requires a discrete policy");
  Eigen::VectorXd logits = nn::forward1(agent.policy.spec, agent.policy.p, x);
  Eigen::Index best;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

env::Action act_deterministic(const Agent& agent, const Eigen::VectorXd& x) {
  if (agent.policy.discrete) return env::Action::discrete(policy_argmax(agent, x));
  Eigen::VectorXd mu = nn::forward1(agent.policy.spec, agent.policy.p, x);
  return env::Action::continuous(mu * agent.aspec.high);
}

env::Action act_exploring(const Agent& agent, const Eigen::VectorXd& x, rng::Stream& stream) {
  if (agent.policy.discrete) {
    Eigen::VectorXd logits = nn::forward1(agent.policy.spec, agent.policy.p, x);
    Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
    p /= p.sum();
    double u = stream.uniform();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u < acc) return env::Action::discrete(static_cast<int>(i));
    }
    return env::Action::discrete(static_cast<int>(p.size() - 1));
  }
  Eigen::VectorXd mu = nn::forward1(agent.policy.spec, agent.policy.p, x);
  double sigma = agent.cfg.backbone == Backbone::td3 ? agent.cfg.td3_exploration_std
                                                     : std::exp(agent.cfg.iql_log_std);
  Eigen::VectorXd a(mu.size());
  for (Eigen::Index i = 0; i < a.size(); ++i)
    a[i] = std::clamp(mu[i] + sigma * stream.gaussian(), -1.0, 1.0);
  return env::Action::continuous(a * agent.aspec.high);
}

// --- checkpointing ------------------------------------------------------------------

namespace {

using json = nlohmann::ordered_json;

template <typename AgentT, typename ParamsT>
std::vector<std::pair<std::string, ParamsT*>> agent_tensors(AgentT& agent) {
  std::vector<std::pair<std::string, ParamsT*>> nets{{"policy", &agent.policy.p},
                                                     {"q1", &agent.critics.q1},
                                                     {"q2", &agent.critics.q2},
                                                     {"q1_target", &agent.critics.t1},
                                                     {"q2_target", &agent.critics.t2}};
  if (agent.policy.target) nets.emplace_back("policy_target", &*agent.policy.target);
  if (agent.value) nets.emplace_back("value", &agent.value->p);
  return nets;
}

json train_config_to_json(const TrainConfig& c) {
  return {{"backbone", c.backbone == Backbone::iql ? "iql" : "td3"},
          {"gamma", c.gamma},
          {"expectile_tau", c.expectile_tau},
          {"awr_temperature", c.awr_temperature},
          {"polyak", c.polyak},
          {"lr_feature", c.lr_feature},
          {"lr_critic", c.lr_critic},
          {"lr_value", c.lr_value},
          {"lr_actor", c.lr_actor},
          {"batch_size", c.batch_size},
          {"td3_policy_noise", c.td3_policy_noise},
          {"td3_noise_clip", c.td3_noise_clip},
          {"td3_exploration_std", c.td3_exploration_std},
          {"iql_log_std", c.iql_log_std},
          {"hidden", c.hidden}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.backbone = j.at("backbone") == "iql" ? Backbone::iql : Backbone::td3;
  c.gamma = j.at("gamma").get<double>();
  c.expectile_tau = j.at("expectile_tau").get<double>();
  c.awr_temperature = j.at("awr_temperature").get<double>();
  c.polyak = j.at("polyak").get<double>();
  c.lr_feature = j.at("lr_feature").get<double>();
  c.lr_critic = j.at("lr_critic").get<double>();
  c.lr_value = j.at("lr_value").get<double>();
  c.lr_actor = j.at("lr_actor").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.td3_policy_noise = j.at("td3_policy_noise").get<double>();
  c.td3_noise_clip = j.at("td3_noise_clip").get<double>();
  c.td3_exploration_std = j.at("td3_exploration_std").get<double>();
  c.iql_log_std = j.at("iql_log_std").get<double>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  return c;
}

}  // namespace

void save_agent(const Agent& agent, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nn::save_tensors(dir + "/agent.ckpt", agent_tensors<const Agent, const nn::Params>(agent));
  json meta{{"state_dim", agent.state_dim},
            {"action_spec",
             json{{"type", agent.aspec.type == env::ActionType::discrete ? "discrete" : "continuous"},
                  {"count", agent.aspec.count},
                  {"dim", agent.aspec.dim},
                  {"high", agent.aspec.high}}},
            {"train_config", train_config_to_json(agent.cfg)}};
  std::ofstream(dir + "/agent_meta.json") << meta.dump(2) << "\n";
}

Agent load_agent(const std::string& dir) {
  std::ifstream mf(dir + "/agent_meta.json");
  if (!mf) throw Error("missing agent meta: " + dir);
  json meta = json::parse(mf);
  const json& aj = meta.at("action_spec");
  env::ActionSpec aspec;
  aspec.type = aj.at("type") == "discrete" ? env::ActionType::discrete : env::ActionType::continuous;
  aspec.count = aj.at("count").get<int>();
  aspec.dim = aj.at("dim").get<int>();
  aspec.high = aj.at("high").get<double>();
  TrainConfig cfg = train_config_from_json(meta.at("train_config"));
  Agent agent = make_agent(meta.at("state_dim").get<int>(), aspec, cfg, 0);
  nn::load_tensors(dir + "/agent.ckpt", agent_tensors<Agent, nn::Params>(agent));
  return agent;
}

}  // namespace u2o::offline_rl
