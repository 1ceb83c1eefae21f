#include "u2o/bridge.hpp"

#include <cstdio>

#include "u2o/offline_rl.hpp"

namespace u2o::bridge {

IdentifyMethod identify_method_from_string(const std::string& name) {
  if (name == "lsq") return IdentifyMethod::lsq;
  if (name == "goal") return IdentifyMethod::goal;
  if (name == "random") return IdentifyMethod::random;
  throw ConfigError("unknown skill identification method: " + name);
}

std::string identify_method_to_string(IdentifyMethod m) {
  switch (m) {
    case IdentifyMethod::lsq: return "lsq";
    case IdentifyMethod::goal: return "goal";
    default: return "random";
  }
}

SkillIdentity identify_skill_lsq(const env::RewardDataset& data, const hilp::FeatureNet& net,
                                 double ridge) {
  if (data.size() == 0) throw Error("identify_skill_lsq: empty reward dataset");
  if (ridge < 0.0) throw RangeViolation("ridge must be nonnegative");
  Eigen::MatrixXd F = hilp::successor_features(net, data.s, data.s2);  // d x m, columns f_i
  Eigen::MatrixXd A = F * F.transpose();
  A.diagonal().array() += ridge;
  Eigen::VectorXd b = F * data.r;
  Eigen::VectorXd z = A.ldlt().solve(b);
  double norm = z.norm();
  if (!std::isfinite(norm)) throw NumericalFailure("skill regression produced non-finite values");
  if (norm < 1e-8) throw DegenerateReward("regression solution is numerically zero");
  double m = static_cast<double>(data.size());
  double residual = (data.r - F.transpose() * z).squaredNorm() / m;
  SkillIdentity id;
  id.z_star = z / norm;
  id.residual = residual;
  id.method = IdentifyMethod::lsq;
  return id;
}

SkillIdentity identify_skill_goal(const hilp::FeatureNet& net, const Eigen::VectorXd& s_ref,
                                  const Eigen::VectorXd& g) {
  Eigen::VectorXd diff =
      nn::forward1(net.spec, net.p, g) - nn::forward1(net.spec, net.p, s_ref);
  double norm = diff.norm();
  if (norm < 1e-8) throw GoalIndistinct("goal embedding coincides with the reference state");
  SkillIdentity id;
  id.z_star = diff / norm;
  id.residual = 0.0;
  id.method = IdentifyMethod::goal;
  return id;
}

SkillIdentity identify_skill_random(rng::Stream& stream, int d) {
  SkillIdentity id;
  id.z_star = hilp::sample_skill(stream, d);
  id.residual = 0.0;
  id.method = IdentifyMethod::random;
  return id;
}

std::string identity_to_json(const SkillIdentity& id) {
  std::string out = "{\"z_star\":[";
  char buf[40];
  for (Eigen::Index i = 0; i < id.z_star.size(); ++i) {
    if (i) out += ',';
    std::snprintf(buf, sizeof(buf), "%.16e", id.z_star[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "%.16e", id.residual);
  out += "],\"residual\":";
  out += buf;
  out += ",\"method\":\"" + identify_method_to_string(id.method) + "\"}";
  return out;
}

env::RewardDataset collect_reward_dataset_online(const env::EnvSpec& spec, const env::Task& task,
                                                 const hilp::PretrainBundle& bundle,
                                                 std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("collect_reward_dataset_online: n must be positive");
  env::Env environment(spec, rng::derive(seed, "env"));
  rng::Stream skills(rng::derive(seed, "skills"));
  bool disc = spec.action_spec().type == env::ActionType::discrete;
  int obs_dim = spec.obs_dim();

  env::RewardDataset out;
  out.provenance = env::RewardProvenance::online_collected;
  out.s.resize(obs_dim, static_cast<Eigen::Index>(n));
  out.s2.resize(obs_dim, static_cast<Eigen::Index>(n));
  if (disc) {
    out.ad.resize(n);
    out.a.resize(0, static_cast<Eigen::Index>(n));
  } else {
    out.a.resize(spec.action_spec().dim, static_cast<Eigen::Index>(n));
  }
  out.r.resize(static_cast<Eigen::Index>(n));

  Eigen::VectorXd x(obs_dim + bundle.d);
  Eigen::VectorXd obs;
  bool need_reset = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (need_reset) {
      obs = environment.reset();
      x.tail(bundle.d) = hilp::sample_skill(skills, bundle.d);
      need_reset = false;
    }
    x.head(obs_dim) = obs;
    env::Action a = offline_rl::act_deterministic(bundle.agent, x);
    auto [obs2, done] = environment.step(a);
    auto c = static_cast<Eigen::Index>(i);
    out.s.col(c) = obs;
    if (disc) out.ad[i] = a.disc;
    else out.a.col(c) = a.cont;
    out.s2.col(c) = obs2;
    out.r[c] = env::task_reward(task, obs, a, obs2);
    obs = obs2;
    need_reset = done;
  }
  return out;
}

NormalizerState make_normalizer(const hilp::RunningStats& intrinsic, bool enabled) {
  if (enabled && intrinsic.count < 2)
    throw InsufficientStats("reward matching requires pretraining intrinsic statistics");
  NormalizerState state;
  state.intrinsic = intrinsic;
  state.enabled = enabled;
  return state;
}

}  // namespace u2o::bridge
