#include "u2o/finetune.hpp"

#include <deque>

#include "u2o/diag.hpp"

namespace u2o::finetune {

ReplayBuffer::ReplayBuffer(std::size_t capacity, int obs_dim, int adim)
    : cap_(std::max<std::size_t>(capacity, 1)) {
  auto c = static_cast<Eigen::Index>(cap_);
  s.resize(obs_dim, c);
  s2.resize(obs_dim, c);
  if (adim > 0) a.resize(adim, c);
  else ad.assign(cap_, 0);
  r.resize(c);
  done.assign(cap_, 0);
}

void ReplayBuffer::add(const Eigen::VectorXd& s_, const env::Action& a_norm,
                       const Eigen::VectorXd& s2_, double r_, bool done_) {
  auto pos = static_cast<std::size_t>(inserted_ % static_cast<std::int64_t>(cap_));
  auto p = static_cast<Eigen::Index>(pos);
  s.col(p) = s_;
  s2.col(p) = s2_;
  if (a.rows() > 0) a.col(p) = a_norm.cont;
  else ad[pos] = a_norm.disc;
  r[p] = r_;
  done[pos] = done_ ? 1 : 0;
  ++inserted_;
  if (count_ < cap_) ++count_;
}

std::size_t ReplayBuffer::sample(rng::Stream& stream) const {
  if (count_ == 0) throw Error("sampling from an empty replay buffer");
  return static_cast<std::size_t>(stream.bounded(count_));
}

EvalResult evaluate_policy(const env::EnvSpec& spec, const env::Task& task, const ActorFn& actor,
                           int n_episodes, std::uint64_t seed) {
  if (n_episodes < 1) throw Error("evaluate_policy needs at least one episode");
  env::Env environment(spec, rng::derive(seed, "eval_env"));
  double return_sum = 0.0;
  double success_sum = 0.0;
  for (int ep = 0; ep < n_episodes; ++ep) {
    Eigen::VectorXd obs = environment.reset();
    bool success = false;
    double ep_return = 0.0;
    while (true) {
      env::Action a = actor(obs);
      auto [obs2, done] = environment.step(a);
      ep_return += env::task_reward(task, obs, a, obs2);
      success = success || env::task_success(task, obs2);
      obs = obs2;
      if (done) break;
    }
    return_sum += ep_return;
    success_sum += success ? 1.0 : 0.0;
  }
  double n = static_cast<double>(n_episodes);
  return {return_sum / n, success_sum / n};
}

EvalResult evaluate_agent(const env::EnvSpec& spec, const env::Task& task,
                          const offline_rl::Agent& agent,
                          const std::optional<Eigen::VectorXd>& z, int n_episodes,
                          std::uint64_t seed) {
  int obs_dim = spec.obs_dim();
  Eigen::VectorXd x(obs_dim + (z ? z->size() : 0));
  if (z) x.tail(z->size()) = *z;
  ActorFn actor = [&](const Eigen::VectorXd& obs) {
    x.head(obs_dim) = obs;
    return offline_rl::act_deterministic(agent, x);
  };
  return evaluate_policy(spec, task, actor, n_episodes, seed);
}

offline_rl::Agent train_task_agent_offline(const env::EnvSpec& spec, const env::Task& task,
                                           const env::TransitionDataset& data,
                                           const offline_rl::TrainConfig& tcfg,
                                           std::int64_t n_steps, std::uint64_t seed,
                                           const hilp::PretrainHooks& hooks) {
  env::ActionSpec aspec = spec.action_spec();
  bool disc = aspec.type == env::ActionType::discrete;
  offline_rl::Agent agent =
      offline_rl::make_agent(spec.obs_dim(), aspec, tcfg, rng::derive(seed, "agent"));
  offline_rl::Optimizers opt = offline_rl::make_optimizers(agent);
  rng::Stream batch_stream(rng::derive(seed, "batch"));
  rng::Stream update_stream(rng::derive(seed, "update"));

  auto B = static_cast<Eigen::Index>(tcfg.batch_size);
  offline_rl::Batch batch;
  batch.s.resize(spec.obs_dim(), B);
  batch.s2.resize(spec.obs_dim(), B);
  if (disc) batch.ad.resize(static_cast<std::size_t>(B));
  else batch.a.resize(aspec.dim, B);
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);

  offline_rl::LossReport acc;
  hilp::RunningStats racc;
  std::int64_t acc_n = 0;
  for (std::int64_t t = 1; t <= n_steps; ++t) {
    for (Eigen::Index c = 0; c < B; ++c) {
      auto i = static_cast<Eigen::Index>(batch_stream.bounded(data.size()));
      batch.s.col(c) = data.s.col(i);
      batch.s2.col(c) = data.s2.col(i);
      env::Action act;
      if (disc) {
        batch.ad[static_cast<std::size_t>(c)] = data.ad[static_cast<std::size_t>(i)];
        act = env::Action::discrete(data.ad[static_cast<std::size_t>(i)]);
      } else {
        batch.a.col(c) = data.a.col(i) / aspec.high;
        act = env::Action::continuous(data.a.col(i));
      }
      batch.r[c] = env::task_reward(task, data.s.col(i), act, data.s2.col(i));
      racc.update(batch.r[c]);
    }
    offline_rl::LossReport rep = offline_rl::update_step(agent, opt, batch, update_stream);
    acc.critic += rep.critic;
    acc.value += rep.value;
    acc.actor += rep.actor;
    ++acc_n;
    if (hooks.sink && (t % hooks.interval == 0 || t == n_steps)) {
      hilp::PretrainProgress prog;
      prog.step = t;
      double k = static_cast<double>(acc_n);
      prog.losses = {acc.critic / k, acc.value / k, acc.actor / k};
      prog.reward_raw_mean = racc.mean;
      prog.reward_norm_mean = racc.mean;  // no normalization in the supervised phase
      prog.reward_norm_std = racc.stddev();
      prog.agent = &agent;
      hooks.sink(prog);
      acc = {};
      racc = {};
      acc_n = 0;
    }
  }
  return agent;
}

namespace {

struct LoopSetup {
  offline_rl::Agent agent;
  std::optional<Eigen::VectorXd> z;
  std::optional<bridge::NormalizerState> normalizer;
  std::optional<bridge::SkillIdentity> skill;
};

RunResult online_loop(const env::EnvSpec& spec, const env::Task& task,
                      const env::TransitionDataset& data, LoopSetup setup, const RunOptions& opts,
                      std::uint64_t seed) {
  if (opts.utd_ratio < 1) throw RangeViolation("utd_ratio must be >= 1");
  if (opts.offline_sample_fraction < 0.0 || opts.offline_sample_fraction > 1.0)
    throw RangeViolation("offline_sample_fraction must be in [0, 1]");
  if (opts.eval_interval < 1) throw RangeViolation("eval_interval must be >= 1");

  env::ActionSpec aspec = spec.action_spec();
  bool disc = aspec.type == env::ActionType::discrete;
  int obs_dim = spec.obs_dim();
  int zdim = setup.z ? static_cast<int>(setup.z->size()) : 0;

  offline_rl::Agent agent = std::move(setup.agent);
  offline_rl::Optimizers opt = offline_rl::make_optimizers(agent);

  rng::Stream explore_stream(rng::derive(seed, "explore"));
  rng::Stream batch_stream(rng::derive(seed, "batch"));
  rng::Stream update_stream(rng::derive(seed, "update"));
  rng::Stream probe_stream(rng::derive(seed, "probe"));
  std::uint64_t eval_seed = rng::derive(seed, "eval");

  diag::PairBatch probe = diag::sample_consecutive_pairs(data, 1024, probe_stream);

  RunResult result;
  result.skill = setup.skill;

  offline_rl::LossReport loss_acc;
  std::int64_t loss_n = 0;
  hilp::RunningStats raw_acc, norm_acc;
  std::deque<std::pair<double, double>> tail;

  auto emit_row = [&](std::int64_t t) {
    MetricsRow row;
    row.step = t * opts.utd_ratio;
    row.env_steps = t;
    EvalResult ev = evaluate_agent(spec, task, agent, setup.z, opts.eval_episodes,
                                   rng::derive(eval_seed, result.rows.size()));
    row.eval_return = ev.mean_return;
    row.success_rate = ev.success_rate;
    if (loss_n > 0) {
      double k = static_cast<double>(loss_n);
      row.critic_loss = loss_acc.critic / k;
      row.value_loss = loss_acc.value / k;
      row.actor_loss = loss_acc.actor / k;
    }
    row.feature_dot = diag::feature_dot_product(agent, probe, setup.z);
    if (raw_acc.count > 0) {
      row.reward_raw_mean = raw_acc.mean;
      row.reward_norm_mean = norm_acc.mean;
      row.reward_norm_std = norm_acc.stddev();
    }
    result.rows.push_back(row);
    loss_acc = {};
    loss_n = 0;
    raw_acc = {};
    norm_acc = {};
  };

  emit_row(0);
  if (opts.finetune_steps == 0) {
    result.agent = std::move(agent);
    return result;
  }

  std::size_t cap = opts.buffer_capacity > 0 ? opts.buffer_capacity
                                             : static_cast<std::size_t>(opts.finetune_steps);
  ReplayBuffer buf(cap, obs_dim, disc ? 0 : aspec.dim);

  auto B = static_cast<Eigen::Index>(agent.cfg.batch_size);
  offline_rl::Batch batch;
  batch.s.resize(obs_dim + zdim, B);
  batch.s2.resize(obs_dim + zdim, B);
  if (setup.z) {
    batch.s.bottomRows(zdim).colwise() = *setup.z;
    batch.s2.bottomRows(zdim).colwise() = *setup.z;
  }
  if (disc) batch.ad.resize(static_cast<std::size_t>(B));
  else batch.a.resize(aspec.dim, B);
  batch.r.resize(B);
  batch.mask = Eigen::VectorXd::Ones(B);

  env::Env environment(spec, rng::derive(seed, "env"));
  Eigen::VectorXd x(obs_dim + zdim);
  if (setup.z) x.tail(zdim) = *setup.z;
  Eigen::VectorXd obs;
  bool need_reset = true;

  for (std::int64_t t = 1; t <= opts.finetune_steps; ++t) {
    if (need_reset) {
      obs = environment.reset();
      need_reset = false;
    }
    x.head(obs_dim) = obs;
    env::Action a_env = offline_rl::act_exploring(agent, x, explore_stream);
    auto [obs2, done] = environment.step(a_env);
    double r_raw = env::task_reward(task, obs, a_env, obs2);
    env::Action a_norm = a_env;
    if (!disc) a_norm.cont = a_env.cont / aspec.high;
    buf.add(obs, a_norm, obs2, r_raw, done);
    obs = obs2;
    need_reset = done;

    for (int u = 0; u < opts.utd_ratio; ++u) {
      for (Eigen::Index c = 0; c < B; ++c) {
        double r_i;
        if (batch_stream.uniform() < opts.offline_sample_fraction) {
          auto i = static_cast<Eigen::Index>(batch_stream.bounded(data.size()));
          batch.s.col(c).head(obs_dim) = data.s.col(i);
          batch.s2.col(c).head(obs_dim) = data.s2.col(i);
          env::Action act;
          if (disc) {
            int ai = data.ad[static_cast<std::size_t>(i)];
            batch.ad[static_cast<std::size_t>(c)] = ai;
            act = env::Action::discrete(ai);
          } else {
            batch.a.col(c) = data.a.col(i) / aspec.high;
            act = env::Action::continuous(data.a.col(i));
          }
          r_i = env::task_reward(task, data.s.col(i), act, data.s2.col(i));
        } else {
          std::size_t j = buf.sample(batch_stream);
          auto jc = static_cast<Eigen::Index>(j);
          batch.s.col(c).head(obs_dim) = buf.s.col(jc);
          batch.s2.col(c).head(obs_dim) = buf.s2.col(jc);
          if (disc) batch.ad[static_cast<std::size_t>(c)] = buf.ad[j];
          else batch.a.col(c) = buf.a.col(jc);
          r_i = buf.r[jc];
        }
        double r_used = setup.normalizer ? setup.normalizer->match(r_i) : r_i;
        batch.r[c] = r_used;
        raw_acc.update(r_i);
        norm_acc.update(r_used);
        if (opts.reward_tail > 0) {
          tail.emplace_back(r_i, r_used);
          if (tail.size() > opts.reward_tail) tail.pop_front();
        }
      }
      offline_rl::LossReport rep = offline_rl::update_step(agent, opt, batch, update_stream);
      loss_acc.critic += rep.critic;
      loss_acc.value += rep.value;
      loss_acc.actor += rep.actor;
      ++loss_n;
    }

    if (t % opts.eval_interval == 0 || t == opts.finetune_steps) emit_row(t);
  }

  result.online_env_steps = environment.total_steps();
  result.reward_tail.assign(tail.begin(), tail.end());
  result.agent = std::move(agent);
  return result;
}

bool matching_enabled(const env::Task& task, const RunOptions& opts) {
  switch (opts.matching) {
    case RunOptions::Matching::on: return true;
    case RunOptions::Matching::off: return false;
    default: return task.kind == env::RewardKind::dense_negative_distance;
  }
}

}  // namespace

bridge::SkillIdentity identify_skill(const env::EnvSpec& spec, const env::Task& task,
                                     const env::TransitionDataset& data,
                                     const hilp::PretrainBundle& bundle,
                                     const std::optional<env::RewardDataset>& reward_data,
                                     const RunOptions& opts, std::uint64_t seed) {
  std::string method = opts.bridge_method;
  if (method == "auto")
    method = task.kind == env::RewardKind::sparse_goal ? "goal" : "lsq";
  if (method == "goal") {
    env::Env ref_env(spec, rng::derive(seed, "sref"));
    // The reference embedding must differ from the goal's; an unlucky initial
    // draw (e.g. the goal cell itself) is redrawn rather than failing the run.
    // A collapsed feature map still signals GoalIndistinct once the budget is
    // spent.
    Eigen::VectorXd s_ref = ref_env.reset();
    Eigen::VectorXd fg = nn::forward1(bundle.feature.spec, bundle.feature.p, task.goal);
    for (int attempt = 0; attempt < 16; ++attempt) {
      double gap =
          (fg - nn::forward1(bundle.feature.spec, bundle.feature.p, s_ref)).norm();
      if (gap >= 1e-8) break;
      s_ref = ref_env.reset();
    }
    return bridge::identify_skill_goal(bundle.feature, s_ref, task.goal);
  }
  if (method == "random") {
    rng::Stream stream(rng::derive(seed, "zrand"));
    return bridge::identify_skill_random(stream, bundle.d);
  }
  if (method != "lsq") throw ConfigError("unknown skill identification method: " + method);
  if (reward_data) return bridge::identify_skill_lsq(*reward_data, bundle.feature, opts.bridge_ridge);
  if (opts.bridge_source == "online") {
    env::RewardDataset collected = bridge::collect_reward_dataset_online(
        spec, task, bundle, static_cast<std::size_t>(opts.bridge_online_n),
        rng::derive(seed, "collect"));
    return bridge::identify_skill_lsq(collected, bundle.feature, opts.bridge_ridge);
  }
  env::RewardDataset labeled =
      env::label_subset(data, task, opts.bridge_fraction, rng::derive(seed, "label"));
  return bridge::identify_skill_lsq(labeled, bundle.feature, opts.bridge_ridge);
}

RunResult run_u2o(const env::EnvSpec& spec, const env::Task& task,
                  const env::TransitionDataset& data, const hilp::PretrainBundle& bundle,
                  const std::optional<env::RewardDataset>& reward_data, const RunOptions& opts,
                  std::uint64_t seed) {
  if (bundle.agent.state_dim != spec.obs_dim() + bundle.d)
    throw Error("pretrained bundle does not match this environment");
  LoopSetup setup;
  setup.skill = identify_skill(spec, task, data, bundle, reward_data, opts, seed);
  setup.z = setup.skill->z_star;
  setup.normalizer = bridge::make_normalizer(bundle.stats, matching_enabled(task, opts));
  setup.agent = bundle.agent;
  if (!opts.transfer_policy || !opts.transfer_value) {
    offline_rl::Agent fresh = offline_rl::make_agent(bundle.agent.state_dim, bundle.agent.aspec,
                                                     bundle.agent.cfg, rng::derive(seed, "reinit"));
    if (!opts.transfer_policy) setup.agent.policy = fresh.policy;
    if (!opts.transfer_value) {
      setup.agent.critics = fresh.critics;
      setup.agent.value = fresh.value;
    }
  }
  return online_loop(spec, task, data, std::move(setup), opts, seed);
}

RunResult run_zero_shot(const env::EnvSpec& spec, const env::Task& task,
                        const env::TransitionDataset& data, const hilp::PretrainBundle& bundle,
                        const std::optional<env::RewardDataset>& reward_data,
                        const RunOptions& opts, std::uint64_t seed) {
  RunOptions frozen = opts;
  frozen.finetune_steps = 0;
  frozen.transfer_policy = true;
  frozen.transfer_value = true;
  return run_u2o(spec, task, data, bundle, reward_data, frozen, seed);
}

RunResult run_o2o(const env::EnvSpec& spec, const env::Task& task,
                  const env::TransitionDataset& data, const offline_rl::TrainConfig& tcfg,
                  const RunOptions& opts, std::uint64_t seed,
                  const offline_rl::Agent* offline_agent) {
  LoopSetup setup;
  if (offline_agent) setup.agent = *offline_agent;
  else
    setup.agent = train_task_agent_offline(spec, task, data, tcfg, opts.pretrain_steps,
                                           rng::derive(seed, "offline"));
  return online_loop(spec, task, data, std::move(setup), opts, seed);
}

RunResult run_scratch_with_data(const env::EnvSpec& spec, const env::Task& task,
                                const env::TransitionDataset& data,
                                const offline_rl::TrainConfig& tcfg, const RunOptions& opts,
                                std::uint64_t seed) {
  RunOptions scratch = opts;
  scratch.pretrain_steps = 0;
  return run_o2o(spec, task, data, tcfg, scratch, seed);
}

}  // namespace u2o::finetune
