#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <vector>

#include "u2o/bridge.hpp"
#include "u2o/env.hpp"
#include "u2o/errors.hpp"
#include "u2o/hilp.hpp"
#include "u2o/offline_rl.hpp"

namespace u2o::finetune {

// Fixed-capacity ring; oldest evicted first. Continuous actions are stored in
// normalized units, observations without any skill suffix.
struct ReplayBuffer {
  ReplayBuffer(std::size_t capacity, int obs_dim, int adim);

  void add(const Eigen::VectorXd& s, const env::Action& a_norm, const Eigen::VectorXd& s2,
           double r, bool done);
  std::size_t size() const { return count_; }
  std::size_t capacity() const { return cap_; }
  std::int64_t inserted() const { return inserted_; }
  std::size_t sample(rng::Stream& stream) const;  // uniform index into [0, size())

  Eigen::MatrixXd s, s2, a;
  std::vector<int> ad;
  Eigen::VectorXd r;
  std::vector<std::uint8_t> done;

 private:
  std::size_t cap_ = 0;
  std::size_t count_ = 0;
  std::int64_t inserted_ = 0;
};

struct RunOptions {
  std::int64_t pretrain_steps = 100000;
  std::int64_t finetune_steps = 50000;
  int utd_ratio = 1;
  double offline_sample_fraction = 0.5;
  std::int64_t eval_interval = 2500;
  int eval_episodes = 50;
  bool transfer_value = true;
  bool transfer_policy = true;
  enum class Matching { automatic, on, off };
  Matching matching = Matching::automatic;  // automatic: dense tasks on, sparse off
  std::string bridge_method = "auto";       // auto | lsq | goal | random
  double bridge_fraction = 0.002;
  double bridge_ridge = 1e-6;
  std::string bridge_source = "offline";    // offline | online
  std::int64_t bridge_online_n = 10000;
  std::size_t buffer_capacity = 0;          // 0 -> finetune_steps
  std::size_t reward_tail = 0;              // keep last K (raw, matched) training rewards
};

struct MetricsRow {
  std::int64_t step = 0;  // gradient updates so far
  std::int64_t env_steps = 0;
  double eval_return = 0.0;
  double success_rate = 0.0;
  double critic_loss = 0.0;
  double value_loss = 0.0;
  double actor_loss = 0.0;
  double feature_dot = 0.0;
  double reward_raw_mean = 0.0;
  double reward_norm_mean = 0.0;
  double reward_norm_std = 0.0;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  std::optional<bridge::SkillIdentity> skill;
  offline_rl::Agent agent;
  std::vector<std::pair<double, double>> reward_tail;  // (raw, matched), oldest first
  std::int64_t online_env_steps = 0;
};

struct EvalResult {
  double mean_return = 0.0;
  double success_rate = 0.0;
};

using ActorFn = std::function<env::Action(const Eigen::VectorXd&)>;

// Deterministic rollouts; return = undiscounted task-reward sum; an episode
// succeeds if any step lands within the task radius of the goal.
EvalResult evaluate_policy(const env::EnvSpec& spec, const env::Task& task, const ActorFn& actor,
                           int n_episodes, std::uint64_t seed);
EvalResult evaluate_agent(const env::EnvSpec& spec, const env::Task& task,
                          const offline_rl::Agent& agent,
                          const std::optional<Eigen::VectorXd>& z, int n_episodes,
                          std::uint64_t seed);

// Supervised offline RL on the task-labeled dataset (labels computed on the fly).
offline_rl::Agent train_task_agent_offline(const env::EnvSpec& spec, const env::Task& task,
                                           const env::TransitionDataset& data,
                                           const offline_rl::TrainConfig& tcfg,
                                           std::int64_t n_steps, std::uint64_t seed,
                                           const hilp::PretrainHooks& hooks = {});

// Skill identification per opts.bridge_method ("auto": goal for sparse tasks,
// lsq for dense). reward_data, when given, overrides the lsq source.
bridge::SkillIdentity identify_skill(const env::EnvSpec& spec, const env::Task& task,
                                     const env::TransitionDataset& data,
                                     const hilp::PretrainBundle& bundle,
                                     const std::optional<env::RewardDataset>& reward_data,
                                     const RunOptions& opts, std::uint64_t seed);

// Bridging (skill identification + reward matching) followed by the online
// loop with the skill fixed. reward_data, when absent, is derived per
// opts.bridge_source. The train config is the bundle's.
RunResult run_u2o(const env::EnvSpec& spec, const env::Task& task,
                  const env::TransitionDataset& data, const hilp::PretrainBundle& bundle,
                  const std::optional<env::RewardDataset>& reward_data, const RunOptions& opts,
                  std::uint64_t seed);

// run_u2o with zero online steps: identify, evaluate, one row, no updates.
RunResult run_zero_shot(const env::EnvSpec& spec, const env::Task& task,
                        const env::TransitionDataset& data, const hilp::PretrainBundle& bundle,
                        const std::optional<env::RewardDataset>& reward_data,
                        const RunOptions& opts, std::uint64_t seed);

// Supervised offline pretraining then the same online loop, no skills, no
// reward matching. A pre-trained task agent may be injected (cache path).
RunResult run_o2o(const env::EnvSpec& spec, const env::Task& task,
                  const env::TransitionDataset& data, const offline_rl::TrainConfig& tcfg,
                  const RunOptions& opts, std::uint64_t seed,
                  const offline_rl::Agent* offline_agent = nullptr);

// run_o2o with pretrain_steps forced to zero.
RunResult run_scratch_with_data(const env::EnvSpec& spec, const env::Task& task,
                                const env::TransitionDataset& data,
                                const offline_rl::TrainConfig& tcfg, const RunOptions& opts,
                                std::uint64_t seed);

}  // namespace u2o::finetune
