#pragma once

#include <Eigen/Dense>
#include <string>

#include "u2o/env.hpp"
#include "u2o/errors.hpp"
#include "u2o/hilp.hpp"
#include "u2o/rng.hpp"

namespace u2o::bridge {

enum class IdentifyMethod { lsq, goal, random };
IdentifyMethod identify_method_from_string(const std::string& name);
std::string identify_method_to_string(IdentifyMethod m);

struct SkillIdentity {
  Eigen::VectorXd z_star;  // unit norm
  double residual = 0.0;   // mean squared regression error of the unnormalized solution
  IdentifyMethod method = IdentifyMethod::lsq;
};

// Closed-form ridge regression (F'F + ridge*I) z = F'r over successor features,
// then unit-renormalized. Throws DegenerateReward when the unnormalized
// solution is numerically zero.
SkillIdentity identify_skill_lsq(const env::RewardDataset& data, const hilp::FeatureNet& net,
                                 double ridge);

// z* along the feature displacement from a reference state to the goal.
SkillIdentity identify_skill_goal(const hilp::FeatureNet& net, const Eigen::VectorXd& s_ref,
                                  const Eigen::VectorXd& g);

SkillIdentity identify_skill_random(rng::Stream& stream, int d);

std::string identity_to_json(const SkillIdentity& id);

// Roll out the pretrained skill policy with a fresh random skill per episode,
// labeling transitions with the task reward. Returns exactly n transitions.
env::RewardDataset collect_reward_dataset_online(const env::EnvSpec& spec, const env::Task& task,
                                                 const hilp::PretrainBundle& bundle,
                                                 std::size_t n, std::uint64_t seed);

// Reward scale matching (streaming task statistics against frozen intrinsic
// statistics). match() updates task stats with the raw reward BEFORE
// normalizing; returns 0 until two samples are seen; identity when disabled.
struct NormalizerState {
  hilp::RunningStats intrinsic;
  hilp::RunningStats task;
  bool enabled = true;

  double match(double r) {
    if (!enabled) return r;
    task.update(r);
    if (task.count < 2) return 0.0;
    return (r - task.mean) / (task.stddev() + 1e-8);
  }
};

NormalizerState make_normalizer(const hilp::RunningStats& intrinsic, bool enabled);

}  // namespace u2o::bridge
