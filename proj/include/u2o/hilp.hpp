#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>

#include "u2o/env.hpp"
#include "u2o/errors.hpp"
#include "u2o/nn.hpp"
#include "u2o/offline_rl.hpp"
#include "u2o/rng.hpp"

namespace u2o::hilp {

// Welford single-pass statistics; population variance.
struct RunningStats {
  std::int64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void update(double x) {
    ++count;
    double d1 = x - mean;
    mean += d1 / static_cast<double>(count);
    m2 += d1 * (x - mean);
  }
  double variance() const { return count > 0 ? m2 / static_cast<double>(count) : 0.0; }
  double stddev() const { return std::sqrt(variance()); }
  double normalize(double x) const {
    if (count < 2) throw InsufficientStats("normalize requires at least 2 samples");
    return (x - mean) / (stddev() + 1e-8);
  }
};

struct HilpConfig {
  int d = 8;
  std::int64_t feature_steps = 20000;
  double gamma = 0.98;     // discount of the goal-reaching value problem
  double expectile = 0.9;  // tau of the feature TD loss
  double polyak = 0.005;   // feature target update rate
};

// Embedding xi plus its Polyak target. V(s,g) := -|xi(s)-xi(g)|_2.
struct FeatureNet {
  nn::MlpSpec spec;
  nn::Params p;
  nn::Params target;
  int d = 0;
};

Eigen::MatrixXd features(const FeatureNet& net, const Eigen::MatrixXd& S);
double hilbert_value(const FeatureNet& net, const Eigen::VectorXd& s, const Eigen::VectorXd& g);

// Goal-relabeled minibatch for feature training. r = 0 and mask = 0 where s2
// matches g (within the env's goal tolerance), else r = -1, mask = 1.
struct GoalBatch {
  Eigen::MatrixXd s, s2, g;
  Eigen::VectorXd r;
  Eigen::VectorXd mask;
  Eigen::Index size() const { return s.cols(); }
};

bool goal_match(const env::EnvSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& s2,
                const Eigen::Ref<const Eigen::VectorXd>& g);

// Mixture per element: current s2 (p=0.2), geometrically-skewed future state of
// the same episode (p=0.5), uniform random dataset state (p=0.3).
GoalBatch sample_goal_batch(const env::TransitionDataset& data, int batch_size, double gamma_h,
                            rng::Stream& stream);

// Expectile TD loss of V(s,g) against r + gamma*mask*V_target(s2,g).
double hilbert_loss(const FeatureNet& net, const GoalBatch& batch, double tau, double gamma);
double hilbert_loss_grad(const FeatureNet& net, const GoalBatch& batch, double tau, double gamma,
                         nn::Params& grad);

// Progress callback shared by both pretraining stages. `agent` is null during
// the feature stage; reward stats cover the interval since the previous call.
struct PretrainProgress {
  std::int64_t step = 0;
  bool feature_stage = false;
  double feature_loss = 0.0;
  offline_rl::LossReport losses;
  double reward_raw_mean = 0.0;
  double reward_norm_mean = 0.0;
  double reward_norm_std = 0.0;
  const FeatureNet* feature = nullptr;
  const offline_rl::Agent* agent = nullptr;
  const RunningStats* stats = nullptr;
};
using PretrainHook = std::function<void(const PretrainProgress&)>;

struct PretrainHooks {
  std::int64_t interval = 2500;
  PretrainHook sink;
};

FeatureNet train_hilbert_features(const env::TransitionDataset& data, const HilpConfig& hcfg,
                                  const offline_rl::TrainConfig& tcfg, std::uint64_t seed,
                                  const PretrainHooks& hooks = {});

Eigen::MatrixXd successor_features(const FeatureNet& net, const Eigen::MatrixXd& S,
                                   const Eigen::MatrixXd& S2);
Eigen::VectorXd successor_feature(const FeatureNet& net, const Eigen::VectorXd& s,
                                  const Eigen::VectorXd& s2);
double intrinsic_reward(const FeatureNet& net, const Eigen::VectorXd& s,
                        const Eigen::VectorXd& s2, const Eigen::VectorXd& z);
// Uniform on the unit sphere; redraws on an exactly-zero Gaussian vector.
Eigen::VectorXd sample_skill(rng::Stream& stream, int d);

struct PretrainBundle {
  env::EnvSpec spec;
  FeatureNet feature;
  offline_rl::Agent agent;  // skill-conditioned: state_dim = obs_dim + d
  RunningStats stats;
  int d = 0;
};

// Two sequential stages: features (unless `pre` is given), then skill-policy
// training on normalized intrinsic rewards. Deterministic given seed.
PretrainBundle pretrain_skills(const env::TransitionDataset& data, const HilpConfig& hcfg,
                               const offline_rl::TrainConfig& tcfg, std::int64_t n_steps,
                               std::uint64_t seed, std::optional<FeatureNet> pre = std::nullopt,
                               const PretrainHooks& hooks = {});

// Directory layout: feature.ckpt, agent.ckpt, stats.json, meta.json.
void save_bundle(const PretrainBundle& bundle, const std::string& dir);
PretrainBundle load_bundle(const std::string& dir);

}  // namespace u2o::hilp
