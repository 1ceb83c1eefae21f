#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "u2o/bridge.hpp"
#include "u2o/env.hpp"
#include "u2o/hilp.hpp"
#include "u2o/offline_rl.hpp"

namespace u2o::diag {

// Consecutive within-episode state-action pairs: a2 is the action actually
// taken at s2 in the dataset.
struct PairBatch {
  Eigen::MatrixXd s, s2;
  Eigen::MatrixXd a, a2;      // continuous
  std::vector<int> ad, ad2;   // discrete
  Eigen::Index size() const { return s.cols(); }
};

// n uniform draws (with replacement) over eligible consecutive pairs.
PairBatch sample_consecutive_pairs(const env::TransitionDataset& data, std::size_t n,
                                   rng::Stream& stream);

// Mean of zeta(s,a) . zeta(s2,a2) over the batch, where zeta is the first twin
// critic's penultimate layer; z (when given) is appended to both states.
double feature_dot_product(const offline_rl::Agent& agent, const PairBatch& batch,
                           const std::optional<Eigen::VectorXd>& z);

struct StreamStats {
  double raw_mean = 0.0, raw_std = 0.0;
  double norm_mean = 0.0, norm_std = 0.0;
};

// Two-pass statistics of the stream and of its match()-normalized image.
// The normalizer is taken by value: probing must not disturb live state.
StreamStats reward_stats_probe(const std::vector<double>& stream, bridge::NormalizerState norm);

// Fresh-probe statistics of normalized intrinsic rewards under frozen stats:
// n dataset transitions each scored with a freshly sampled skill.
StreamStats intrinsic_probe(const hilp::FeatureNet& net, const hilp::RunningStats& stats,
                            const env::TransitionDataset& data, std::size_t n,
                            rng::Stream& stream);

}  // namespace u2o::diag
