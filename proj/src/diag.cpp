#include "u2o/diag.hpp"

#include <cmath>

namespace u2o::diag {

PairBatch sample_consecutive_pairs(const env::TransitionDataset& data, std::size_t n,
                                   rng::Stream& stream) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i + 1 < data.size(); ++i)
    if (!data.done[i]) eligible.push_back(i);
  if (eligible.empty()) throw Error("dataset has no within-episode consecutive pairs");

  bool disc = data.spec.action_spec().type == env::ActionType::discrete;
  PairBatch batch;
  auto B = static_cast<Eigen::Index>(n);
  batch.s.resize(data.s.rows(), B);
  batch.s2.resize(data.s.rows(), B);
  if (disc) {
    batch.ad.resize(n);
    batch.ad2.resize(n);
  } else {
    batch.a.resize(data.a.rows(), B);
    batch.a2.resize(data.a.rows(), B);
  }
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t i = eligible[static_cast<std::size_t>(stream.bounded(eligible.size()))];
    auto c = static_cast<Eigen::Index>(k);
    auto ic = static_cast<Eigen::Index>(i);
    batch.s.col(c) = data.s.col(ic);
    batch.s2.col(c) = data.s.col(ic + 1);  // == s2.col(ic) within an episode
    if (disc) {
      batch.ad[k] = data.ad[i];
      batch.ad2[k] = data.ad[i + 1];
    } else {
      batch.a.col(c) = data.a.col(ic);
      batch.a2.col(c) = data.a.col(ic + 1);
    }
  }
  return batch;
}

namespace {

Eigen::MatrixXd critic_features(const offline_rl::Agent& agent, const Eigen::MatrixXd& S,
                                const Eigen::MatrixXd& A,
                                const std::optional<Eigen::VectorXd>& z) {
  Eigen::MatrixXd state = S;
  if (z) {
    state.conservativeResize(S.rows() + z->size(), Eigen::NoChange);
    state.bottomRows(z->size()).colwise() = *z;
  }
  Eigen::MatrixXd X = offline_rl::stack_rows(state, A);
  return nn::forward_with_features(agent.critics.spec, agent.critics.q1, X).features;
}

}  // namespace

double feature_dot_product(const offline_rl::Agent& agent, const PairBatch& batch,
                           const std::optional<Eigen::VectorXd>& z) {
  bool disc = agent.policy.discrete;
  Eigen::MatrixXd A1 = disc ? offline_rl::one_hot(batch.ad, agent.aspec.count)
                            : (batch.a / agent.aspec.high).eval();
  Eigen::MatrixXd A2 = disc ? offline_rl::one_hot(batch.ad2, agent.aspec.count)
                            : (batch.a2 / agent.aspec.high).eval();
  Eigen::MatrixXd f1 = critic_features(agent, batch.s, A1, z);
  Eigen::MatrixXd f2 = critic_features(agent, batch.s2, A2, z);
  return f1.cwiseProduct(f2).colwise().sum().mean();
}

namespace {

void two_pass(const std::vector<double>& xs, double& mean, double& std) {
  double n = static_cast<double>(xs.size());
  double sum = 0.0;
  for (double x : xs) sum += x;
  mean = sum / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  std = std::sqrt(ss / n);
}

}  // namespace

StreamStats reward_stats_probe(const std::vector<double>& stream, bridge::NormalizerState norm) {
  if (stream.empty()) throw Error("reward_stats_probe: empty stream");
  std::vector<double> normalized;
  normalized.reserve(stream.size());
  for (double r : stream) normalized.push_back(norm.match(r));
  StreamStats out;
  two_pass(stream, out.raw_mean, out.raw_std);
  two_pass(normalized, out.norm_mean, out.norm_std);
  return out;
}

StreamStats intrinsic_probe(const hilp::FeatureNet& net, const hilp::RunningStats& stats,
                            const env::TransitionDataset& data, std::size_t n,
                            rng::Stream& stream) {
  if (data.size() == 0) throw Error("intrinsic_probe: empty dataset");
  std::vector<double> raw(n), normalized(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto i = static_cast<Eigen::Index>(stream.bounded(data.size()));
    Eigen::VectorXd z = hilp::sample_skill(stream, net.d);
    raw[k] = hilp::intrinsic_reward(net, data.s.col(i), data.s2.col(i), z);
    normalized[k] = stats.normalize(raw[k]);
  }
  StreamStats out;
  two_pass(raw, out.raw_mean, out.raw_std);
  two_pass(normalized, out.norm_mean, out.norm_std);
  return out;
}

}  // namespace u2o::diag
