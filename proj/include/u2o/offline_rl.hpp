#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "u2o/env.hpp"
#include "u2o/errors.hpp"
#include "u2o/nn.hpp"
#include "u2o/rng.hpp"

namespace u2o::offline_rl {

enum class Backbone { iql, td3 };

struct TrainConfig {
  Backbone backbone = Backbone::iql;
  double gamma = 0.98;
  double expectile_tau = 0.7;
  double awr_temperature = 3.0;
  double polyak = 0.01;
  double lr_feature = 1e-3;
  double lr_critic = 3e-4;
  double lr_value = 3e-4;
  double lr_actor = 3e-4;
  int batch_size = 128;
  double td3_policy_noise = 0.2;    // in normalized action units
  double td3_noise_clip = 0.5;
  double td3_exploration_std = 0.2;
  double iql_log_std = -1.0;        // fixed Gaussian log-std of the IQL actor
  std::vector<int> hidden = {64, 64};
};

// Training minibatch, samples as columns. `s`/`s2` already carry any skill
// vector appended by the caller. Actions are in normalized units: one-hot is
// built on demand for discrete, continuous actions live in [-1, 1].
struct Batch {
  Eigen::MatrixXd s;
  Eigen::MatrixXd a;    // adim x B, continuous backbones
  std::vector<int> ad;  // discrete actions
  Eigen::MatrixXd s2;
  Eigen::VectorXd r;
  Eigen::VectorXd mask;  // bootstrap mask; 1 = bootstrap, 0 = true terminal
  Eigen::Index size() const { return s.cols(); }
};

// Asymmetric squared loss: |tau - 1(x<0)| * x^2.
inline double expectile_weight(double x, double tau) { return x < 0.0 ? 1.0 - tau : tau; }
inline double expectile_loss(double x, double tau) { return expectile_weight(x, tau) * x * x; }

struct CriticPair {
  nn::MlpSpec spec;  // input = state_dim + action_repr_dim
  nn::Params q1, q2, t1, t2;
};

struct Policy {
  nn::MlpSpec spec;  // discrete: logits head; continuous: tanh head
  bool discrete = false;
  nn::Params p;
  std::optional<nn::Params> target;  // td3 only
};

struct ValueNet {
  nn::MlpSpec spec;
  nn::Params p;
};

struct Agent {
  TrainConfig cfg;
  env::ActionSpec aspec;
  int state_dim = 0;  // policy input width (observation plus any skill dims)
  Policy policy;
  CriticPair critics;
  std::optional<ValueNet> value;  // iql only

  int action_repr_dim() const {
    return aspec.type == env::ActionType::discrete ? aspec.count : aspec.dim;
  }
};

Agent make_agent(int state_dim, const env::ActionSpec& aspec, const TrainConfig& cfg,
                 std::uint64_t seed);

struct Optimizers {
  nn::Adam actor, q1, q2, value;
};
Optimizers make_optimizers(const Agent& agent);

// --- batch plumbing ------------------------------------------------------------
Eigen::MatrixXd one_hot(const std::vector<int>& a, int k);
// Normalized action representation of the batch (one-hot or continuous).
Eigen::MatrixXd action_matrix(const Agent& agent, const Batch& batch);
// [S; A] stacked rows for critic input.
Eigen::MatrixXd stack_rows(const Eigen::MatrixXd& top, const Eigen::MatrixXd& bottom);

// --- losses --------------------------------------------------------------------
// Each *_grad overwrites the passed gradient buffers with the exact gradient of
// the returned loss and throws NumericalFailure on non-finite values.

// Mean over batch and twins of (r + gamma*mask*V(s2) - Q(s,a))^2.
double iql_q_loss(const Agent& agent, const Batch& batch);
double iql_q_loss_grad(const Agent& agent, const Batch& batch, nn::Params& g1, nn::Params& g2);

// Mean expectile loss of min-twin-target-Q(s,a) - V(s).
double iql_v_loss(const Agent& agent, const Batch& batch);
double iql_v_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gv);

// -mean(w * log pi(a|s)), w = min(exp(beta*(minQ(s,a) - V(s))), 100), online critics.
double awr_actor_loss(const Agent& agent, const Batch& batch);
double awr_actor_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gp);

// noise: adim x B standard normals, scaled/clipped inside.
double td3_critic_loss(const Agent& agent, const Batch& batch, const Eigen::MatrixXd& noise);
double td3_critic_loss_grad(const Agent& agent, const Batch& batch, const Eigen::MatrixXd& noise,
                            nn::Params& g1, nn::Params& g2);

// -mean Q1(s, pi(s)).
double ddpg_actor_loss(const Agent& agent, const Batch& batch);
double ddpg_actor_loss_grad(const Agent& agent, const Batch& batch, nn::Params& gp);

struct LossReport {
  double critic = 0.0;
  double value = 0.0;
  double actor = 0.0;
};

// One optimization round: IQL does value -> critic -> actor -> Polyak(critic
// targets); TD3 does critic -> actor -> Polyak(critic + actor targets). The
// stream only feeds TD3 target-policy smoothing noise.
LossReport update_step(Agent& agent, Optimizers& opt, const Batch& batch, rng::Stream& stream);

// --- checkpointing -----------------------------------------------------------------
// dir/agent.ckpt + dir/agent_meta.json; round-trips through f32 tensors.
void save_agent(const Agent& agent, const std::string& dir);
Agent load_agent(const std::string& dir);

// --- acting ----------------------------------------------------------------------
// x is the policy input (observation plus skill). Returned actions are in
// environment units.
env::Action act_deterministic(const Agent& agent, const Eigen::VectorXd& x);
env::Action act_exploring(const Agent& agent, const Eigen::VectorXd& x, rng::Stream& stream);
int policy_argmax(const Agent& agent, const Eigen::VectorXd& x);

}  // namespace u2o::offline_rl
