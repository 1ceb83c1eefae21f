#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "u2o/errors.hpp"
#include "u2o/rng.hpp"

namespace u2o::nn {

enum class Act { relu, tanh };
enum class OutAct { identity, tanh };

// widths = [in, h1, ..., out]. Policies that emit bounded actions squash with
// OutAct::tanh inside the net, so downstream code always sees final outputs.
struct MlpSpec {
  std::vector<int> widths;
  Act hidden = Act::relu;
  OutAct output = OutAct::identity;

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct Params {
  std::vector<Eigen::MatrixXd> w;  // w[l]: widths[l+1] x widths[l]
  std::vector<Eigen::VectorXd> b;  // b[l]: widths[l+1]

  void set_zero();
  std::size_t tensor_count() const { return w.size() + b.size(); }
};

// He-uniform weights (+-sqrt(6/fan_in)), zero biases. Each layer draws from its
// own derived stream so layer contents do not depend on network depth.
Params init_params(const MlpSpec& spec, std::uint64_t seed);
Params zeros_like(const Params& p);

// Forward activations kept for the backward pass. a[0] is the input;
// a[l+1] = act(z[l]); a.back() is the network output.
struct Cache {
  std::vector<Eigen::MatrixXd> z;
  std::vector<Eigen::MatrixXd> a;
};

// X is in_dim x batch (samples as columns). Returns a reference to cache.a.back().
const Eigen::MatrixXd& forward(const MlpSpec& spec, const Params& p, const Eigen::MatrixXd& X,
                               Cache& cache);
// Single-sample convenience (allocates its own cache).
Eigen::VectorXd forward1(const MlpSpec& spec, const Params& p, const Eigen::VectorXd& x);

// Output plus penultimate-layer activations (the layer feeding the output head).
// Throws NoPenultimateLayer for single-layer networks.
struct FeatureResult {
  Eigen::MatrixXd features;  // widths[L-1] x batch
  Eigen::MatrixXd output;    // widths[L] x batch
};
FeatureResult forward_with_features(const MlpSpec& spec, const Params& p, const Eigen::MatrixXd& X);

// Accumulates parameter gradients of sum_ij dY_ij * Y_ij into `grad`
// (grad must be zeroed or hold gradients to accumulate onto).
// If dX is non-null it receives the input gradient (overwritten, not accumulated).
void backward(const MlpSpec& spec, const Params& p, const Cache& cache, const Eigen::MatrixXd& dY,
              Params& grad, Eigen::MatrixXd* dX = nullptr);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with epsilon added outside the sqrt: p -= lr * mhat / (sqrt(vhat) + eps).
class Adam {
 public:
  Adam() = default;
  Adam(const Params& shape, AdamConfig cfg);
  void step(Params& p, const Params& grad);
  const AdamConfig& config() const { return cfg_; }
  std::int64_t t() const { return t_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  Params m_, v_;
};

// target <- (1 - rho) * target + rho * online
void polyak_update(Params& target, const Params& online, double rho);

// --- checkpoints ---------------------------------------------------------------
// Format: magic "U2O1", then per tensor: name_len u32 LE, name bytes, rank u32,
// dims (u32 each), row-major float32 payload. Read until EOF.
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, const Params*>>& nets);
// Loads into existing Params (shapes must match; values are the float32 payload
// widened back to double). Throws Error on malformed files or shape mismatch.
void load_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Params*>>& nets);

}  // namespace u2o::nn
