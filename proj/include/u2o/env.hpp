#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "u2o/errors.hpp"
#include "u2o/rng.hpp"

namespace u2o::env {

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

enum class ActionType { discrete, continuous };

struct ActionSpec {
  ActionType type = ActionType::discrete;
  int count = 0;     // discrete: number of actions
  int dim = 0;       // continuous: action dimension
  double high = 0.0; // continuous: per-dim magnitude bound
};

// Tagged union of the two action kinds; exactly one side is meaningful.
struct Action {
  int disc = -1;
  Eigen::VectorXd cont;
  static Action discrete(int a) {
    Action out;
    out.disc = a;
    return out;
  }
  static Action continuous(Eigen::VectorXd a) {
    Action out;
    out.cont = std::move(a);
    return out;
  }
};

struct EnvSpec {
  std::string env_id = "gridworld";  // "gridworld" | "pointmass"
  int grid_n = 5;                    // gridworld side length
  std::vector<Cell> walls;           // gridworld blocked cells (may be empty)
  int max_episode_len = 0;           // 0 -> per-env default

  bool is_grid() const { return env_id == "gridworld"; }
  int obs_dim() const { return 2; }
  ActionSpec action_spec() const;
  int episode_limit() const;
  // Name used in file names and dataset headers: "gridworld5", "pointmass".
  std::string canonical_id() const;
};

EnvSpec make_gridworld(int n, std::vector<Cell> walls = {});
EnvSpec make_pointmass();
EnvSpec spec_from_canonical_id(const std::string& id);

// --- gridworld geometry -----------------------------------------------------
// Discrete actions: 0 up (y-1), 1 down (y+1), 2 left (x-1), 3 right (x+1), 4 stay.
// Moves off the grid or into a wall leave the agent in place.
bool in_bounds(const EnvSpec& spec, Cell c);
bool is_free(const EnvSpec& spec, Cell c);
Cell grid_next(const EnvSpec& spec, Cell c, int action);
Eigen::Vector2d encode_cell(const EnvSpec& spec, Cell c);
Cell decode_cell(const EnvSpec& spec, const Eigen::Vector2d& obs);
// BFS over the environment's own dynamics; throws Unreachable if no path exists.
int shortest_path_distance(const EnvSpec& spec, Cell from, Cell to);

// --- tasks -------------------------------------------------------------------
enum class RewardKind { dense_negative_distance, sparse_goal };

struct Task {
  std::string task_id;
  Eigen::Vector2d goal;  // in observation units
  RewardKind kind = RewardKind::dense_negative_distance;
  double radius = 0.1;   // sparse reward radius; success radius for all kinds
  double gamma = 0.98;
};

std::vector<std::string> task_ids(const EnvSpec& spec);
Task make_task(const EnvSpec& spec, const std::string& task_id);
double task_reward(const Task& task, const Eigen::VectorXd& s, const Action& a,
                   const Eigen::VectorXd& s2);
// A step "succeeds" when it lands within the task radius of the goal.
bool task_success(const Task& task, const Eigen::VectorXd& s2);

// --- environment -------------------------------------------------------------
class Env {
 public:
  Env(EnvSpec spec, std::uint64_t seed);

  const EnvSpec& spec() const { return spec_; }
  Eigen::VectorXd reset();

  struct StepResult {
    Eigen::VectorXd obs;
    bool done = false;  // time-limit only; there is no terminal absorbing state
  };
  StepResult step(const Action& a);

  std::int64_t total_steps() const { return total_steps_; }
  int episode_steps() const { return episode_steps_; }
  bool in_episode() const { return in_episode_; }

 private:
  EnvSpec spec_;
  rng::Stream stream_;
  Eigen::VectorXd state_;
  Cell cell_{0, 0};
  bool in_episode_ = false;
  int episode_steps_ = 0;
  std::int64_t total_steps_ = 0;
};

// --- datasets ------------------------------------------------------------------
// Column-major SoA: column i of each matrix is transition i.
struct TransitionDataset {
  EnvSpec spec;
  Eigen::MatrixXd s;            // obs_dim x n
  Eigen::MatrixXd a;            // adim x n, continuous only (0 x n otherwise)
  std::vector<int> ad;          // discrete actions, empty for continuous
  Eigen::MatrixXd s2;           // obs_dim x n
  std::vector<std::uint8_t> done;
  // Derived episode structure (done flags are authoritative).
  std::vector<std::size_t> episode_start;
  std::vector<std::uint32_t> episode_of;

  std::size_t size() const { return static_cast<std::size_t>(s.cols()); }
  void rebuild_episode_index();
  // One-past-last transition index of the episode containing transition i.
  std::size_t episode_end(std::size_t i) const;
};

enum class Behavior { uniform_random, epsilon_random_walk };
Behavior behavior_from_string(const std::string& name);
std::string behavior_to_string(Behavior b);

TransitionDataset collect_offline_dataset(const EnvSpec& spec, std::size_t n, Behavior behavior,
                                          std::uint64_t seed);

// Reward-labeled subset used for skill identification.
enum class RewardProvenance { offline_subset, online_collected };

struct RewardDataset {
  Eigen::MatrixXd s;    // obs_dim x m
  Eigen::MatrixXd a;    // adim x m (continuous)
  std::vector<int> ad;  // discrete
  Eigen::MatrixXd s2;   // obs_dim x m
  Eigen::VectorXd r;
  RewardProvenance provenance = RewardProvenance::offline_subset;
  std::size_t size() const { return static_cast<std::size_t>(s.cols()); }
};

// ceil(fraction*n) transitions sampled without replacement, labeled with task_reward.
RewardDataset label_subset(const TransitionDataset& data, const Task& task, double fraction,
                           std::uint64_t seed);

// --- JSONL serialization -----------------------------------------------------
// One header object, then one object per transition. Floats are written as
// %.16e so files are byte-stable and round-trip exactly.
void save_dataset_jsonl(const TransitionDataset& data, const std::string& path);
TransitionDataset load_dataset_jsonl(const std::string& path);

}  // namespace u2o::env
