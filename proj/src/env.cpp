#include "u2o/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <nlohmann/json.hpp>

namespace u2o::env {

using nlohmann::json;

ActionSpec EnvSpec::action_spec() const {
  ActionSpec out;
  if (is_grid()) {
    out.type = ActionType::discrete;
    out.count = 5;
  } else {
    out.type = ActionType::continuous;
    out.dim = 2;
    out.high = 0.1;
  }
  return out;
}

int EnvSpec::episode_limit() const {
  if (max_episode_len > 0) return max_episode_len;
  return is_grid() ? 40 : 50;
}

std::string EnvSpec::canonical_id() const {
  if (is_grid()) return "gridworld" + std::to_string(grid_n);
  return "pointmass";
}

EnvSpec make_gridworld(int n, std::vector<Cell> walls) {
  if (n < 2) throw Error("gridworld size must be >= 2");
  EnvSpec spec;
  spec.env_id = "gridworld";
  spec.grid_n = n;
  spec.walls = std::move(walls);
  for (const Cell& w : spec.walls)
    if (!in_bounds(spec, w)) throw Error("wall cell out of bounds");
  return spec;
}

EnvSpec make_pointmass() {
  EnvSpec spec;
  spec.env_id = "pointmass";
  return spec;
}

EnvSpec spec_from_canonical_id(const std::string& id) {
  if (id == "pointmass") return make_pointmass();
  const std::string prefix = "gridworld";
  if (id.rfind(prefix, 0) == 0 && id.size() > prefix.size()) {
    int n = std::stoi(id.substr(prefix.size()));
    return make_gridworld(n);
  }
  throw Error("unrecognized env id: " + id);
}

bool in_bounds(const EnvSpec& spec, Cell c) {
  return c.x >= 0 && c.y >= 0 && c.x < spec.grid_n && c.y < spec.grid_n;
}

bool is_free(const EnvSpec& spec, Cell c) {
  if (!in_bounds(spec, c)) return false;
  return std::find(spec.walls.begin(), spec.walls.end(), c) == spec.walls.end();
}

Cell grid_next(const EnvSpec& spec, Cell c, int action) {
  Cell n = c;
  switch (action) {
    case 0: n.y -= 1; break;  // up
    case 1: n.y += 1; break;  // down
    case 2: n.x -= 1; break;  // left
    case 3: n.x += 1; break;  // right
    case 4: break;            // stay
    default: throw Error("invalid gridworld action: " + std::to_string(action));
  }
  return is_free(spec, n) ? n : c;  // blocked moves keep the agent in place
}

Eigen::Vector2d encode_cell(const EnvSpec& spec, Cell c) {
  double n = static_cast<double>(spec.grid_n);
  return {static_cast<double>(c.x) / n, static_cast<double>(c.y) / n};
}

Cell decode_cell(const EnvSpec& spec, const Eigen::Vector2d& obs) {
  auto snap = [&](double v) {
    int i = static_cast<int>(std::lround(v * spec.grid_n));
    return std::clamp(i, 0, spec.grid_n - 1);
  };
  return {snap(obs.x()), snap(obs.y())};
}

int shortest_path_distance(const EnvSpec& spec, Cell from, Cell to) {
  if (!spec.is_grid()) throw Error("shortest_path_distance requires a gridworld");
  if (!is_free(spec, from) || !is_free(spec, to)) throw Error("path endpoint is not a free cell");
  if (from == to) return 0;
  const int n = spec.grid_n;
  std::vector<int> dist(static_cast<std::size_t>(n) * n, -1);
  auto at = [n](Cell c) { return static_cast<std::size_t>(c.y) * n + c.x; };
  std::deque<Cell> queue{from};
  dist[at(from)] = 0;
  while (!queue.empty()) {
    Cell c = queue.front();
    queue.pop_front();
    for (int a = 0; a < 4; ++a) {  // movement actions only; stay never helps
      Cell nc = grid_next(spec, c, a);
      if (dist[at(nc)] >= 0) continue;
      dist[at(nc)] = dist[at(c)] + 1;
      if (nc == to) return dist[at(nc)];
      queue.push_back(nc);
    }
  }
  throw Unreachable("no path between cells");
}

// --- tasks -------------------------------------------------------------------

std::vector<std::string> task_ids(const EnvSpec& spec) {
  if (spec.is_grid()) return {"goal_dense", "goal_sparse"};
  return {"reach_tl", "reach_tr", "reach_bl", "reach_br",
          "reach_tl_sparse", "reach_tr_sparse", "reach_bl_sparse", "reach_br_sparse"};
}

Task make_task(const EnvSpec& spec, const std::string& task_id) {
  Task t;
  t.task_id = task_id;
  t.gamma = 0.98;
  if (spec.is_grid()) {
    t.goal = encode_cell(spec, {spec.grid_n - 1, spec.grid_n - 1});
    t.radius = 0.5 / spec.grid_n;  // inside: same cell; outside: any neighbor
    if (task_id == "goal_dense") {
      t.kind = RewardKind::dense_negative_distance;
      return t;
    }
    if (task_id == "goal_sparse") {
      t.kind = RewardKind::sparse_goal;
      return t;
    }
    throw ConfigError("unknown task for " + spec.canonical_id() + ": " + task_id);
  }
  std::string base = task_id;
  t.kind = RewardKind::dense_negative_distance;
  const std::string suffix = "_sparse";
  if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
    t.kind = RewardKind::sparse_goal;
    base = base.substr(0, base.size() - suffix.size());
  }
  t.radius = 0.1;
  if (base == "reach_tl") t.goal = {0.0, 1.0};
  else if (base == "reach_tr") t.goal = {1.0, 1.0};
  else if (base == "reach_bl") t.goal = {0.0, 0.0};
  else if (base == "reach_br") t.goal = {1.0, 0.0};
  else throw ConfigError("unknown task for pointmass: " + task_id);
  return t;
}

double task_reward(const Task& task, const Eigen::VectorXd& /*s*/, const Action& /*a*/,
                   const Eigen::VectorXd& s2) {
  double dist = (s2.head<2>() - task.goal).norm();
  if (task.kind == RewardKind::sparse_goal) return dist <= task.radius ? 1.0 : 0.0;
  return -dist;
}

bool task_success(const Task& task, const Eigen::VectorXd& s2) {
  return (s2.head<2>() - task.goal).norm() <= task.radius;
}

// --- environment -------------------------------------------------------------

Env::Env(EnvSpec spec, std::uint64_t seed) : spec_(std::move(spec)), stream_(seed) {
  if (spec_.is_grid() && !is_free(spec_, {0, 0}) && spec_.walls.size() >= static_cast<std::size_t>(spec_.grid_n) * spec_.grid_n)
    throw Error("gridworld has no free cells");
}

Eigen::VectorXd Env::reset() {
  if (spec_.is_grid()) {
    do {
      cell_.x = static_cast<int>(stream_.bounded(spec_.grid_n));
      cell_.y = static_cast<int>(stream_.bounded(spec_.grid_n));
    } while (!is_free(spec_, cell_));
    state_ = encode_cell(spec_, cell_);
  } else {
    state_ = Eigen::Vector2d(0.5, 0.5);
  }
  in_episode_ = true;
  episode_steps_ = 0;
  return state_;
}

Env::StepResult Env::step(const Action& a) {
  if (!in_episode_) throw Error("step() called outside an episode; call reset() first");
  if (spec_.is_grid()) {
    if (a.disc < 0 || a.disc >= spec_.action_spec().count)
      throw Error("invalid discrete action: " + std::to_string(a.disc));
    cell_ = grid_next(spec_, cell_, a.disc);
    state_ = encode_cell(spec_, cell_);
  } else {
    if (a.cont.size() != 2) throw Error("pointmass action must have dim 2");
    double high = spec_.action_spec().high;
    Eigen::Vector2d delta = a.cont.head<2>().cwiseMax(-high).cwiseMin(high);
    state_ = (Eigen::Vector2d(state_.head<2>()) + delta).cwiseMax(0.0).cwiseMin(1.0);
  }
  ++episode_steps_;
  ++total_steps_;
  bool done = episode_steps_ >= spec_.episode_limit();
  if (done) in_episode_ = false;
  return {state_, done};
}

// --- datasets ------------------------------------------------------------------

void TransitionDataset::rebuild_episode_index() {
  std::size_t n = size();
  episode_start.clear();
  episode_of.assign(n, 0);
  bool at_start = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (at_start) {
      episode_start.push_back(i);
      at_start = false;
    }
    episode_of[i] = static_cast<std::uint32_t>(episode_start.size() - 1);
    if (done[i]) at_start = true;
  }
}

std::size_t TransitionDataset::episode_end(std::size_t i) const {
  std::uint32_t ep = episode_of[i];
  if (ep + 1 < episode_start.size()) return episode_start[ep + 1];
  return size();
}

Behavior behavior_from_string(const std::string& name) {
  if (name == "uniform_random") return Behavior::uniform_random;
  if (name == "epsilon_random_walk") return Behavior::epsilon_random_walk;
  throw ConfigError("unknown behavior policy: " + name);
}

std::string behavior_to_string(Behavior b) {
  return b == Behavior::uniform_random ? "uniform_random" : "epsilon_random_walk";
}

TransitionDataset collect_offline_dataset(const EnvSpec& spec, std::size_t n, Behavior behavior,
                                          std::uint64_t seed) {
  if (n == 0) throw Error("dataset size must be positive");
  Env env(spec, rng::derive(seed, "env"));
  rng::Stream beh(rng::derive(seed, "behavior"));
  ActionSpec aspec = spec.action_spec();
  bool disc = aspec.type == ActionType::discrete;

  TransitionDataset data;
  data.spec = spec;
  data.s.resize(spec.obs_dim(), static_cast<Eigen::Index>(n));
  data.s2.resize(spec.obs_dim(), static_cast<Eigen::Index>(n));
  if (disc) {
    data.ad.resize(n);
    data.a.resize(0, static_cast<Eigen::Index>(n));
  } else {
    data.a.resize(aspec.dim, static_cast<Eigen::Index>(n));
  }
  data.done.resize(n);

  auto fresh_action = [&]() {
    if (disc) return Action::discrete(static_cast<int>(beh.bounded(aspec.count)));
    Eigen::VectorXd a(aspec.dim);
    for (int d = 0; d < aspec.dim; ++d) a[d] = beh.uniform(-aspec.high, aspec.high);
    return Action::continuous(std::move(a));
  };

  Eigen::VectorXd obs = env.reset();
  Action cur;
  bool have_cur = false;
  constexpr double kResampleProb = 0.1;  // epsilon_random_walk persistence = 0.9
  for (std::size_t i = 0; i < n; ++i) {
    if (behavior == Behavior::uniform_random || !have_cur) {
      cur = fresh_action();
      have_cur = true;
    } else if (beh.uniform() < kResampleProb) {
      cur = fresh_action();
    }
    data.s.col(static_cast<Eigen::Index>(i)) = obs;
    if (disc) data.ad[i] = cur.disc;
    else data.a.col(static_cast<Eigen::Index>(i)) = cur.cont;
    auto [obs2, done] = env.step(cur);
    data.s2.col(static_cast<Eigen::Index>(i)) = obs2;
    data.done[i] = done ? 1 : 0;
    if (done) {
      obs = env.reset();
      have_cur = false;  // new episode starts with a fresh walk
    } else {
      obs = obs2;
    }
  }
  data.rebuild_episode_index();
  return data;
}

RewardDataset label_subset(const TransitionDataset& data, const Task& task, double fraction,
                           std::uint64_t seed) {
  std::size_t n = data.size();
  if (n == 0) throw Error("label_subset on empty dataset");
  if (!(fraction > 0.0) || fraction > 1.0) throw RangeViolation("label fraction must be in (0, 1]");
  auto m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  m = std::min(std::max<std::size_t>(m, 1), n);
  rng::Stream stream(seed);
  std::vector<std::size_t> idx = stream.sample_without_replacement(n, m);
  std::sort(idx.begin(), idx.end());

  bool disc = data.spec.action_spec().type == ActionType::discrete;
  RewardDataset out;
  out.s.resize(data.s.rows(), static_cast<Eigen::Index>(m));
  out.s2.resize(data.s2.rows(), static_cast<Eigen::Index>(m));
  if (disc) {
    out.ad.resize(m);
    out.a.resize(0, static_cast<Eigen::Index>(m));
  } else {
    out.a.resize(data.a.rows(), static_cast<Eigen::Index>(m));
  }
  out.r.resize(static_cast<Eigen::Index>(m));
  for (std::size_t k = 0; k < m; ++k) {
    auto i = static_cast<Eigen::Index>(idx[k]);
    auto j = static_cast<Eigen::Index>(k);
    out.s.col(j) = data.s.col(i);
    out.s2.col(j) = data.s2.col(i);
    Action act;
    if (disc) {
      out.ad[k] = data.ad[idx[k]];
      act = Action::discrete(data.ad[idx[k]]);
    } else {
      out.a.col(j) = data.a.col(i);
      act = Action::continuous(data.a.col(i));
    }
    out.r[j] = task_reward(task, data.s.col(i), act, data.s2.col(i));
  }
  return out;
}

// --- JSONL serialization -----------------------------------------------------

namespace {

void append_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.16e", v);
  out += buf;
}

void append_vec(std::string& out, const Eigen::Ref<const Eigen::VectorXd>& v) {
  out += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_double(out, v[i]);
  }
  out += ']';
}

}  // namespace

void save_dataset_jsonl(const TransitionDataset& data, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for writing: " + path);
  ActionSpec aspec = data.spec.action_spec();
  bool disc = aspec.type == ActionType::discrete;

  std::string line;
  line += "{\"env_id\":\"" + data.spec.canonical_id() + "\",\"obs_dim\":" +
          std::to_string(data.spec.obs_dim()) + ",\"action_spec\":";
  if (disc) {
    line += "{\"type\":\"discrete\",\"count\":" + std::to_string(aspec.count) + "}";
  } else {
    line += "{\"type\":\"continuous\",\"dim\":" + std::to_string(aspec.dim) + ",\"high\":";
    append_double(line, aspec.high);
    line += "}";
  }
  if (!data.spec.walls.empty()) {
    line += ",\"walls\":[";
    for (std::size_t i = 0; i < data.spec.walls.size(); ++i) {
      if (i) line += ',';
      line += '[' + std::to_string(data.spec.walls[i].x) + ',' +
              std::to_string(data.spec.walls[i].y) + ']';
    }
    line += ']';
  }
  line += ",\"max_episode_len\":" + std::to_string(data.spec.episode_limit());
  line += ",\"n\":" + std::to_string(data.size()) + "}\n";
  f << line;

  for (std::size_t i = 0; i < data.size(); ++i) {
    auto c = static_cast<Eigen::Index>(i);
    line.clear();
    line += "{\"s\":";
    append_vec(line, data.s.col(c));
    line += ",\"a\":";
    if (disc) line += std::to_string(data.ad[i]);
    else append_vec(line, data.a.col(c));
    line += ",\"s2\":";
    append_vec(line, data.s2.col(c));
    line += ",\"r\":null,\"done\":";
    line += data.done[i] ? "true" : "false";
    line += "}\n";
    f << line;
  }
  if (!f) throw Error("write failed: " + path);
}

TransitionDataset load_dataset_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error("empty dataset file: " + path);
  json header = json::parse(line);

  EnvSpec spec = spec_from_canonical_id(header.at("env_id").get<std::string>());
  if (header.contains("walls"))
    for (const auto& w : header["walls"]) spec.walls.push_back({w[0].get<int>(), w[1].get<int>()});
  if (header.contains("max_episode_len")) spec.max_episode_len = header["max_episode_len"].get<int>();
  int obs_dim = header.at("obs_dim").get<int>();
  if (obs_dim != spec.obs_dim()) throw Error("dataset obs_dim mismatch");
  const json& aj = header.at("action_spec");
  ActionSpec aspec = spec.action_spec();
  bool disc = aj.at("type").get<std::string>() == "discrete";
  if (disc != (aspec.type == ActionType::discrete)) throw Error("dataset action type mismatch");
  auto n = header.at("n").get<std::size_t>();

  TransitionDataset data;
  data.spec = spec;
  data.s.resize(obs_dim, static_cast<Eigen::Index>(n));
  data.s2.resize(obs_dim, static_cast<Eigen::Index>(n));
  if (disc) {
    data.ad.resize(n);
    data.a.resize(0, static_cast<Eigen::Index>(n));
  } else {
    data.a.resize(aj.at("dim").get<int>(), static_cast<Eigen::Index>(n));
  }
  data.done.resize(n);

  std::size_t i = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (i >= n) throw Error("dataset has more records than header n");
    json rec = json::parse(line);
    auto c = static_cast<Eigen::Index>(i);
    const auto& s = rec.at("s");
    const auto& s2 = rec.at("s2");
    for (int d = 0; d < obs_dim; ++d) {
      data.s(d, c) = s[d].get<double>();
      data.s2(d, c) = s2[d].get<double>();
    }
    if (disc) {
      data.ad[i] = rec.at("a").get<int>();
    } else {
      const auto& a = rec.at("a");
      for (Eigen::Index d = 0; d < data.a.rows(); ++d) data.a(d, c) = a[d].get<double>();
    }
    data.done[i] = rec.at("done").get<bool>() ? 1 : 0;
    ++i;
  }
  if (i != n) throw Error("dataset has fewer records than header n");
  data.rebuild_episode_index();
  return data;
}

}  // namespace u2o::env
