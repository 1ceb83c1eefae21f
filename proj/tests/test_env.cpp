#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "u2o/env.hpp"

using namespace u2o;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

std::string tmp_path(const std::string& name) {
  return std::string("/tmp/u2o_test_") + name;
}

}  // namespace

TEST_CASE("spec basics") {
  env::EnvSpec grid = env::make_gridworld(5);
  CHECK(grid.canonical_id() == "gridworld5");
  CHECK(grid.obs_dim() == 2);
  CHECK(grid.episode_limit() == 40);
  CHECK(grid.action_spec().type == env::ActionType::discrete);
  CHECK(grid.action_spec().count == 5);

  env::EnvSpec pm = env::make_pointmass();
  CHECK(pm.canonical_id() == "pointmass");
  CHECK(pm.episode_limit() == 50);
  CHECK(pm.action_spec().type == env::ActionType::continuous);
  CHECK(pm.action_spec().dim == 2);
  CHECK(pm.action_spec().high == 0.1);

  CHECK(env::spec_from_canonical_id("gridworld7").grid_n == 7);
  CHECK(env::spec_from_canonical_id("pointmass").env_id == "pointmass");
  CHECK_THROWS_AS(env::spec_from_canonical_id("mountaincar"), Error);
  CHECK_THROWS_AS(env::make_gridworld(1), Error);
  CHECK_THROWS_AS(env::make_gridworld(5, {{9, 0}}), Error);
}

TEST_CASE("cell encoding round trip") {
  env::EnvSpec grid = env::make_gridworld(5);
  Eigen::Vector2d obs = env::encode_cell(grid, {2, 3});
  CHECK(obs.x() == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(obs.y() == doctest::Approx(0.6).epsilon(1e-15));
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      env::Cell c{x, y};
      CHECK(env::decode_cell(grid, env::encode_cell(grid, c)) == c);
    }
}

TEST_CASE("gridworld moves and blocking") {
  env::EnvSpec grid = env::make_gridworld(5, {{2, 2}});
  // edge: up from (0,0) stays put
  CHECK(env::grid_next(grid, {0, 0}, 0) == env::Cell{0, 0});
  CHECK(env::grid_next(grid, {0, 0}, 1) == env::Cell{0, 1});
  CHECK(env::grid_next(grid, {0, 0}, 2) == env::Cell{0, 0});
  CHECK(env::grid_next(grid, {0, 0}, 3) == env::Cell{1, 0});
  CHECK(env::grid_next(grid, {0, 0}, 4) == env::Cell{0, 0});
  // wall: moving into (2,2) keeps the agent in place
  CHECK(env::grid_next(grid, {1, 2}, 3) == env::Cell{1, 2});
  CHECK(env::grid_next(grid, {2, 1}, 1) == env::Cell{2, 1});
  CHECK_THROWS_AS(env::grid_next(grid, {0, 0}, 5), Error);
}

TEST_CASE("pointmass reset and step") {
  env::EnvSpec pm = env::make_pointmass();
  env::Env e(pm, 0);
  Eigen::VectorXd s = e.reset();
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);

  auto r1 = e.step(env::Action::continuous(Eigen::Vector2d(0.1, 0.0)));
  CHECK(r1.obs[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(r1.obs[1] == 0.5);

  // clamped at the unit box: (0.98, 0.5) + (0.1, 0) -> (1.0, 0.5)
  env::Env e2(pm, 0);
  e2.reset();
  for (int i = 0; i < 6; ++i) e2.step(env::Action::continuous(Eigen::Vector2d(0.08, 0.0)));
  auto r2 = e2.step(env::Action::continuous(Eigen::Vector2d(0.1, 0.0)));
  CHECK(r2.obs[0] == 1.0);
  CHECK(r2.obs[1] == 0.5);
  // action magnitudes above high are clipped before integrating
  auto r3 = e.step(env::Action::continuous(Eigen::Vector2d(0.0, 5.0)));
  CHECK(r3.obs[1] == doctest::Approx(0.6).epsilon(1e-12));

  CHECK_THROWS_AS(e.step(env::Action::continuous(Eigen::VectorXd::Zero(3))), Error);
}

TEST_CASE("episode time limits") {
  env::EnvSpec grid = env::make_gridworld(5);
  env::Env e(grid, 1);
  e.reset();
  for (int t = 1; t <= 40; ++t) {
    auto r = e.step(env::Action::discrete(4));
    CHECK(r.done == (t == 40));
  }
  CHECK(!e.in_episode());
  CHECK_THROWS_AS(e.step(env::Action::discrete(4)), Error);
  CHECK(e.total_steps() == 40);

  env::Env pm(env::make_pointmass(), 1);
  pm.reset();
  for (int t = 1; t <= 50; ++t) {
    auto r = pm.step(env::Action::continuous(Eigen::Vector2d(0.0, 0.0)));
    CHECK(r.done == (t == 50));
  }
}

TEST_CASE("gridworld resets are uniform over free cells") {
  env::EnvSpec grid = env::make_gridworld(5, {{1, 1}, {2, 3}});
  const int free_cells = 23;
  env::Env e(grid, 42);
  std::vector<std::int64_t> counts(25, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd s = e.reset();
    env::Cell c = env::decode_cell(grid, s.head<2>());
    REQUIRE(env::is_free(grid, c));
    ++counts[static_cast<std::size_t>(c.y * 5 + c.x)];
  }
  CHECK(counts[1 * 5 + 1] == 0);
  CHECK(counts[3 * 5 + 2] == 0);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      if (!env::is_free(grid, {x, y})) continue;
      double freq = static_cast<double>(counts[static_cast<std::size_t>(y * 5 + x)]) / n;
      CHECK(std::abs(freq - 1.0 / free_cells) < 0.01);
    }
}

TEST_CASE("task definitions and rewards") {
  env::EnvSpec grid = env::make_gridworld(5);
  CHECK(env::task_ids(grid) == std::vector<std::string>{"goal_dense", "goal_sparse"});
  CHECK(env::task_ids(env::make_pointmass()).size() == 8);

  env::Task dense = env::make_task(grid, "goal_dense");
  CHECK(dense.goal.x() == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(dense.goal.y() == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(dense.radius == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(dense.gamma == 0.98);
  CHECK_THROWS_AS(env::make_task(grid, "reach_tl"), ConfigError);
  CHECK_THROWS_AS(env::make_task(env::make_pointmass(), "goal_dense"), ConfigError);

  env::Task tl = env::make_task(env::make_pointmass(), "reach_tl");
  CHECK(tl.goal.x() == 0.0);
  CHECK(tl.goal.y() == 1.0);
  CHECK(tl.kind == env::RewardKind::dense_negative_distance);
  env::Task brs = env::make_task(env::make_pointmass(), "reach_br_sparse");
  CHECK(brs.goal.x() == 1.0);
  CHECK(brs.goal.y() == 0.0);
  CHECK(brs.kind == env::RewardKind::sparse_goal);

  // dense reward is the negated distance; zero exactly at the goal
  env::Task t;
  t.goal = {0.6, 0.8};
  t.kind = env::RewardKind::dense_negative_distance;
  env::Action a = env::Action::discrete(0);
  Eigen::Vector2d origin(0.0, 0.0);
  CHECK(env::task_reward(t, origin, a, t.goal) == 0.0);
  CHECK(env::task_reward(t, t.goal, a, origin) == doctest::Approx(-1.0).epsilon(1e-15));

  // sparse reward is an indicator
  t.kind = env::RewardKind::sparse_goal;
  t.radius = 0.1;
  CHECK(env::task_reward(t, origin, a, t.goal) == 1.0);
  CHECK(env::task_reward(t, origin, a, Eigen::Vector2d(0.6, 0.71)) == 1.0);
  CHECK(env::task_reward(t, origin, a, origin) == 0.0);
  CHECK(env::task_success(t, t.goal));
  CHECK(!env::task_success(t, origin));

  // gridworld sparse radius covers exactly the goal cell
  env::Task gs = env::make_task(grid, "goal_sparse");
  CHECK(env::task_success(gs, env::encode_cell(grid, {4, 4})));
  CHECK(!env::task_success(gs, env::encode_cell(grid, {3, 4})));
}

TEST_CASE("shortest path distances") {
  env::EnvSpec empty = env::make_gridworld(5);
  CHECK(env::shortest_path_distance(empty, {2, 2}, {2, 2}) == 0);
  CHECK(env::shortest_path_distance(empty, {0, 0}, {4, 4}) == 8);

  // detour around a wall column, checked against an independent relaxation
  env::EnvSpec walled = env::make_gridworld(5, {{2, 0}, {2, 1}, {2, 2}, {2, 3}});
  auto oracle_dist = oracle::relaxation_distances(walled);
  CHECK(env::shortest_path_distance(walled, {0, 0}, {4, 0}) == 12);
  for (int y1 = 0; y1 < 5; ++y1)
    for (int x1 = 0; x1 < 5; ++x1)
      for (int y2 = 0; y2 < 5; ++y2)
        for (int x2 = 0; x2 < 5; ++x2) {
          env::Cell a{x1, y1}, b{x2, y2};
          if (!env::is_free(walled, a) || !env::is_free(walled, b)) continue;
          int want = oracle_dist[static_cast<std::size_t>(y1 * 5 + x1)]
                                [static_cast<std::size_t>(y2 * 5 + x2)];
          CHECK(env::shortest_path_distance(walled, a, b) == want);
        }

  // sealed-off corner is unreachable
  env::EnvSpec sealed = env::make_gridworld(5, {{1, 0}, {0, 1}, {1, 1}});
  CHECK_THROWS_AS(env::shortest_path_distance(sealed, {0, 0}, {4, 4}), Unreachable);
  CHECK_THROWS_AS(env::shortest_path_distance(empty, {0, 0}, {9, 9}), Error);
}

TEST_CASE("shortest path triangle inequality on 9x9") {
  env::EnvSpec spec = env::make_gridworld(9, {{4, 4}, {4, 5}, {5, 4}, {1, 7}});
  std::vector<env::Cell> cells;
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x)
      if (env::is_free(spec, {x, y})) cells.push_back({x, y});
  std::size_t m = cells.size();
  std::vector<std::vector<int>> d(m, std::vector<int>(m, 0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) d[i][j] = env::shortest_path_distance(spec, cells[i], cells[j]);
  bool ok = true;
  for (std::size_t i = 0; i < m && ok; ++i)
    for (std::size_t j = 0; j < m && ok; ++j)
      for (std::size_t k = 0; k < m; ++k)
        if (d[i][k] > d[i][j] + d[j][k]) {
          ok = false;
          break;
        }
  CHECK(ok);
}

TEST_CASE("offline dataset collection") {
  env::EnvSpec grid = env::make_gridworld(5);
  auto data = env::collect_offline_dataset(grid, 10000, env::Behavior::uniform_random, 0);
  CHECK(data.size() == 10000);
  CHECK(data.ad.size() == 10000);
  CHECK(data.a.rows() == 0);
  // done flags appear exactly every 40 steps for the fixed-horizon gridworld
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(data.done[i] == (i % 40 == 39));
  // transitions obey the grid dynamics
  for (std::size_t i = 0; i < 500; ++i) {
    env::Cell c = env::decode_cell(grid, data.s.col(static_cast<Eigen::Index>(i)).head<2>());
    env::Cell c2 = env::decode_cell(grid, data.s2.col(static_cast<Eigen::Index>(i)).head<2>());
    CHECK(env::grid_next(grid, c, data.ad[i]) == c2);
  }
  // episode index derives from done flags
  CHECK(data.episode_start.size() == 250);
  CHECK(data.episode_end(0) == 40);
  CHECK(data.episode_of[39] == 0);
  CHECK(data.episode_of[40] == 1);

  // 50k uniform steps visit at least 90% of the free cells
  auto big = env::collect_offline_dataset(grid, 50000, env::Behavior::uniform_random, 1);
  std::set<int> visited;
  for (std::size_t i = 0; i < big.size(); ++i) {
    env::Cell c = env::decode_cell(grid, big.s2.col(static_cast<Eigen::Index>(i)).head<2>());
    visited.insert(c.y * 5 + c.x);
  }
  CHECK(visited.size() >= 23);  // 90% of 25
}

TEST_CASE("epsilon random walk persists actions") {
  env::EnvSpec pm = env::make_pointmass();
  auto data = env::collect_offline_dataset(pm, 100000, env::Behavior::epsilon_random_walk, 3);
  std::int64_t changed = 0, pairs = 0;
  for (std::size_t i = 0; i + 1 < data.size(); ++i) {
    if (data.done[i]) continue;  // new episodes always redraw
    ++pairs;
    if (data.a.col(static_cast<Eigen::Index>(i)) != data.a.col(static_cast<Eigen::Index>(i + 1)))
      ++changed;
  }
  double frac = static_cast<double>(changed) / static_cast<double>(pairs);
  CHECK(std::abs(frac - 0.1) < 0.01);  // resample probability 0.1
}

TEST_CASE("dataset serialization is byte stable and loss free") {
  env::EnvSpec pm = env::make_pointmass();
  auto d1 = env::collect_offline_dataset(pm, 2000, env::Behavior::epsilon_random_walk, 7);
  auto d2 = env::collect_offline_dataset(pm, 2000, env::Behavior::epsilon_random_walk, 7);
  auto d3 = env::collect_offline_dataset(pm, 2000, env::Behavior::epsilon_random_walk, 8);

  std::string p1 = tmp_path("ds1.jsonl"), p2 = tmp_path("ds2.jsonl"), p3 = tmp_path("ds3.jsonl");
  env::save_dataset_jsonl(d1, p1);
  env::save_dataset_jsonl(d2, p2);
  env::save_dataset_jsonl(d3, p3);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(p1) != slurp(p3));

  auto back = env::load_dataset_jsonl(p1);
  REQUIRE(back.size() == d1.size());
  CHECK(back.spec.canonical_id() == "pointmass");
  CHECK(back.s == d1.s);
  CHECK(back.a == d1.a);
  CHECK(back.s2 == d1.s2);
  CHECK(back.done == d1.done);
  CHECK(back.episode_start == d1.episode_start);

  // gridworld with walls round-trips its spec too
  env::EnvSpec walled = env::make_gridworld(5, {{2, 2}});
  auto g = env::collect_offline_dataset(walled, 500, env::Behavior::uniform_random, 7);
  std::string pg = tmp_path("ds_grid.jsonl");
  env::save_dataset_jsonl(g, pg);
  auto gb = env::load_dataset_jsonl(pg);
  CHECK(gb.spec.walls == walled.walls);
  CHECK(gb.ad == g.ad);
  CHECK(gb.s == g.s);

  CHECK_THROWS_AS(env::load_dataset_jsonl(tmp_path("nope.jsonl")), Error);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  std::remove(p3.c_str());
  std::remove(pg.c_str());
}

TEST_CASE("label_subset sizes and labels") {
  env::EnvSpec pm = env::make_pointmass();
  auto data = env::collect_offline_dataset(pm, 10000, env::Behavior::uniform_random, 5);
  env::Task task = env::make_task(pm, "reach_tr");

  auto small = env::label_subset(data, task, 0.002, 11);
  CHECK(small.size() == 20);
  CHECK(small.provenance == env::RewardProvenance::offline_subset);

  auto full = env::label_subset(data, task, 1.0, 11);
  CHECK(full.size() == 10000);

  // labels equal an independent recomputation
  for (std::size_t k = 0; k < small.size(); ++k) {
    auto c = static_cast<Eigen::Index>(k);
    double want = env::task_reward(task, small.s.col(c),
                                   env::Action::continuous(small.a.col(c)), small.s2.col(c));
    CHECK(small.r[c] == want);
  }
  CHECK_THROWS_AS(env::label_subset(data, task, 0.0, 1), RangeViolation);
  CHECK_THROWS_AS(env::label_subset(data, task, 1.5, 1), RangeViolation);
}
