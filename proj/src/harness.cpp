#include "u2o/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "u2o/bridge.hpp"
#include "u2o/diag.hpp"

namespace fs = std::filesystem;

namespace u2o::harness {

namespace {

using json = nlohmann::ordered_json;

std::string fmt_g(double x, const char* f = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string hex16(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// --- config parsing ----------------------------------------------------------------

std::string trim(std::string s) {
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
  while (!s.empty() && ws(s.front())) s.erase(s.begin());
  while (!s.empty() && ws(s.back())) s.pop_back();
  return s;
}

struct KV {
  std::string key, value;
};

std::vector<KV> lex_config(const std::string& text) {
  std::vector<KV> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed config line " + std::to_string(lineno) + ": " + line);
    KV kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (kv.key.empty()) throw ConfigError("empty key on config line " + std::to_string(lineno));
    if (!seen.insert(kv.key).second) throw ConfigError("duplicate config key: " + kv.key);
    out.push_back(std::move(kv));
  }
  return out;
}

std::vector<std::string> parse_list(const std::string& key, const std::string& value) {
  std::string body = value;
  if (!body.empty() && body.front() == '[') {
    if (body.back() != ']') throw ConfigError("unterminated list for " + key + ": " + value);
    body = body.substr(1, body.size() - 2);
  }
  std::vector<std::string> items;
  std::string cur;
  std::istringstream in(body);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (cur.empty()) throw ConfigError("empty list element for " + key + ": " + value);
    items.push_back(cur);
  }
  if (items.empty()) throw ConfigError("empty list for " + key);
  return items;
}

double to_double(const std::string& key, const std::string& value, double lo, double hi,
                 bool lo_open = false, bool hi_open = false) {
  double x = 0.0;
  std::size_t used = 0;
  try {
    x = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": " + value);
  }
  if (used != value.size()) throw ConfigError("invalid value for " + key + ": " + value);
  bool ok = (lo_open ? x > lo : x >= lo) && (hi_open ? x < hi : x <= hi);
  if (!std::isfinite(x) || !ok) throw RangeViolation(key + "=" + value);
  return x;
}

std::int64_t to_i64(const std::string& key, const std::string& value, std::int64_t lo,
                    std::int64_t hi) {
  std::int64_t x = 0;
  std::size_t used = 0;
  try {
    x = std::stoll(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": " + value);
  }
  if (used != value.size()) throw ConfigError("invalid value for " + key + ": " + value);
  if (x < lo || x > hi) throw RangeViolation(key + "=" + value);
  return x;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value[0] == '-') throw RangeViolation(key + "=" + value);
  std::uint64_t x = 0;
  std::size_t used = 0;
  try {
    x = std::stoull(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": " + value);
  }
  if (used != value.size()) throw ConfigError("invalid value for " + key + ": " + value);
  return x;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid value for " + key + ": " + value + " (want true/false)");
}

std::string to_choice(const std::string& key, const std::string& value,
                      std::initializer_list<const char*> allowed) {
  for (const char* a : allowed)
    if (value == a) return value;
  throw RangeViolation(key + "=" + value);
}

void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  auto& t = cfg.train;
  auto& f = cfg.feature;
  auto& r = cfg.run;
  if (key == "method") {
    cfg.methods.clear();
    for (auto& m : parse_list(key, value)) {
      to_choice(key, m, {"u2o", "o2o", "scratch_with_data", "zero_shot"});
      if (std::count(cfg.methods.begin(), cfg.methods.end(), m))
        throw ConfigError("duplicate method: " + m);
      cfg.methods.push_back(m);
    }
  } else if (key == "env") {
    cfg.env_id = value;
  } else if (key == "task") {
    cfg.tasks.clear();
    for (auto& x : parse_list(key, value)) {
      if (std::count(cfg.tasks.begin(), cfg.tasks.end(), x))
        throw ConfigError("duplicate task: " + x);
      cfg.tasks.push_back(x);
    }
  } else if (key == "seed") {
    cfg.seeds.clear();
    for (auto& x : parse_list(key, value)) {
      std::uint64_t s = to_u64(key, x);
      if (std::count(cfg.seeds.begin(), cfg.seeds.end(), s))
        throw ConfigError("duplicate seed: " + x);
      cfg.seeds.push_back(s);
    }
  } else if (key == "out") {
    cfg.out_dir = value;
  } else if (key == "data.path") {
    cfg.data_path = value;
  } else if (key == "data.n") {
    cfg.data_n = to_i64(key, value, 2, 1000000000);
  } else if (key == "data.behavior") {
    cfg.data_behavior = to_choice(key, value, {"uniform_random", "epsilon_random_walk"});
  } else if (key == "data.seed") {
    cfg.data_seed = to_u64(key, value);
  } else if (key == "d") {
    cfg.d = static_cast<int>(to_i64(key, value, 1, 4096));
  } else if (key == "backbone") {
    cfg.backbone = to_choice(key, value, {"auto", "iql", "td3"});
  } else if (key == "batch_size") {
    t.batch_size = static_cast<int>(to_i64(key, value, 2, 65536));
  } else if (key == "hidden") {
    t.hidden.clear();
    for (auto& x : parse_list(key, value))
      t.hidden.push_back(static_cast<int>(to_i64(key, x, 1, 16384)));
  } else if (key == "gamma") {
    t.gamma = to_double(key, value, 0.0, 1.0, true, true);
  } else if (key == "expectile_tau") {
    t.expectile_tau = to_double(key, value, 0.0, 1.0, true, true);
  } else if (key == "awr_temperature") {
    t.awr_temperature = to_double(key, value, 0.0, 1e6, true);
  } else if (key == "polyak") {
    t.polyak = to_double(key, value, 0.0, 1.0, true);
  } else if (key == "lr") {
    t.lr_critic = t.lr_value = t.lr_actor = to_double(key, value, 0.0, 1.0, true);
  } else if (key == "lr_feature") {
    t.lr_feature = to_double(key, value, 0.0, 1.0, true);
  } else if (key == "td3.policy_noise") {
    t.td3_policy_noise = to_double(key, value, 0.0, 10.0);
  } else if (key == "td3.noise_clip") {
    t.td3_noise_clip = to_double(key, value, 0.0, 10.0);
  } else if (key == "td3.exploration_std") {
    t.td3_exploration_std = to_double(key, value, 0.0, 10.0);
  } else if (key == "iql.log_std") {
    t.iql_log_std = to_double(key, value, -10.0, 5.0);
  } else if (key == "feature.steps") {
    f.feature_steps = to_i64(key, value, 0, 1000000000);
  } else if (key == "feature.gamma") {
    f.gamma = to_double(key, value, 0.0, 1.0, true, true);
  } else if (key == "feature.expectile") {
    f.expectile = to_double(key, value, 0.0, 1.0, true, true);
  } else if (key == "feature.polyak") {
    f.polyak = to_double(key, value, 0.0, 1.0, true);
  } else if (key == "pretrain_steps") {
    r.pretrain_steps = to_i64(key, value, 0, 1000000000);
  } else if (key == "finetune_steps") {
    r.finetune_steps = to_i64(key, value, 0, 1000000000);
  } else if (key == "utd_ratio") {
    r.utd_ratio = static_cast<int>(to_i64(key, value, 1, 1024));
  } else if (key == "offline_sample_fraction") {
    r.offline_sample_fraction = to_double(key, value, 0.0, 1.0);
  } else if (key == "eval_interval") {
    r.eval_interval = to_i64(key, value, 1, 1000000000);
  } else if (key == "eval_episodes") {
    r.eval_episodes = static_cast<int>(to_i64(key, value, 1, 100000));
  } else if (key == "transfer_value") {
    r.transfer_value = to_bool(key, value);
  } else if (key == "transfer_policy") {
    r.transfer_policy = to_bool(key, value);
  } else if (key == "reward_matching") {
    std::string m = to_choice(key, value, {"auto", "on", "off"});
    r.matching = m == "auto" ? finetune::RunOptions::Matching::automatic
               : m == "on"   ? finetune::RunOptions::Matching::on
                             : finetune::RunOptions::Matching::off;
  } else if (key == "bridge.method") {
    r.bridge_method = to_choice(key, value, {"auto", "lsq", "goal", "random"});
  } else if (key == "bridge.fraction") {
    r.bridge_fraction = to_double(key, value, 0.0, 1.0, true);
  } else if (key == "bridge.ridge") {
    r.bridge_ridge = to_double(key, value, 0.0, 1e6);
  } else if (key == "bridge.source") {
    r.bridge_source = to_choice(key, value, {"offline", "online"});
  } else if (key == "bridge.online_n") {
    r.bridge_online_n = to_i64(key, value, 1, 1000000000);
  } else if (key == "buffer_capacity") {
    r.buffer_capacity = static_cast<std::size_t>(to_i64(key, value, 0, 1000000000));
  } else {
    throw UnknownKey(key);
  }
}

std::string resolved_backbone(const ExperimentConfig& cfg) {
  if (cfg.backbone != "auto") return cfg.backbone;
  return cfg.env_id == "pointmass" ? "td3" : "iql";
}

// Backbone resolved, feature dimension mirrored; what every execution path uses.
ExperimentConfig resolved(const ExperimentConfig& cfg) {
  ExperimentConfig eff = cfg;
  eff.backbone = resolved_backbone(cfg);
  eff.train.backbone =
      eff.backbone == "td3" ? offline_rl::Backbone::td3 : offline_rl::Backbone::iql;
  eff.feature.d = cfg.d;
  return eff;
}

std::string matching_to_string(finetune::RunOptions::Matching m) {
  switch (m) {
    case finetune::RunOptions::Matching::on: return "on";
    case finetune::RunOptions::Matching::off: return "off";
    default: return "auto";
  }
}

std::vector<KV> canonical_pairs(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  const auto& f = cfg.feature;
  const auto& r = cfg.run;
  std::string hidden = "[";
  for (std::size_t i = 0; i < t.hidden.size(); ++i)
    hidden += (i ? "," : "") + std::to_string(t.hidden[i]);
  hidden += "]";
  std::vector<KV> kv{
      {"awr_temperature", fmt_g(t.awr_temperature)},
      {"backbone", resolved_backbone(cfg)},
      {"batch_size", std::to_string(t.batch_size)},
      {"bridge.fraction", fmt_g(r.bridge_fraction)},
      {"bridge.method", r.bridge_method},
      {"bridge.online_n", std::to_string(r.bridge_online_n)},
      {"bridge.ridge", fmt_g(r.bridge_ridge)},
      {"bridge.source", r.bridge_source},
      {"buffer_capacity", std::to_string(r.buffer_capacity)},
      {"d", std::to_string(cfg.d)},
      {"data.behavior", cfg.data_behavior},
      {"data.n", std::to_string(cfg.data_n)},
      {"data.path", cfg.data_path},
      {"data.seed", std::to_string(cfg.data_seed)},
      {"env", cfg.env_id},
      {"eval_episodes", std::to_string(r.eval_episodes)},
      {"eval_interval", std::to_string(r.eval_interval)},
      {"expectile_tau", fmt_g(t.expectile_tau)},
      {"feature.expectile", fmt_g(f.expectile)},
      {"feature.gamma", fmt_g(f.gamma)},
      {"feature.polyak", fmt_g(f.polyak)},
      {"feature.steps", std::to_string(f.feature_steps)},
      {"finetune_steps", std::to_string(r.finetune_steps)},
      {"gamma", fmt_g(t.gamma)},
      {"hidden", hidden},
      {"iql.log_std", fmt_g(t.iql_log_std)},
      {"lr_actor", fmt_g(t.lr_actor)},
      {"lr_critic", fmt_g(t.lr_critic)},
      {"lr_feature", fmt_g(t.lr_feature)},
      {"lr_value", fmt_g(t.lr_value)},
      {"offline_sample_fraction", fmt_g(r.offline_sample_fraction)},
      {"polyak", fmt_g(t.polyak)},
      {"pretrain_steps", std::to_string(r.pretrain_steps)},
      {"reward_matching", matching_to_string(r.matching)},
      {"td3.exploration_std", fmt_g(t.td3_exploration_std)},
      {"td3.noise_clip", fmt_g(t.td3_noise_clip)},
      {"td3.policy_noise", fmt_g(t.td3_policy_noise)},
      {"transfer_policy", r.transfer_policy ? "true" : "false"},
      {"transfer_value", r.transfer_value ? "true" : "false"},
      {"utd_ratio", std::to_string(r.utd_ratio)},
  };
  return kv;
}

// Keys that change what pretraining computes (the skill-policy cache identity).
bool pretrain_relevant(const std::string& key) {
  static const std::set<std::string> keys{
      "awr_temperature", "backbone",   "batch_size", "d",          "expectile_tau",
      "feature.expectile", "feature.gamma", "feature.polyak", "feature.steps",
      "gamma",           "hidden",     "iql.log_std", "lr_actor",  "lr_critic",
      "lr_feature",      "lr_value",   "polyak",     "pretrain_steps",
      "td3.exploration_std", "td3.noise_clip", "td3.policy_noise"};
  return keys.count(key) > 0;
}

std::string cache_key(const ExperimentConfig& cfg, std::uint64_t dataset_digest,
                      std::uint64_t seed, const std::string& variant) {
  std::string s = "variant=" + variant + "\ndigest=" + hex16(dataset_digest) +
                  "\nseed=" + std::to_string(seed) + "\n";
  for (const auto& kv : canonical_pairs(cfg)) {
    if (!pretrain_relevant(kv.key)) continue;
    if (variant != "skills" && (kv.key == "d" || kv.key.rfind("feature.", 0) == 0)) continue;
    s += kv.key + "=" + kv.value + "\n";
  }
  return hex16(rng::fnv1a64(s));
}

std::string claim_dir(const std::string& parent, const std::string& base) {
  fs::create_directories(parent);
  for (int k = 1;; ++k) {
    std::string name = k == 1 ? base : base + "-" + std::to_string(k);
    std::string path = parent + "/" + name;
    if (fs::create_directory(path)) return path;
  }
}

int dir_suffix(const std::string& name) {
  auto pos = name.rfind('-');
  if (pos == std::string::npos || pos + 1 >= name.size()) return 1;
  int k = 0;
  for (std::size_t i = pos + 1; i < name.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(name[i]))) return 1;
    k = k * 10 + (name[i] - '0');
  }
  return k;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& kv : lex_config(text)) apply_key(cfg, kv.key, kv.value);
  if (cfg.env_id.empty()) throw MissingRequired("env");
  if (cfg.tasks.empty()) throw MissingRequired("task");
  env::EnvSpec spec;
  try {
    spec = env::spec_from_canonical_id(cfg.env_id);
  } catch (const Error& e) {
    throw RangeViolation("env=" + cfg.env_id);
  }
  cfg.env_id = spec.canonical_id();
  for (const auto& t : cfg.tasks) {
    try {
      env::make_task(spec, t);
    } catch (const Error&) {
      throw RangeViolation("task=" + t + " (env " + cfg.env_id + ")");
    }
  }
  if (!cfg.data_path.empty() && !fs::exists(cfg.data_path))
    throw ConfigError("dataset file not found: " + cfg.data_path);
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_config_string(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& kv : canonical_pairs(cfg)) out += kv.key + "=" + kv.value + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  return hex16(rng::fnv1a64(canonical_config_string(cfg)));
}

// --- metrics CSV ---------------------------------------------------------------

const char* const kMetricsHeader =
    "step,env_steps,eval_return,success_rate,critic_loss,value_loss,actor_loss,feature_dot,"
    "reward_raw_mean,reward_norm_mean,reward_norm_std";

void write_metrics_csv(const std::string& path, const std::vector<finetune::MetricsRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write metrics file: " + path);
  out << kMetricsHeader << "\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%lld,%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.step), static_cast<long long>(r.env_steps),
                  r.eval_return, r.success_rate, r.critic_loss, r.value_loss, r.actor_loss,
                  r.feature_dot, r.reward_raw_mean, r.reward_norm_mean, r.reward_norm_std);
    out << buf;
  }
}

std::vector<finetune::MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read metrics file: " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMetricsHeader)
    throw Error("unexpected metrics header in " + path);
  std::vector<finetune::MetricsRow> rows;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 11) throw Error("malformed metrics row in " + path + ": " + line);
    finetune::MetricsRow r;
    r.step = std::stoll(cells[0]);
    r.env_steps = std::stoll(cells[1]);
    double* fields[9] = {&r.eval_return,  &r.success_rate,    &r.critic_loss,
                         &r.value_loss,   &r.actor_loss,      &r.feature_dot,
                         &r.reward_raw_mean, &r.reward_norm_mean, &r.reward_norm_std};
    for (int i = 0; i < 9; ++i) *fields[i] = std::stod(cells[static_cast<std::size_t>(i) + 2]);
    rows.push_back(r);
  }
  return rows;
}

// --- output layout and caches ----------------------------------------------------

std::string resolve_out_dir(const ExperimentConfig& cfg, const std::string& cli_out) {
  if (!cli_out.empty()) return cli_out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  if (const char* env = std::getenv("U2O_OUT"); env && *env) return env;
  return "u2o_out";
}

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read file for digest: " + path);
  std::uint64_t h = rng::kFnvOffset;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = rng::fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  return h;
}

std::string ensure_dataset(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (!cfg.data_path.empty()) {
    if (!fs::exists(cfg.data_path)) throw ConfigError("dataset file not found: " + cfg.data_path);
    return cfg.data_path;
  }
  std::string name = cfg.env_id + "_" + cfg.data_behavior + "_n" + std::to_string(cfg.data_n) +
                     "_seed" + std::to_string(cfg.data_seed) + ".jsonl";
  std::string path = out_dir + "/datasets/" + name;
  if (!fs::exists(path)) {
    fs::create_directories(out_dir + "/datasets");
    env::EnvSpec spec = env::spec_from_canonical_id(cfg.env_id);
    env::TransitionDataset data = env::collect_offline_dataset(
        spec, static_cast<std::size_t>(cfg.data_n),
        env::behavior_from_string(cfg.data_behavior), cfg.data_seed);
    env::save_dataset_jsonl(data, path + ".tmp");
    fs::rename(path + ".tmp", path);
  }
  return path;
}

hilp::PretrainBundle ensure_bundle(const ExperimentConfig& cfg, const env::TransitionDataset& data,
                                   std::uint64_t dataset_digest, std::uint64_t seed,
                                   const std::string& out_dir, std::string* dir_out,
                                   bool* cache_hit) {
  ExperimentConfig eff = resolved(cfg);
  std::string dir = out_dir + "/pretrain/" + cache_key(eff, dataset_digest, seed, "skills");
  if (dir_out) *dir_out = dir;
  bool hit = fs::exists(dir + "/meta.json");
  if (cache_hit) *cache_hit = hit;
  if (!hit) {
    hilp::PretrainBundle bundle = hilp::pretrain_skills(data, eff.feature, eff.train,
                                                        eff.run.pretrain_steps, seed);
    hilp::save_bundle(bundle, dir);
  }
  // Cache hits and fresh trains must agree bit-for-bit, so both paths read the
  // float32 checkpoint back from disk.
  return hilp::load_bundle(dir);
}

offline_rl::Agent ensure_offline_agent(const ExperimentConfig& cfg,
                                       const env::TransitionDataset& data,
                                       std::uint64_t dataset_digest, const env::Task& task,
                                       std::uint64_t seed, const std::string& out_dir,
                                       std::string* dir_out, bool* cache_hit) {
  ExperimentConfig eff = resolved(cfg);
  std::string dir = out_dir + "/pretrain/" +
                    cache_key(eff, dataset_digest, seed, "o2o:" + task.task_id);
  if (dir_out) *dir_out = dir;
  bool hit = fs::exists(dir + "/agent_meta.json");
  if (cache_hit) *cache_hit = hit;
  if (!hit) {
    offline_rl::Agent agent = finetune::train_task_agent_offline(
        data.spec, task, data, eff.train, eff.run.pretrain_steps, rng::derive(seed, "offline"));
    offline_rl::save_agent(agent, dir);
  }
  return offline_rl::load_agent(dir);
}

// --- runs ---------------------------------------------------------------------

std::uint64_t run_seed(std::uint64_t seed, const std::string& method, const std::string& env,
                       const std::string& task) {
  return rng::derive(seed, "run:" + method + ":" + env + ":" + task);
}

namespace {

int error_kind(const std::exception& e) {
  if (dynamic_cast<const NumericalFailure*>(&e)) return 2;
  return 1;
}

void write_run_meta(const RunRecord& rec, const finetune::RunResult* result) {
  json meta{{"method", rec.method}, {"env", rec.env},   {"task", rec.task},
            {"seed", rec.seed},     {"hash", rec.hash}, {"status", rec.ok ? "ok" : "failed"}};
  if (!rec.ok) {
    meta["error"] = rec.error;
    meta["error_kind"] = rec.error_kind;
  } else {
    meta["csv"] = fs::path(rec.csv).filename().string();
    meta["online_env_steps"] = result->online_env_steps;
    if (result->skill) meta["skill"] = json::parse(bridge::identity_to_json(*result->skill));
  }
  std::ofstream(rec.dir + "/meta.json") << meta.dump(2) << "\n";
}

}  // namespace

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  ExperimentConfig eff = resolved(cfg);
  fs::create_directories(out_dir);
  std::string data_path = ensure_dataset(eff, out_dir);
  env::TransitionDataset data = env::load_dataset_jsonl(data_path);
  if (data.spec.canonical_id() != eff.env_id)
    throw ConfigError("dataset env " + data.spec.canonical_id() + " does not match config env " +
                      eff.env_id);
  std::uint64_t digest = file_digest(data_path);
  std::string hash = config_hash(eff);

  std::vector<RunRecord> records;
  for (std::uint64_t k : eff.seeds) {
    for (const auto& m : eff.methods) {
      for (const auto& t : eff.tasks) {
        RunRecord rec;
        rec.method = m;
        rec.env = eff.env_id;
        rec.task = t;
        rec.seed = k;
        rec.hash = hash;
        std::string base = m + "_" + eff.env_id + "_" + t + "_seed" + std::to_string(k);
        rec.dir = claim_dir(out_dir + "/runs", base);
        rec.csv = rec.dir + "/" + base + ".csv";
        try {
          env::Task task = env::make_task(data.spec, t);
          std::uint64_t rs = run_seed(k, m, eff.env_id, t);
          finetune::RunResult rr;
          if (m == "u2o" || m == "zero_shot") {
            hilp::PretrainBundle bundle = ensure_bundle(eff, data, digest, k, out_dir);
            rr = m == "u2o"
                     ? finetune::run_u2o(data.spec, task, data, bundle, std::nullopt, eff.run, rs)
                     : finetune::run_zero_shot(data.spec, task, data, bundle, std::nullopt,
                                               eff.run, rs);
          } else if (m == "o2o") {
            offline_rl::Agent agent = ensure_offline_agent(eff, data, digest, task, k, out_dir);
            rr = finetune::run_o2o(data.spec, task, data, eff.train, eff.run, rs, &agent);
          } else {
            rr = finetune::run_scratch_with_data(data.spec, task, data, eff.train, eff.run, rs);
          }
          write_metrics_csv(rec.csv, rr.rows);
          rec.rows = rr.rows;
          rec.ok = true;
          write_run_meta(rec, &rr);
        } catch (const std::exception& e) {
          rec.ok = false;
          rec.error = e.what();
          rec.error_kind = error_kind(e);
          write_run_meta(rec, nullptr);
        }
        records.push_back(std::move(rec));
      }
    }
  }

  AggregateReport report = aggregate_runs(records);
  std::ofstream(out_dir + "/aggregate.json") << report_to_json(report);
  emit_charts(report, out_dir + "/charts");
  return records;
}

std::vector<RunRecord> scan_runs(const std::string& out_dir) {
  std::string runs = out_dir + "/runs";
  std::vector<RunRecord> out;
  if (!fs::is_directory(runs)) return out;
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(runs))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  // (method, env, task, hash, seed) -> (suffix, index into out)
  std::map<std::string, std::pair<int, std::size_t>> latest;
  for (const auto& name : names) {
    std::string dir = runs + "/" + name;
    std::ifstream mf(dir + "/meta.json");
    if (!mf) continue;
    json meta;
    try {
      meta = json::parse(mf);
    } catch (const json::exception&) {
      continue;
    }
    RunRecord rec;
    rec.method = meta.at("method").get<std::string>();
    rec.env = meta.at("env").get<std::string>();
    rec.task = meta.at("task").get<std::string>();
    rec.seed = meta.at("seed").get<std::uint64_t>();
    rec.hash = meta.at("hash").get<std::string>();
    rec.dir = dir;
    rec.ok = meta.at("status") == "ok";
    if (rec.ok) {
      rec.csv = dir + "/" + meta.at("csv").get<std::string>();
      rec.rows = read_metrics_csv(rec.csv);
    } else {
      rec.error = meta.value("error", "");
      rec.error_kind = meta.value("error_kind", 1);
    }
    std::string key = rec.method + "|" + rec.env + "|" + rec.task + "|" + rec.hash + "|" +
                      std::to_string(rec.seed);
    int suffix = dir_suffix(name);
    auto it = latest.find(key);
    if (it == latest.end()) {
      latest[key] = {suffix, out.size()};
      out.push_back(std::move(rec));
    } else if (suffix >= it->second.first) {
      it->second.first = suffix;
      out[it->second.second] = std::move(rec);
    }
  }
  return out;
}

// --- aggregation -----------------------------------------------------------------

AggregateReport aggregate_runs(const std::vector<RunRecord>& records) {
  std::map<std::array<std::string, 4>, std::vector<const RunRecord*>> groups;
  for (const auto& r : records)
    groups[{r.env, r.task, r.method, r.hash}].push_back(&r);

  AggregateReport report;
  for (const auto& [key, runs] : groups) {
    AggregateGroup g;
    g.env = key[0];
    g.task = key[1];
    g.method = key[2];
    g.hash = key[3];
    std::vector<const RunRecord*> ok;
    for (const RunRecord* r : runs) {
      if (r->ok) {
        ok.push_back(r);
        g.seeds.push_back(r->seed);
      } else {
        g.failed_seeds.push_back(r->seed);
      }
    }
    std::sort(g.seeds.begin(), g.seeds.end());
    std::sort(g.failed_seeds.begin(), g.failed_seeds.end());

    std::map<std::int64_t, std::size_t> counts;
    for (const RunRecord* r : ok)
      for (const auto& row : r->rows) ++counts[row.env_steps];
    for (const auto& [step, c] : counts) {
      if (c != ok.size() || ok.empty()) continue;  // keep checkpoints every seed reached
      double rsum = 0, rsq = 0, ssum = 0, ssq = 0;
      for (const RunRecord* r : ok) {
        const finetune::MetricsRow* row = nullptr;
        for (const auto& x : r->rows)
          if (x.env_steps == step) row = &x;
        rsum += row->eval_return;
        rsq += row->eval_return * row->eval_return;
        ssum += row->success_rate;
        ssq += row->success_rate * row->success_rate;
      }
      double n = static_cast<double>(ok.size());
      g.env_steps.push_back(step);
      g.eval_return_mean.push_back(rsum / n);
      g.eval_return_std.push_back(std::sqrt(std::max(0.0, rsq / n - (rsum / n) * (rsum / n))));
      g.success_rate_mean.push_back(ssum / n);
      g.success_rate_std.push_back(std::sqrt(std::max(0.0, ssq / n - (ssum / n) * (ssum / n))));
    }
    report.groups.push_back(std::move(g));
  }
  return report;
}

std::string report_to_json(const AggregateReport& report) {
  json j;
  j["groups"] = json::array();
  for (const auto& g : report.groups) {
    json jg{{"method", g.method},
            {"env", g.env},
            {"task", g.task},
            {"config_hash", g.hash},
            {"seeds", g.seeds},
            {"failed_seeds", g.failed_seeds},
            {"env_steps", g.env_steps},
            {"eval_return_mean", g.eval_return_mean},
            {"eval_return_std", g.eval_return_std},
            {"success_rate_mean", g.success_rate_mean},
            {"success_rate_std", g.success_rate_std}};
    if (!g.eval_return_mean.empty()) {
      jg["final_eval_return_mean"] = g.eval_return_mean.back();
      jg["final_success_rate_mean"] = g.success_rate_mean.back();
    }
    j["groups"].push_back(std::move(jg));
  }
  return j.dump(2) + "\n";
}

// --- charts ---------------------------------------------------------------------

namespace {

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string svg_chart(const std::string& env, const std::string& task,
                      const std::vector<const AggregateGroup*>& groups) {
  const double W = 720, H = 480, L = 70, R = 700, T = 40, B = 430;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto* g : groups) {
    for (std::size_t i = 0; i < g->env_steps.size(); ++i) {
      double x = static_cast<double>(g->env_steps[i]);
      double lo = g->eval_return_mean[i] - g->eval_return_std[i];
      double hi = g->eval_return_mean[i] + g->eval_return_std[i];
      if (!any) {
        xmin = xmax = x;
        ymin = lo;
        ymax = hi;
        any = true;
      } else {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, lo);
        ymax = std::max(ymax, hi);
      }
    }
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 1;
    xmax += 1;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 1;
    ymax += 1;
  }
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (R - L); };
  auto py = [&](double y) { return B - (y - ymin) / (ymax - ymin) * (B - T); };
  auto num = [](double v) { return fmt_g(v, "%.6g"); };

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" + num(H) +
       "\" viewBox=\"0 0 " + num(W) + " " + num(H) + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(W) + "\" height=\"" + num(H) +
       "\" fill=\"white\"/>\n";
  s += "<text x=\"" + num((L + R) / 2) + "\" y=\"24\" text-anchor=\"middle\" " +
       "font-family=\"sans-serif\" font-size=\"16\">" + escape_xml(env + " / " + task) +
       "</text>\n";

  // bands first so mean lines stay on top
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto* g = groups[gi];
    if (g->env_steps.empty()) continue;
    const char* color = kPalette[gi % 6];
    std::string d;
    for (std::size_t i = 0; i < g->env_steps.size(); ++i)
      d += (i ? " L " : "M ") + num(px(static_cast<double>(g->env_steps[i]))) + " " +
           num(py(g->eval_return_mean[i] + g->eval_return_std[i]));
    for (std::size_t i = g->env_steps.size(); i-- > 0;)
      d += " L " + num(px(static_cast<double>(g->env_steps[i]))) + " " +
           num(py(g->eval_return_mean[i] - g->eval_return_std[i]));
    d += " Z";
    s += "<path d=\"" + d + "\" fill=\"" + color + "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto* g = groups[gi];
    if (g->env_steps.empty()) continue;
    const char* color = kPalette[gi % 6];
    std::string pts;
    for (std::size_t i = 0; i < g->env_steps.size(); ++i)
      pts += num(px(static_cast<double>(g->env_steps[i]))) + "," +
             num(py(g->eval_return_mean[i])) + " ";
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < g->env_steps.size(); ++i)
      s += "<circle cx=\"" + num(px(static_cast<double>(g->env_steps[i]))) + "\" cy=\"" +
           num(py(g->eval_return_mean[i])) + "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
  }

  // axes and ticks
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(B) + "\" x2=\"" + num(R) + "\" y2=\"" + num(B) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(B) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double fx = xmin + (xmax - xmin) * i / 4.0;
    double fy = ymin + (ymax - ymin) * i / 4.0;
    s += "<line x1=\"" + num(px(fx)) + "\" y1=\"" + num(B) + "\" x2=\"" + num(px(fx)) +
         "\" y2=\"" + num(B + 4) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(px(fx)) + "\" y=\"" + num(B + 18) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + num(fx) +
         "</text>\n";
    s += "<line x1=\"" + num(L - 4) + "\" y1=\"" + num(py(fy)) + "\" x2=\"" + num(L) +
         "\" y2=\"" + num(py(fy)) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(L - 8) + "\" y=\"" + num(py(fy) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" + num(fy) +
         "</text>\n";
  }
  s += "<text x=\"" + num((L + R) / 2) + "\" y=\"" + num(H - 10) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">env steps</text>\n";
  s += "<text x=\"16\" y=\"" + num((T + B) / 2) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 "
       "16 " + num((T + B) / 2) + ")\">eval return</text>\n";

  // legend; method names collide only across hashes
  std::map<std::string, int> method_count;
  for (const auto* g : groups) ++method_count[g->method];
  double ly = T + 10;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto* g = groups[gi];
    std::string label = g->method;
    if (method_count[g->method] > 1) label += " #" + g->hash.substr(0, 6);
    s += "<rect x=\"" + num(R - 170) + "\" y=\"" + num(ly - 9) +
         "\" width=\"12\" height=\"12\" fill=\"" + std::string(kPalette[gi % 6]) + "\"/>\n";
    s += "<text x=\"" + num(R - 152) + "\" y=\"" + num(ly + 2) +
         "\" font-family=\"sans-serif\" font-size=\"13\">" + escape_xml(label) + "</text>\n";
    ly += 18;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

std::vector<std::string> emit_charts(const AggregateReport& report, const std::string& dir) {
  std::map<std::pair<std::string, std::string>, std::vector<const AggregateGroup*>> by_chart;
  for (const auto& g : report.groups) by_chart[{g.env, g.task}].push_back(&g);
  std::vector<std::string> paths;
  if (by_chart.empty()) return paths;
  fs::create_directories(dir);
  for (const auto& [key, groups] : by_chart) {
    std::string path = dir + "/" + key.first + "_" + key.second + ".svg";
    std::ofstream(path, std::ios::binary) << svg_chart(key.first, key.second, groups);
    paths.push_back(path);
  }
  return paths;
}

// --- CLI ------------------------------------------------------------------------

namespace {

struct CliState {
  std::string config_path;
  std::string out_flag;
  std::int64_t seed_flag = -1;
};

void add_shared_flags(CLI::App* sub, CliState& st, bool config_required = true) {
  auto* c = sub->add_option("--config", st.config_path, "experiment config file");
  if (config_required) c->required();
  sub->add_option("--out", st.out_flag, "output root (overrides config and U2O_OUT)");
  sub->add_option("--seed", st.seed_flag, "replace the config's seed list with one seed");
}

ExperimentConfig load_cli_config(const CliState& st) {
  ExperimentConfig cfg = parse_config_file(st.config_path);
  if (st.seed_flag >= 0) cfg.seeds = {static_cast<std::uint64_t>(st.seed_flag)};
  return cfg;
}

}  // namespace

int cli_main(int argc, char** argv) {
  try {
    CLI::App app{"skill pretraining, bridging and online fine-tuning experiments"};
    app.require_subcommand(1);
    CliState st;
    int rc = 0;

    auto* gen = app.add_subcommand("gen-data", "generate (or locate) the offline dataset");
    add_shared_flags(gen, st);
    gen->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::cout << "dataset: " << ensure_dataset(cfg, out) << "\n";
    });

    auto* pre = app.add_subcommand("pretrain", "train (or load) skill bundles per seed");
    add_shared_flags(pre, st);
    pre->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::string path = ensure_dataset(cfg, out);
      env::TransitionDataset data = env::load_dataset_jsonl(path);
      std::uint64_t digest = file_digest(path);
      for (std::uint64_t k : cfg.seeds) {
        std::string dir;
        bool hit = false;
        ensure_bundle(cfg, data, digest, k, out, &dir, &hit);
        std::cout << "bundle seed " << k << ": " << dir << (hit ? " (cached)" : "") << "\n";
      }
    });

    auto* bri = app.add_subcommand("bridge", "identify the task skill vector per seed and task");
    add_shared_flags(bri, st);
    bri->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::string path = ensure_dataset(cfg, out);
      env::TransitionDataset data = env::load_dataset_jsonl(path);
      std::uint64_t digest = file_digest(path);
      for (std::uint64_t k : cfg.seeds) {
        hilp::PretrainBundle bundle = ensure_bundle(cfg, data, digest, k, out);
        for (const auto& t : cfg.tasks) {
          env::Task task = env::make_task(data.spec, t);
          bridge::SkillIdentity id = finetune::identify_skill(
              data.spec, task, data, bundle, std::nullopt, cfg.run,
              run_seed(k, "u2o", cfg.env_id, t));
          std::cout << "{\"seed\": " << k << ", \"task\": \"" << t
                    << "\", \"identity\": " << bridge::identity_to_json(id) << "}\n";
        }
      }
    });

    auto* run = app.add_subcommand("run", "execute the full method x task x seed grid");
    add_shared_flags(run, st);
    run->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::vector<RunRecord> records = run_experiment(cfg, out);
      for (const auto& r : records) {
        std::cout << (r.ok ? "ok    " : "FAIL  ") << r.method << " " << r.task << " seed "
                  << r.seed;
        if (r.ok && !r.rows.empty())
          std::cout << "  return " << fmt_g(r.rows.back().eval_return, "%.4g") << "  success "
                    << fmt_g(r.rows.back().success_rate, "%.4g");
        if (!r.ok) {
          std::cout << "  (" << r.error << ")";
          rc = std::max(rc, r.error_kind);
        }
        std::cout << "\n";
      }
      std::cout << "aggregate: " << out << "/aggregate.json\n";
      std::cout << "charts: " << out << "/charts\n";
    });

    auto* ev = app.add_subcommand("eval", "zero-shot evaluation of the identified skill");
    add_shared_flags(ev, st);
    ev->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::string path = ensure_dataset(cfg, out);
      env::TransitionDataset data = env::load_dataset_jsonl(path);
      std::uint64_t digest = file_digest(path);
      for (std::uint64_t k : cfg.seeds) {
        hilp::PretrainBundle bundle = ensure_bundle(cfg, data, digest, k, out);
        for (const auto& t : cfg.tasks) {
          env::Task task = env::make_task(data.spec, t);
          finetune::RunResult rr =
              finetune::run_zero_shot(data.spec, task, data, bundle, std::nullopt, cfg.run,
                                      run_seed(k, "zero_shot", cfg.env_id, t));
          std::cout << "{\"seed\": " << k << ", \"task\": \"" << t
                    << "\", \"eval_return\": " << fmt_g(rr.rows.at(0).eval_return)
                    << ", \"success_rate\": " << fmt_g(rr.rows.at(0).success_rate) << "}\n";
        }
      }
    });

    auto* dg = app.add_subcommand("diag", "feature co-adaptation and reward-scale probes");
    add_shared_flags(dg, st);
    dg->callback([&] {
      ExperimentConfig cfg = load_cli_config(st);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      std::string path = ensure_dataset(cfg, out);
      env::TransitionDataset data = env::load_dataset_jsonl(path);
      std::uint64_t digest = file_digest(path);
      for (std::uint64_t k : cfg.seeds) {
        hilp::PretrainBundle bundle = ensure_bundle(cfg, data, digest, k, out);
        rng::Stream probe_stream(rng::derive(k, "diag-probe"));
        diag::PairBatch probe = diag::sample_consecutive_pairs(data, 1024, probe_stream);
        rng::Stream zs(rng::derive(k, "diag-z"));
        Eigen::VectorXd z = hilp::sample_skill(zs, bundle.d);
        double dot = diag::feature_dot_product(bundle.agent, probe, z);
        rng::Stream is(rng::derive(k, "diag-intrinsic"));
        diag::StreamStats st2 = diag::intrinsic_probe(bundle.feature, bundle.stats, data, 10000, is);
        std::cout << "{\"seed\": " << k << ", \"pairs\": " << probe.size()
                  << ", \"mean_dot\": " << fmt_g(dot)
                  << ", \"intrinsic\": {\"raw_mean\": " << fmt_g(st2.raw_mean)
                  << ", \"raw_std\": " << fmt_g(st2.raw_std)
                  << ", \"norm_mean\": " << fmt_g(st2.norm_mean)
                  << ", \"norm_std\": " << fmt_g(st2.norm_std) << "}}\n";
      }
    });

    auto* rep = app.add_subcommand("report", "re-aggregate existing runs and redraw charts");
    add_shared_flags(rep, st, /*config_required=*/false);
    rep->callback([&] {
      ExperimentConfig cfg;
      if (!st.config_path.empty()) cfg = parse_config_file(st.config_path);
      std::string out = resolve_out_dir(cfg, st.out_flag);
      fs::create_directories(out);
      AggregateReport report = aggregate_runs(scan_runs(out));
      std::ofstream(out + "/aggregate.json") << report_to_json(report);
      emit_charts(report, out + "/charts");
      std::cout << "aggregate: " << out << "/aggregate.json\n";
      std::cout << "charts: " << out << "/charts\n";
    });

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      int code = app.exit(e);
      return code == 0 ? 0 : 1;
    }
    return rc;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace u2o::harness
