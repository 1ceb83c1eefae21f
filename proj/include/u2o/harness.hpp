#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "u2o/env.hpp"
#include "u2o/errors.hpp"
#include "u2o/finetune.hpp"
#include "u2o/hilp.hpp"
#include "u2o/offline_rl.hpp"

namespace u2o::harness {

// Flat key=value experiment description. Grid axes: methods x tasks x seeds
// over one environment and one offline dataset.
struct ExperimentConfig {
  std::vector<std::string> methods = {"u2o"};
  std::string env_id;                // canonical: "pointmass" | "gridworld<N>"
  std::vector<std::string> tasks;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};

  std::string data_path;             // empty -> generate into the dataset cache
  std::int64_t data_n = 100000;
  std::string data_behavior = "epsilon_random_walk";
  std::uint64_t data_seed = 0;

  int d = 8;
  std::string backbone = "auto";     // auto | iql | td3; auto: grid->iql, pointmass->td3
  offline_rl::TrainConfig train;
  hilp::HilpConfig feature;          // feature.d mirrors d at use sites

  finetune::RunOptions run;
  std::string out_dir;               // "" -> $U2O_OUT or ./u2o_out
};

// Strict parse: unknown keys rejected, ranges enforced, env/task required.
// Syntax: key=value, one per line, # comments, [a,b,c] lists, dotted keys.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Every effective hyperparameter except the grid axes (method/task/seed) and
// output location, rendered as sorted key=value lines. Backbone is resolved.
std::string canonical_config_string(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);  // 16 hex digits

// --- metrics CSV ---------------------------------------------------------------
extern const char* const kMetricsHeader;
void write_metrics_csv(const std::string& path, const std::vector<finetune::MetricsRow>& rows);
std::vector<finetune::MetricsRow> read_metrics_csv(const std::string& path);

// --- output layout and caches ----------------------------------------------------
// Precedence: cli_out > config out > U2O_OUT > ./u2o_out.
std::string resolve_out_dir(const ExperimentConfig& cfg, const std::string& cli_out = "");
std::uint64_t file_digest(const std::string& path);  // FNV-1a over raw bytes

// Returns the dataset file path, generating + caching under out/datasets when
// the config has no explicit data path.
std::string ensure_dataset(const ExperimentConfig& cfg, const std::string& out_dir);

// Pretraining caches under out/pretrain/<key>. Both always return the bundle
// or agent RELOADED from disk so cache hits and misses behave identically.
hilp::PretrainBundle ensure_bundle(const ExperimentConfig& cfg, const env::TransitionDataset& data,
                                   std::uint64_t dataset_digest, std::uint64_t seed,
                                   const std::string& out_dir, std::string* dir_out = nullptr,
                                   bool* cache_hit = nullptr);
offline_rl::Agent ensure_offline_agent(const ExperimentConfig& cfg,
                                       const env::TransitionDataset& data,
                                       std::uint64_t dataset_digest, const env::Task& task,
                                       std::uint64_t seed, const std::string& out_dir,
                                       std::string* dir_out = nullptr, bool* cache_hit = nullptr);

// --- runs ---------------------------------------------------------------------
struct RunRecord {
  std::string method, env, task;
  std::uint64_t seed = 0;
  std::string hash;       // config hash at run time
  std::string dir;        // run directory (suffix-incremented, never reused)
  std::string csv;        // metrics file inside dir
  bool ok = false;
  std::string error;
  int error_kind = 0;  // 0 ok, 1 generic failure, 2 numerical failure
  std::vector<finetune::MetricsRow> rows;
};

// Master seed of one run: derived from the seed-list entry and the run's
// identity, so the grid iteration order cannot matter.
std::uint64_t run_seed(std::uint64_t seed, const std::string& method, const std::string& env,
                       const std::string& task);

// Executes the whole grid sequentially; a failing run is recorded and skipped,
// never aborting siblings. Writes per-run CSV + meta.json, aggregate.json and
// charts under out_dir.
std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

// Rebuilds records from out/runs/*/meta.json; duplicate (method, env, task,
// hash, seed) keep only the highest directory suffix.
std::vector<RunRecord> scan_runs(const std::string& out_dir);

// --- aggregation -----------------------------------------------------------------
struct AggregateGroup {
  std::string method, env, task, hash;
  std::vector<std::uint64_t> seeds, failed_seeds;
  std::vector<std::int64_t> env_steps;  // checkpoints present in every seed
  std::vector<double> eval_return_mean, eval_return_std;
  std::vector<double> success_rate_mean, success_rate_std;
};

struct AggregateReport {
  std::vector<AggregateGroup> groups;  // sorted by (env, task, method, hash)
};

AggregateReport aggregate_runs(const std::vector<RunRecord>& records);
std::string report_to_json(const AggregateReport& report);

// One SVG learning-curve chart per (env, task): mean line per method over a
// +-1 std band. Returns the written paths.
std::vector<std::string> emit_charts(const AggregateReport& report, const std::string& dir);

// Subcommands: gen-data, pretrain, bridge, run, eval, diag, report.
// Exit codes: 0 ok, 1 config/other error, 2 numerical failure.
int cli_main(int argc, char** argv);

}  // namespace u2o::harness
