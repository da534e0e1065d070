#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moh/envbench.hpp"
#include "moh/train.hpp"

namespace moh::cli {

/// Relative paths resolve against $MOH_ROOT when it is set.
std::filesystem::path resolve(const std::filesystem::path& p);

/// Applies "env.<field>" settings to the environment constants.
void apply_env(envbench::EnvConstants& c, const train::Settings& s);

/// Splits "key=value" overrides into settings.
train::Settings parse_overrides(const std::vector<std::string>& kv);

struct GenerateOptions {
  std::filesystem::path out;
  std::size_t episodes = 50;
  std::size_t horizon = 30;
  std::uint64_t seed = 0;
  train::Settings env;
};
envbench::Dataset run_generate(const GenerateOptions& o, std::ostream& log);

struct TrainOptions {
  std::filesystem::path data;
  std::optional<std::filesystem::path> config;
  train::Settings overrides;
  std::filesystem::path out;  // directory: final.bin, metrics.jsonl, ckpt_*.bin
};
train::TrainConfig build_train_config(const std::optional<std::filesystem::path>& config,
                                      const train::Settings& overrides);
void run_train(const TrainOptions& o, std::ostream& log);

struct ExecutorOptions {
  std::string executor = "fixed";  // fixed | consensus
  std::size_t prefix = 5;
  double r = 1.1;
  std::size_t n = 5;
  std::size_t m = 5;
};
envbench::Executor make_executor(const ExecutorOptions& e);

struct EvalOptions {
  std::filesystem::path checkpoint;
  ExecutorOptions executor;
  std::size_t trials = 200;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> out;    // CSV
  std::optional<std::filesystem::path> trace;  // consensus JSON lines
};
envbench::EvalResult run_eval(const EvalOptions& o, std::ostream& log);

struct RolloutOptions {
  std::filesystem::path checkpoint;
  ExecutorOptions executor;
  std::string family = "precision";
  std::size_t trial = 0;
  std::uint64_t seed = 1;
};
/// Prints one JSON object describing the episode.
void run_rollout(const RolloutOptions& o, std::ostream& out);

struct SweepOptions {
  std::filesystem::path data;
  std::optional<std::filesystem::path> config;
  train::Settings overrides;
  std::vector<std::size_t> strides;
  std::size_t trials = 200;
  std::uint64_t eval_seed = 1;
  std::filesystem::path out;  // directory for runs and horizons.csv
};
/// Columns: variant,stride,num_horizons,precision_success,waypoint_success,mixed_success.
void run_sweep_horizons(const SweepOptions& o, std::ostream& log);

struct GateStatsOptions {
  std::filesystem::path checkpoint;
  std::size_t episodes = 20;  // expert episodes per task supplying observations
  std::uint64_t seed = 99;
  std::optional<std::filesystem::path> out;
};
mixture::GateStats run_gate_stats(const GateStatsOptions& o, std::ostream& log);

struct DynSweepOptions {
  std::filesystem::path checkpoint;
  std::vector<double> ratios{1.0, 1.1, 1.3, 2.0};
  std::size_t n = 5;
  std::size_t m = 5;
  std::size_t trials = 200;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> out;
};
struct DynSweepRow {
  double r = 0.0;
  double success_rate = 0.0;
  double mean_prefix = 0.0;
  double precision = 0.0;
  double waypoint = 0.0;
};
/// Columns: r,success_rate,mean_prefix,precision_success,waypoint_success.
std::vector<DynSweepRow> run_dyninfer_sweep(const DynSweepOptions& o, std::ostream& log);

/// Command-line entry point; returns the process exit code
/// (0 ok, 2 configuration/usage error, 3 runtime failure).
int main(int argc, char** argv);

}  // namespace moh::cli
