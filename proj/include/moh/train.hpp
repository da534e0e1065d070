#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>

#include "moh/envbench.hpp"
#include "moh/policy_heads.hpp"

namespace moh::train {

struct TrainConfig {
  policy::PolicyConfig model;
  double peak_lr = 1e-3;
  std::size_t warmup = 100;
  double lr_floor = 1e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 64;
  std::size_t iterations = 2000;
  double clip = 1.0;
  std::uint64_t seed = 0;
  std::string dtype = "f32";  // f32 or f64
  std::size_t checkpoint_every = 0;

  void validate() const;
};

/// Flat "section.key" settings. Unknown keys and malformed values are
/// ConfigErrors.
using Settings = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment.
Settings parse_settings(std::istream& is);
Settings read_settings(const std::filesystem::path& path);
void apply(TrainConfig& cfg, const Settings& s);
Settings to_settings(const TrainConfig& cfg);

/// Linear warmup to peak, then cosine decay to the floor at the last iteration.
double learning_rate(const TrainConfig& cfg, std::size_t iteration);

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name.
template <typename T>
class AdamW {
 public:
  void step(nc::ParamStore<T>& store, const TrainConfig& cfg, double lr);
  std::size_t steps() const { return t_; }

  std::map<std::string, nc::Tensor<T>> m, v;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global l2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(nc::ParamStore<T>& store, double max_norm);

struct StepLog {
  std::size_t iteration = 0;
  mixture::MoHLossBreakdown loss;
  double grad_norm = 0.0;
  double lr = 0.0;
};

template <typename T>
class Trainer {
 public:
  /// Builds the model for the dataset's dimensions; the model horizon must
  /// not exceed the dataset chunk length.
  Trainer(TrainConfig cfg, const envbench::Dataset& data);

  const TrainConfig& config() const { return cfg_; }
  const policy::Policy<T>& policy() const { return policy_; }
  nc::ParamStore<T>& params() { return params_; }
  const AdamW<T>& optimizer() const { return opt_; }
  std::size_t iteration() const { return iteration_; }

  /// One optimizer step. Throws RuntimeFailure on a non-finite loss.
  StepLog step();
  /// Runs until cfg.iterations, writing JSON lines to `metrics` if given and
  /// periodic checkpoints to `checkpoint_dir` if given.
  void run(std::ostream* metrics, const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt);

  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state and iteration from a checkpoint of
  /// the same configuration.
  void restore(const std::filesystem::path& path);

  /// Batch of the given dataset samples truncated to the model horizon.
  policy::Batch make_batch(std::span<const std::size_t> idx) const;

 private:
  TrainConfig cfg_;
  const envbench::Dataset& data_;
  policy::Policy<T> policy_;
  nc::ParamStore<T> params_;
  AdamW<T> opt_;
  std::size_t iteration_ = 0;
};

std::string metrics_line(const StepLog& log);

/// Model ready for inference, as loaded from a checkpoint (always 32-bit).
struct LoadedModel {
  TrainConfig config;
  envbench::EnvConstants env;
  std::size_t iteration = 0;
  std::unique_ptr<policy::Policy<float>> policy;
  nc::ParamStore<float> params;

  envbench::ChunkPolicy chunk_policy();
};

constexpr int kCheckpointVersion = 1;

LoadedModel load_model(const std::filesystem::path& path);
TrainConfig checkpoint_config(const std::filesystem::path& path);

}  // namespace moh::train
