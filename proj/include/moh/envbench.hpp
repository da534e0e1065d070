#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "moh/dyninfer.hpp"
#include "moh/encoder.hpp"
#include "moh/io.hpp"
#include "moh/numcore/rng.hpp"
#include "moh/policy_heads.hpp"

namespace moh::envbench {

using Vec2 = std::array<double, 2>;

enum class Family { precision, waypoint };
std::string family_name(Family f);

/// Environment and suite constants. The defaults are the shipped suite.
struct EnvConstants {
  double dt = 1.0;
  double gamma = 0.9;        // velocity damping per step
  double accel_gain = 0.02;  // acceleration per unit action
  double sigma_obs = 0.005;
  double precision_radius = 0.02;
  double precision_speed = 0.01;  // must also be nearly at rest
  std::size_t precision_max_steps = 60;
  double waypoint_radius = 0.1;
  std::size_t waypoints = 5;
  std::size_t waypoint_layouts = 8;
  std::size_t waypoint_max_steps = 120;
  double layout_min_spacing = 0.3;
  std::uint64_t layout_seed = 7;
  /// When false the current waypoint is not observed; the policy must know
  /// the route from the task id and the remaining-waypoint count.
  bool show_waypoint_target = true;
  // Scripted expert: velocity command toward the goal, then deadbeat tracking.
  double expert_gain = 0.3;
  double expert_vmax = 0.05;
};

constexpr std::size_t kObsDim = 7;  // pos(2), vel(2), target(2), remaining fraction
constexpr std::size_t kActionDim = 2;

nlohmann::json constants_json(const EnvConstants& c);
EnvConstants constants_from_json(const nlohmann::json& j);

struct TaskSpec {
  Family family = Family::precision;
  std::size_t task_id = 0;    // encoder task embedding index
  std::vector<Vec2> targets;  // fixed waypoints; empty for precision (drawn per episode)
  double radius = 0.0;
  std::size_t max_steps = 0;
};

/// Task 0 is precision-reach; tasks 1..L are waypoint chains with fixed layouts.
std::vector<TaskSpec> make_suite(const EnvConstants& c);
std::size_t suite_task_count(const EnvConstants& c);

struct PointMassEnv {
  Vec2 pos{}, vel{};
  /// Clips the action to [-1, 1], then v = gamma * v + gain * a * dt; p += v * dt.
  void step(const Vec2& action, const EnvConstants& c);
};

/// One episode in progress: dynamics plus task progress.
class Episode {
 public:
  Episode(const TaskSpec& task, const EnvConstants& c, nc::CounterRng rng);

  const TaskSpec& task() const { return task_; }
  const PointMassEnv& env() const { return env_; }
  const std::vector<Vec2>& targets() const { return targets_; }
  std::size_t target_index() const { return index_; }
  std::size_t steps() const { return steps_; }
  bool success() const { return success_; }
  bool done() const { return success_ || steps_ >= task_.max_steps; }

  /// Noisy observation; each call consumes fresh noise draws.
  encoder::Observation observe();
  void step(const Vec2& action);

 private:
  void update_progress();

  TaskSpec task_;
  EnvConstants c_;
  PointMassEnv env_;
  std::vector<Vec2> targets_;
  std::size_t index_ = 0;
  std::size_t steps_ = 0;
  bool success_ = false;
  nc::CounterRng noise_;
};

/// PD-style controller on the true state toward the current target.
Vec2 scripted_expert(const EnvConstants& c, const PointMassEnv& env, const Vec2& target);

struct EpisodeRecord {
  std::vector<encoder::Observation> observations;  // one per executed step
  std::vector<Vec2> actions;
  std::vector<std::size_t> prefixes;  // executed prefix length per prediction
  bool success = false;
  std::size_t steps = 0;
};

/// Runs the expert (noise-free dynamics, noisy recorded observations).
EpisodeRecord run_expert(const TaskSpec& task, const EnvConstants& c, nc::CounterRng rng);

/// Chunk-aligned demonstrations: obs [M x obs_dim], task [M], chunks
/// [M x H x 2], valid [M x H] (0 for tail padding), family [M].
struct Dataset {
  EnvConstants constants;
  std::size_t horizon = 0;
  std::uint64_t seed = 0;
  std::size_t episodes_per_task = 0;
  std::size_t skipped = 0;
  std::vector<encoder::Observation> obs;
  std::vector<std::uint8_t> family;
  nc::Tensor<double> chunks;
  nc::Tensor<std::uint8_t> valid;

  std::size_t size() const { return obs.size(); }
  /// Training batch from the given sample indices.
  policy::Batch batch(std::span<const std::size_t> idx) const;
  /// All valid action rows [R x 2] (for bin fitting).
  nc::Tensor<double> valid_actions() const;
  nlohmann::json manifest() const;
};

Dataset generate_dataset(const EnvConstants& c, std::size_t episodes_per_task, std::size_t horizon,
                         std::uint64_t seed);
/// Writes the container and a sibling "<name>.json" manifest.
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

/// Batched chunk predictor: observations plus one rng per observation.
using ChunkPolicy = std::function<policy::Prediction(std::span<const encoder::Observation>,
                                                     std::span<const nc::CounterRng>, bool per_horizon)>;

template <typename T>
ChunkPolicy wrap_policy(const policy::Policy<T>& p, nc::ParamStore<T>& store);
/// Expert wrapped as a chunk policy (open-loop rollout of the expert from the
/// observed state), for sanity checks of the evaluation loop.
ChunkPolicy expert_policy(const EnvConstants& c, std::size_t horizon);

struct FixedPrefix {
  std::size_t p = 5;
};
using Executor = std::variant<FixedPrefix, dyninfer::ConsensusConfig>;
std::string executor_name(const Executor& e);

struct FamilyResult {
  Family family = Family::precision;
  std::string executor;
  std::size_t trials = 0;
  double success_rate = 0.0;
  double mean_steps = 0.0;
  double mean_prefix = 0.0;
};

struct EvalOptions {
  std::size_t trials = 200;  // per family
  std::uint64_t seed = 1;
  std::size_t batch = 64;    // predictions per policy call
  bool keep_records = false;
  std::ostream* trace = nullptr;  // consensus traces as JSON lines
};

struct EvalResult {
  std::vector<FamilyResult> families;
  std::vector<EpisodeRecord> records;  // trial order, when kept
  double mixed_success() const;
};

/// Seeded lockstep rollouts. The chunk length is that of the policy's
/// predictions; fixed prefixes are capped at the chunk length.
EvalResult evaluate(const ChunkPolicy& policy, const EnvConstants& c, const Executor& executor,
                    const EvalOptions& opt);

/// CSV columns: family,executor,success_rate,mean_steps,mean_prefix.
void write_success_csv(std::ostream& os, const std::vector<FamilyResult>& rows, bool header = true);

}  // namespace moh::envbench
