#include "moh/envbench.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <ostream>

#include "moh/errors.hpp"

namespace moh::envbench {

namespace {

double norm(const Vec2& v) { return std::hypot(v[0], v[1]); }
Vec2 sub(const Vec2& a, const Vec2& b) { return {a[0] - b[0], a[1] - b[1]}; }

Vec2 uniform_point(nc::CounterRng& rng) { return {0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform()}; }

constexpr int kDatasetVersion = 1;

}  // namespace

std::string family_name(Family f) { return f == Family::precision ? "precision-reach" : "waypoint-chain"; }

std::size_t suite_task_count(const EnvConstants& c) { return 1 + c.waypoint_layouts; }

std::vector<TaskSpec> make_suite(const EnvConstants& c) {
  if (c.waypoints < 4) throw ConfigError("waypoint chains need at least 4 waypoints");
  std::vector<TaskSpec> suite;
  TaskSpec p;
  p.family = Family::precision;
  p.task_id = 0;
  p.radius = c.precision_radius;
  p.max_steps = c.precision_max_steps;
  suite.push_back(p);
  const nc::CounterRng root(c.layout_seed);
  for (std::size_t l = 0; l < c.waypoint_layouts; ++l) {
    TaskSpec t;
    t.family = Family::waypoint;
    t.task_id = 1 + l;
    t.radius = c.waypoint_radius;
    t.max_steps = c.waypoint_max_steps;
    auto rng = root.derive(l);
    while (t.targets.size() < c.waypoints) {
      const Vec2 w = uniform_point(rng);
      if (!t.targets.empty() && norm(sub(w, t.targets.back())) < c.layout_min_spacing) continue;
      t.targets.push_back(w);
    }
    suite.push_back(std::move(t));
  }
  return suite;
}

void PointMassEnv::step(const Vec2& action, const EnvConstants& c) {
  for (int i = 0; i < 2; ++i) {
    const double a = std::clamp(action[i], -1.0, 1.0);
    vel[i] = c.gamma * vel[i] + c.accel_gain * a * c.dt;
    pos[i] += vel[i] * c.dt;
  }
}

Episode::Episode(const TaskSpec& task, const EnvConstants& c, nc::CounterRng rng)
    : task_(task), c_(c), noise_(rng.derive("obs")) {
  auto init = rng.derive("init");
  env_.pos = uniform_point(init);
  if (task_.family == Family::precision) {
    Vec2 goal = uniform_point(init);
    while (norm(sub(goal, env_.pos)) < 0.2) goal = uniform_point(init);
    targets_ = {goal};
  } else {
    targets_ = task_.targets;
  }
  update_progress();
}

encoder::Observation Episode::observe() {
  encoder::Observation o;
  o.task = task_.task_id;
  o.features.resize(kObsDim);
  o.features[0] = env_.pos[0] + c_.sigma_obs * noise_.normal();
  o.features[1] = env_.pos[1] + c_.sigma_obs * noise_.normal();
  o.features[2] = env_.vel[0] + c_.sigma_obs * noise_.normal();
  o.features[3] = env_.vel[1] + c_.sigma_obs * noise_.normal();
  const std::size_t idx = std::min(index_, targets_.size() - 1);
  if (task_.family == Family::precision || c_.show_waypoint_target) {
    o.features[4] = targets_[idx][0];
    o.features[5] = targets_[idx][1];
  }
  if (task_.family == Family::waypoint) {
    o.features[6] = static_cast<double>(targets_.size() - index_) / static_cast<double>(targets_.size());
  }
  return o;
}

void Episode::step(const Vec2& action) {
  if (done()) return;
  env_.step(action, c_);
  ++steps_;
  update_progress();
}

void Episode::update_progress() {
  if (task_.family == Family::precision) {
    success_ = norm(sub(env_.pos, targets_[0])) < task_.radius && norm(env_.vel) < c_.precision_speed;
    return;
  }
  if (index_ < targets_.size() && norm(sub(env_.pos, targets_[index_])) < task_.radius) ++index_;
  success_ = index_ == targets_.size();
}

Vec2 scripted_expert(const EnvConstants& c, const PointMassEnv& env, const Vec2& target) {
  Vec2 vdes{c.expert_gain * (target[0] - env.pos[0]), c.expert_gain * (target[1] - env.pos[1])};
  const double s = norm(vdes);
  if (s > c.expert_vmax) {
    vdes[0] *= c.expert_vmax / s;
    vdes[1] *= c.expert_vmax / s;
  }
  Vec2 a;
  for (int i = 0; i < 2; ++i) a[i] = std::clamp((vdes[i] - c.gamma * env.vel[i]) / (c.accel_gain * c.dt), -1.0, 1.0);
  return a;
}

EpisodeRecord run_expert(const TaskSpec& task, const EnvConstants& c, nc::CounterRng rng) {
  Episode ep(task, c, rng);
  EpisodeRecord rec;
  while (!ep.done()) {
    rec.observations.push_back(ep.observe());
    const Vec2 a = scripted_expert(c, ep.env(), ep.targets()[std::min(ep.target_index(), ep.targets().size() - 1)]);
    rec.actions.push_back(a);
    rec.prefixes.push_back(1);
    ep.step(a);
  }
  rec.success = ep.success();
  rec.steps = ep.steps();
  return rec;
}

policy::Batch Dataset::batch(std::span<const std::size_t> idx) const {
  const std::size_t B = idx.size(), H = horizon;
  policy::Batch b;
  b.obs.reserve(B);
  b.chunks = nc::Tensor<double>(nc::Shape{B, H, kActionDim});
  b.row_valid = nc::Tensor<std::uint8_t>(nc::Shape{B, H});
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t s = idx[i];
    b.obs.push_back(obs[s]);
    std::copy_n(chunks.data.begin() + s * H * kActionDim, H * kActionDim, b.chunks.data.begin() + i * H * kActionDim);
    std::copy_n(valid.data.begin() + s * H, H, b.row_valid.data.begin() + i * H);
  }
  return b;
}

nc::Tensor<double> Dataset::valid_actions() const {
  std::vector<double> rows;
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (valid[i]) rows.insert(rows.end(), chunks.data.begin() + i * kActionDim, chunks.data.begin() + (i + 1) * kActionDim);
  return nc::Tensor<double>(nc::Shape{rows.size() / kActionDim, kActionDim}, std::move(rows));
}

nlohmann::json constants_json(const EnvConstants& constants) {
  return nlohmann::json{{"dt", constants.dt},
                     {"gamma", constants.gamma},
                     {"accel_gain", constants.accel_gain},
                     {"sigma_obs", constants.sigma_obs},
                     {"precision_radius", constants.precision_radius},
                     {"precision_speed", constants.precision_speed},
                     {"precision_max_steps", constants.precision_max_steps},
                     {"waypoint_radius", constants.waypoint_radius},
                     {"waypoints", constants.waypoints},
                     {"waypoint_layouts", constants.waypoint_layouts},
                     {"waypoint_max_steps", constants.waypoint_max_steps},
                     {"layout_min_spacing", constants.layout_min_spacing},
                     {"layout_seed", constants.layout_seed},
                     {"show_waypoint_target", constants.show_waypoint_target},
                     {"expert_gain", constants.expert_gain},
                     {"expert_vmax", constants.expert_vmax}};
}

nlohmann::json Dataset::manifest() const {
  const auto env = constants_json(constants);
  std::size_t per_family[2] = {0, 0};
  for (auto f : family) ++per_family[f];
  return {{"seed", seed},
          {"horizon", horizon},
          {"episodes_per_task", episodes_per_task},
          {"samples", size()},
          {"samples_precision", per_family[0]},
          {"samples_waypoint", per_family[1]},
          {"skipped_episodes", skipped},
          {"obs_dim", kObsDim},
          {"action_dim", kActionDim},
          {"num_tasks", suite_task_count(constants)},
          {"env", env}};
}

EnvConstants constants_from_json(const nlohmann::json& env) {
  EnvConstants c;
  c.dt = env.at("dt");
  c.gamma = env.at("gamma");
  c.accel_gain = env.at("accel_gain");
  c.sigma_obs = env.at("sigma_obs");
  c.precision_radius = env.at("precision_radius");
  c.precision_speed = env.at("precision_speed");
  c.precision_max_steps = env.at("precision_max_steps");
  c.waypoint_radius = env.at("waypoint_radius");
  c.waypoints = env.at("waypoints");
  c.waypoint_layouts = env.at("waypoint_layouts");
  c.waypoint_max_steps = env.at("waypoint_max_steps");
  c.layout_min_spacing = env.at("layout_min_spacing");
  c.layout_seed = env.at("layout_seed");
  c.show_waypoint_target = env.at("show_waypoint_target");
  c.expert_gain = env.at("expert_gain");
  c.expert_vmax = env.at("expert_vmax");
  return c;
}

namespace {

float f32(double v) { return static_cast<float>(v); }

}  // namespace

Dataset generate_dataset(const EnvConstants& c, std::size_t episodes_per_task, std::size_t horizon,
                         std::uint64_t seed) {
  if (horizon == 0) throw ConfigError("dataset horizon must be positive");
  const auto suite = make_suite(c);
  Dataset d;
  d.constants = c;
  d.horizon = horizon;
  d.seed = seed;
  d.episodes_per_task = episodes_per_task;
  std::vector<double> chunk_rows;
  std::vector<std::uint8_t> valid_rows;
  const nc::CounterRng root(seed);
  // Precision-reach draws a fresh target per episode, so it gets as many
  // episodes as all waypoint layouts together.
  for (const auto& task : suite) {
    const std::size_t episodes =
        task.family == Family::precision ? episodes_per_task * c.waypoint_layouts : episodes_per_task;
    for (std::size_t e = 0; e < episodes; ++e) {
      const auto rec = run_expert(task, c, root.derive(task.task_id).derive(e));
      const std::size_t L = rec.actions.size();
      if (L == 0) {
        ++d.skipped;
        continue;
      }
      for (std::size_t t = 0; t < L; ++t) {
        encoder::Observation o = rec.observations[t];
        for (auto& v : o.features) v = f32(v);
        d.obs.push_back(std::move(o));
        d.family.push_back(task.family == Family::precision ? 0 : 1);
        for (std::size_t j = 0; j < horizon; ++j) {
          const bool inside = t + j < L;
          const Vec2& a = rec.actions[inside ? t + j : L - 1];
          chunk_rows.push_back(f32(a[0]));
          chunk_rows.push_back(f32(a[1]));
          valid_rows.push_back(inside ? 1 : 0);
        }
      }
    }
  }
  const std::size_t M = d.obs.size();
  d.chunks = nc::Tensor<double>(nc::Shape{M, horizon, kActionDim}, std::move(chunk_rows));
  d.valid = nc::Tensor<std::uint8_t>(nc::Shape{M, horizon}, std::move(valid_rows));
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  io::ArrayFile f;
  f.format_version = kDatasetVersion;
  f.meta = d.manifest();
  const std::size_t M = d.size(), H = d.horizon;
  std::vector<float> obs(M * kObsDim), task(M), fam(M), chunks(d.chunks.size()), valid(d.valid.size());
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < kObsDim; ++j) obs[i * kObsDim + j] = f32(d.obs[i].features[j]);
    task[i] = static_cast<float>(d.obs[i].task);
    fam[i] = static_cast<float>(d.family[i]);
  }
  for (std::size_t i = 0; i < chunks.size(); ++i) chunks[i] = f32(d.chunks[i]);
  for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = d.valid[i];
  f.arrays["obs"] = io::Array::f32({M, kObsDim}, obs);
  f.arrays["task"] = io::Array::f32({M}, task);
  f.arrays["family"] = io::Array::f32({M}, fam);
  f.arrays["chunks"] = io::Array::f32({M, H, kActionDim}, chunks);
  f.arrays["valid"] = io::Array::f32({M, H}, valid);
  io::save(path, f);
  auto manifest_path = path;
  manifest_path.replace_extension(".json");
  std::ofstream os(manifest_path);
  if (!os) throw RuntimeFailure("cannot write " + manifest_path.string());
  os << f.meta.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
  const auto f = io::load(path, kDatasetVersion);
  Dataset d;
  try {
    d.constants = constants_from_json(f.meta.at("env"));
    d.horizon = f.meta.at("horizon");
    d.seed = f.meta.at("seed");
    d.episodes_per_task = f.meta.at("episodes_per_task");
    d.skipped = f.meta.at("skipped_episodes");
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure("dataset manifest in " + path.string() + " is incomplete: " + e.what());
  }
  const auto obs = f.at("obs").as_f32();
  const auto task = f.at("task").as_f32();
  const auto fam = f.at("family").as_f32();
  const std::size_t M = task.size();
  if (f.at("obs").shape != nc::Shape{M, kObsDim}) throw ConfigError("dataset observation width mismatch");
  for (std::size_t i = 0; i < M; ++i) {
    encoder::Observation o;
    o.task = static_cast<std::size_t>(task[i]);
    o.features.assign(obs.begin() + i * kObsDim, obs.begin() + (i + 1) * kObsDim);
    d.obs.push_back(std::move(o));
    d.family.push_back(static_cast<std::uint8_t>(fam[i]));
  }
  d.chunks = f.at("chunks").tensor();
  if (d.chunks.shape != nc::Shape{M, d.horizon, kActionDim}) throw ConfigError("dataset chunk shape mismatch");
  const auto valid = f.at("valid").as_f32();
  d.valid = nc::Tensor<std::uint8_t>(nc::Shape{M, d.horizon});
  for (std::size_t i = 0; i < valid.size(); ++i) d.valid[i] = valid[i] != 0.0f;
  return d;
}

template <typename T>
ChunkPolicy wrap_policy(const policy::Policy<T>& p, nc::ParamStore<T>& store) {
  return [&p, &store](std::span<const encoder::Observation> obs, std::span<const nc::CounterRng> rngs,
                      bool per_horizon) { return p.predict(store, obs, rngs, per_horizon); };
}

template ChunkPolicy wrap_policy<float>(const policy::Policy<float>&, nc::ParamStore<float>&);
template ChunkPolicy wrap_policy<double>(const policy::Policy<double>&, nc::ParamStore<double>&);

ChunkPolicy expert_policy(const EnvConstants& c, std::size_t horizon) {
  const auto suite = make_suite(c);
  return [c, horizon, suite](std::span<const encoder::Observation> obs, std::span<const nc::CounterRng>,
                             bool) {
    const std::size_t B = obs.size(), H = horizon;
    policy::Prediction p;
    p.batch = B;
    p.horizons = HorizonSet::single(H);
    p.fused = nc::Tensor<double>(nc::Shape{B, H, kActionDim});
    p.alpha = nc::Tensor<double>(nc::Shape{B * H, 1}, 1.0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& o = obs[b];
      if (o.task >= suite.size()) throw ConfigError("expert policy: unknown task id");
      const auto& task = suite[o.task];
      PointMassEnv env;
      env.pos = {o.features[0], o.features[1]};
      env.vel = {o.features[2], o.features[3]};
      std::vector<Vec2> targets;
      std::size_t idx = 0;
      if (task.family == Family::precision) {
        targets = {{o.features[4], o.features[5]}};
      } else {
        targets = task.targets;
        const double remaining = std::round(o.features[6] * static_cast<double>(targets.size()));
        idx = targets.size() - std::min(static_cast<std::size_t>(remaining), targets.size());
      }
      for (std::size_t k = 0; k < H; ++k) {
        const Vec2 a = scripted_expert(c, env, targets[std::min(idx, targets.size() - 1)]);
        p.fused.data[(b * H + k) * kActionDim] = a[0];
        p.fused.data[(b * H + k) * kActionDim + 1] = a[1];
        env.step(a, c);
        if (task.family == Family::waypoint && idx < targets.size() &&
            norm(sub(env.pos, targets[idx])) < task.radius)
          ++idx;
      }
    }
    p.per_horizon = p.fused;
    p.per_horizon.shape = nc::Shape{B, 1, H, kActionDim};
    return p;
  };
}

std::string executor_name(const Executor& e) {
  if (const auto* f = std::get_if<FixedPrefix>(&e)) return "fixed-" + std::to_string(f->p);
  const auto& cc = std::get<dyninfer::ConsensusConfig>(e);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "consensus-r%g-n%zu-m%zu", cc.r, cc.n, cc.m);
  return buf;
}

double EvalResult::mixed_success() const {
  if (families.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : families) s += f.success_rate;
  return s / static_cast<double>(families.size());
}

EvalResult evaluate(const ChunkPolicy& policy, const EnvConstants& c, const Executor& executor,
                    const EvalOptions& opt) {
  if (opt.trials == 0) throw ConfigError("eval.trials must be positive");
  if (const auto* f = std::get_if<FixedPrefix>(&executor); f && f->p == 0) {
    throw ConfigError("fixed prefix must be >= 1");
  }
  const auto suite = make_suite(c);
  const bool consensus = std::holds_alternative<dyninfer::ConsensusConfig>(executor);
  const Family fams[2] = {Family::precision, Family::waypoint};

  struct Trial {
    Episode ep;
    nc::CounterRng policy_rng;
    std::deque<Vec2> queue;
    std::size_t replans = 0;
    std::size_t planned = 0;  // sum of selected prefix lengths
    std::size_t executed_in_chunk = 0;
    EpisodeRecord rec;
  };
  std::vector<Trial> trials;
  const nc::CounterRng root(opt.seed);
  for (std::size_t fi = 0; fi < 2; ++fi) {
    for (std::size_t i = 0; i < opt.trials; ++i) {
      const TaskSpec& task = fams[fi] == Family::precision ? suite[0] : suite[1 + i % c.waypoint_layouts];
      const auto rng = root.derive(fi).derive(i);
      trials.push_back(Trial{Episode(task, c, rng.derive("episode")), rng.derive("policy"), {}, 0, 0, 0, {}});
    }
  }

  std::vector<std::size_t> need;
  std::vector<encoder::Observation> obs;
  std::vector<nc::CounterRng> rngs;
  for (;;) {
    need.clear();
    bool any_running = false;
    for (std::size_t t = 0; t < trials.size(); ++t) {
      if (trials[t].ep.done()) continue;
      any_running = true;
      if (trials[t].queue.empty()) need.push_back(t);
    }
    if (!any_running) break;
    for (std::size_t start = 0; start < need.size(); start += opt.batch) {
      const std::size_t end = std::min(need.size(), start + opt.batch);
      obs.clear();
      rngs.clear();
      for (std::size_t j = start; j < end; ++j) {
        Trial& tr = trials[need[j]];
        obs.push_back(tr.ep.observe());
        rngs.push_back(tr.policy_rng.derive(tr.replans));
      }
      const auto pred = policy(obs, rngs, consensus);
      const std::size_t H = pred.fused.shape[1], N = pred.horizons.size();
      if (pred.fused.shape[2] != kActionDim) throw ConfigError("policy action width does not match the environment");
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t b = j - start;
        Trial& tr = trials[need[j]];
        std::size_t K = 0;
        if (!consensus) {
          K = std::min(std::get<FixedPrefix>(executor).p, H);
        } else {
          nc::Tensor<double> fused(nc::Shape{H, kActionDim}), ph(nc::Shape{N, H, kActionDim}),
              alpha(nc::Shape{H, N});
          std::copy_n(pred.fused.data.begin() + b * H * kActionDim, H * kActionDim, fused.data.begin());
          std::copy_n(pred.per_horizon.data.begin() + b * N * H * kActionDim, N * H * kActionDim, ph.data.begin());
          std::copy_n(pred.alpha.data.begin() + b * H * N, H * N, alpha.data.begin());
          const auto trace =
              dyninfer::consensus_prefix(fused, ph, alpha, pred.horizons, std::get<dyninfer::ConsensusConfig>(executor));
          K = trace.k_exec;
          if (opt.trace) dyninfer::write_trace(*opt.trace, trace);
        }
        for (std::size_t k = 0; k < K; ++k) {
          const auto a = pred.fused_step(b, k);
          tr.queue.push_back({a[0], a[1]});
        }
        ++tr.replans;
        tr.planned += K;
        if (opt.keep_records) {
          tr.rec.observations.push_back(obs[b]);
          tr.rec.prefixes.push_back(0);
        }
      }
    }
    for (auto& tr : trials) {
      if (tr.ep.done() || tr.queue.empty()) continue;
      const Vec2 a = tr.queue.front();
      tr.queue.pop_front();
      tr.ep.step(a);
      if (opt.keep_records) {
        tr.rec.actions.push_back(a);
        ++tr.rec.prefixes.back();
      }
      if (tr.ep.done()) tr.queue.clear();
    }
  }

  EvalResult res;
  const std::string ename = executor_name(executor);
  for (std::size_t fi = 0; fi < 2; ++fi) {
    FamilyResult fr;
    fr.family = fams[fi];
    fr.executor = ename;
    fr.trials = opt.trials;
    std::size_t succ = 0, steps = 0, planned = 0, replans = 0;
    for (std::size_t i = 0; i < opt.trials; ++i) {
      const Trial& tr = trials[fi * opt.trials + i];
      succ += tr.ep.success();
      steps += tr.ep.steps();
      planned += tr.planned;
      replans += tr.replans;
    }
    fr.success_rate = static_cast<double>(succ) / static_cast<double>(opt.trials);
    fr.mean_steps = static_cast<double>(steps) / static_cast<double>(opt.trials);
    fr.mean_prefix = replans ? static_cast<double>(planned) / static_cast<double>(replans) : 0.0;
    res.families.push_back(fr);
  }
  if (opt.keep_records) {
    for (auto& tr : trials) {
      tr.rec.success = tr.ep.success();
      tr.rec.steps = tr.ep.steps();
      res.records.push_back(std::move(tr.rec));
    }
  }
  return res;
}

void write_success_csv(std::ostream& os, const std::vector<FamilyResult>& rows, bool header) {
  if (header) os << "family,executor,success_rate,mean_steps,mean_prefix\n";
  for (const auto& r : rows) {
    os << family_name(r.family) << ',' << r.executor << ',' << r.success_rate << ',' << r.mean_steps << ','
       << r.mean_prefix << '\n';
  }
}

}  // namespace moh::envbench
