#include "moh/train.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "moh/errors.hpp"

namespace moh::train {

void TrainConfig::validate() const {
  model.validate();
  if (batch == 0) throw ConfigError("train.batch must be positive");
  if (!(peak_lr > 0) || lr_floor < 0 || lr_floor > peak_lr) throw ConfigError("need 0 <= train.lr_floor <= train.peak_lr, peak > 0");
  if (clip < 0) throw ConfigError("train.clip must be non-negative");
  if (dtype != "f32" && dtype != "f64") throw ConfigError("train.dtype must be f32 or f64");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must lie in [0, 1)");
}

Settings parse_settings(std::istream& is) {
  Settings s;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string x) {
    const auto b = x.find_first_not_of(" \t\r");
    const auto e = x.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (auto c = line.find('#'); c != std::string::npos) line.resize(c);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    s[key] = value;
  }
  return s;
}

Settings read_settings(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  return parse_settings(is);
}

namespace {

std::size_t to_size(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(k + ": expected a non-negative integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(k + ": expected an unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& k, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(k + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(k + ": expected true/false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void apply(TrainConfig& c, const Settings& s) {
  auto& m = c.model;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"model.head", [&](auto&, auto& v) { m.head = policy::parse_head(v); }},
      {"model.obs_dim", [&](auto& k, auto& v) { m.obs_dim = to_size(k, v); }},
      {"model.num_tasks", [&](auto& k, auto& v) { m.num_tasks = to_size(k, v); }},
      {"model.action_dim", [&](auto& k, auto& v) { m.action_dim = to_size(k, v); }},
      {"model.context_len", [&](auto& k, auto& v) { m.context_len = to_size(k, v); }},
      {"model.d_model", [&](auto& k, auto& v) { m.d_model = to_size(k, v); }},
      {"model.encoder_hidden", [&](auto& k, auto& v) { m.encoder_hidden = to_size(k, v); }},
      {"model.layers", [&](auto& k, auto& v) { m.layers = to_size(k, v); }},
      {"model.heads", [&](auto& k, auto& v) { m.heads = to_size(k, v); }},
      {"model.ffn", [&](auto& k, auto& v) { m.ffn = to_size(k, v); }},
      {"model.bins", [&](auto& k, auto& v) { m.bins = to_size(k, v); }},
      {"horizon.max", [&](auto& k, auto& v) { m.max_horizon = to_size(k, v); }},
      {"horizon.stride", [&](auto& k, auto& v) { m.stride = to_size(k, v); }},
      {"moh.enabled", [&](auto& k, auto& v) { m.moh = to_bool(k, v); }},
      {"moh.fusion",
       [&](auto& k, auto& v) {
         if (v == "gated")
           m.fusion = mixture::FusionMode::gated;
         else if (v == "average")
           m.fusion = mixture::FusionMode::average;
         else
           throw ConfigError(k + ": expected gated or average, got '" + v + "'");
       }},
      {"moh.lambda_ind", [&](auto& k, auto& v) { m.lambda_ind = to_double(k, v); }},
      {"moh.lambda_bal", [&](auto& k, auto& v) { m.lambda_bal = to_double(k, v); }},
      {"moh.loss_reweight", [&](auto& k, auto& v) { m.loss_reweight = to_bool(k, v); }},
      {"flow.ode_steps", [&](auto& k, auto& v) { m.ode_steps = to_size(k, v); }},
      {"train.peak_lr", [&](auto& k, auto& v) { c.peak_lr = to_double(k, v); }},
      {"train.warmup", [&](auto& k, auto& v) { c.warmup = to_size(k, v); }},
      {"train.lr_floor", [&](auto& k, auto& v) { c.lr_floor = to_double(k, v); }},
      {"train.weight_decay", [&](auto& k, auto& v) { c.weight_decay = to_double(k, v); }},
      {"train.beta1", [&](auto& k, auto& v) { c.beta1 = to_double(k, v); }},
      {"train.beta2", [&](auto& k, auto& v) { c.beta2 = to_double(k, v); }},
      {"train.adam_eps", [&](auto& k, auto& v) { c.adam_eps = to_double(k, v); }},
      {"train.batch", [&](auto& k, auto& v) { c.batch = to_size(k, v); }},
      {"train.iterations", [&](auto& k, auto& v) { c.iterations = to_size(k, v); }},
      {"train.clip", [&](auto& k, auto& v) { c.clip = to_double(k, v); }},
      {"train.seed", [&](auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"train.dtype", [&](auto&, auto& v) { c.dtype = v; }},
      {"train.checkpoint_every", [&](auto& k, auto& v) { c.checkpoint_every = to_size(k, v); }},
  };
  for (const auto& [k, v] : s) {
    auto it = setters.find(k);
    if (it == setters.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(k, v);
  }
}

Settings to_settings(const TrainConfig& c) {
  const auto& m = c.model;
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  return {
      {"model.head", policy::head_name(m.head)},
      {"model.obs_dim", std::to_string(m.obs_dim)},
      {"model.num_tasks", std::to_string(m.num_tasks)},
      {"model.action_dim", std::to_string(m.action_dim)},
      {"model.context_len", std::to_string(m.context_len)},
      {"model.d_model", std::to_string(m.d_model)},
      {"model.encoder_hidden", std::to_string(m.encoder_hidden)},
      {"model.layers", std::to_string(m.layers)},
      {"model.heads", std::to_string(m.heads)},
      {"model.ffn", std::to_string(m.ffn)},
      {"model.bins", std::to_string(m.bins)},
      {"horizon.max", std::to_string(m.max_horizon)},
      {"horizon.stride", std::to_string(m.stride)},
      {"moh.enabled", b(m.moh)},
      {"moh.fusion", m.fusion == mixture::FusionMode::gated ? "gated" : "average"},
      {"moh.lambda_ind", fmt(m.lambda_ind)},
      {"moh.lambda_bal", fmt(m.lambda_bal)},
      {"moh.loss_reweight", b(m.loss_reweight)},
      {"flow.ode_steps", std::to_string(m.ode_steps)},
      {"train.peak_lr", fmt(c.peak_lr)},
      {"train.warmup", std::to_string(c.warmup)},
      {"train.lr_floor", fmt(c.lr_floor)},
      {"train.weight_decay", fmt(c.weight_decay)},
      {"train.beta1", fmt(c.beta1)},
      {"train.beta2", fmt(c.beta2)},
      {"train.adam_eps", fmt(c.adam_eps)},
      {"train.batch", std::to_string(c.batch)},
      {"train.iterations", std::to_string(c.iterations)},
      {"train.clip", fmt(c.clip)},
      {"train.seed", std::to_string(c.seed)},
      {"train.dtype", c.dtype},
      {"train.checkpoint_every", std::to_string(c.checkpoint_every)},
  };
}

double learning_rate(const TrainConfig& cfg, std::size_t it) {
  if (it < cfg.warmup) return cfg.peak_lr * static_cast<double>(it + 1) / static_cast<double>(cfg.warmup);
  const std::size_t span = cfg.iterations > cfg.warmup + 1 ? cfg.iterations - cfg.warmup - 1 : 1;
  const double progress = std::min(1.0, static_cast<double>(it - cfg.warmup) / static_cast<double>(span));
  return cfg.lr_floor + 0.5 * (cfg.peak_lr - cfg.lr_floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void AdamW<T>::step(nc::ParamStore<T>& store, const TrainConfig& cfg, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (auto& [name, p] : store) {
    auto& mm = m[name];
    auto& vv = v[name];
    if (mm.shape != p.value.shape) mm = nc::Tensor<T>(p.value.shape);
    if (vv.shape != p.value.shape) vv = nc::Tensor<T>(p.value.shape);
    const bool has_grad = p.grad.shape == p.value.shape;
    const T decay = p.decay ? static_cast<T>(lr * cfg.weight_decay) : T(0);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = has_grad ? p.grad[i] : T(0);
      mm[i] = b1 * mm[i] + (T(1) - b1) * g;
      vv[i] = b2 * vv[i] + (T(1) - b2) * g * g;
      const T mhat = mm[i] / static_cast<T>(bc1);
      const T vhat = vv[i] / static_cast<T>(bc2);
      p.value[i] -= decay * p.value[i] + static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.adam_eps));
    }
  }
}

template <typename T>
double clip_grad_norm(nc::ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : store)
    for (const T g : p.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& [name, p] : store)
      for (T& g : p.grad.data) g *= s;
  }
  return norm;
}

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, const envbench::Dataset& data)
    : cfg_([&] {
        cfg.model.obs_dim = envbench::kObsDim;
        cfg.model.action_dim = envbench::kActionDim;
        cfg.model.num_tasks = envbench::suite_task_count(data.constants);
        cfg.validate();
        return cfg;
      }()),
      data_(data),
      policy_(cfg_.model) {
  if (cfg_.model.max_horizon > data.horizon) {
    throw ConfigError("model horizon " + std::to_string(cfg_.model.max_horizon) + " exceeds the dataset chunk length " +
                      std::to_string(data.horizon));
  }
  if (data.size() == 0) throw ConfigError("dataset is empty");
  policy_.init(params_, nc::CounterRng(cfg_.seed).derive("init"));
  policy_.set_scaler(policy::FeatureScaler::fit(data.obs));
  if (cfg_.model.head == policy::HeadType::classification) {
    policy_.set_grid(policy::BinGrid::fit(data.valid_actions(), cfg_.model.bins));
  }
}

template <typename T>
policy::Batch Trainer<T>::make_batch(std::span<const std::size_t> idx) const {
  auto b = data_.batch(idx);
  const std::size_t H = cfg_.model.max_horizon, Hd = data_.horizon, B = idx.size(), da = envbench::kActionDim;
  if (H == Hd) return b;
  nc::Tensor<double> chunks(nc::Shape{B, H, da});
  nc::Tensor<std::uint8_t> valid(nc::Shape{B, H});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy_n(b.chunks.data.begin() + i * Hd * da, H * da, chunks.data.begin() + i * H * da);
    std::copy_n(b.row_valid.data.begin() + i * Hd, H, valid.data.begin() + i * H);
  }
  b.chunks = std::move(chunks);
  b.row_valid = std::move(valid);
  return b;
}

template <typename T>
StepLog Trainer<T>::step() {
  const nc::CounterRng root(cfg_.seed);
  auto pick = root.derive("batch").derive(iteration_);
  std::vector<std::size_t> idx(cfg_.batch);
  for (auto& i : idx) i = static_cast<std::size_t>(pick.below(data_.size()));
  const auto batch = make_batch(idx);

  params_.zero_grad();
  nc::Tape<T> tape;
  nc::Binder<T> bind(tape, params_);
  auto g = policy_.loss(bind, batch, root.derive("noise").derive(iteration_));
  StepLog log;
  log.iteration = iteration_;
  log.loss = g.breakdown;
  if (!std::isfinite(log.loss.total)) {
    throw RuntimeFailure("non-finite loss at iteration " + std::to_string(iteration_));
  }
  tape.backward(g.total);
  log.grad_norm = clip_grad_norm(params_, cfg_.clip);
  if (!std::isfinite(log.grad_norm)) {
    throw RuntimeFailure("non-finite gradient at iteration " + std::to_string(iteration_));
  }
  log.lr = learning_rate(cfg_, iteration_);
  opt_.step(params_, cfg_, log.lr);
  ++iteration_;
  return log;
}

std::string metrics_line(const StepLog& log) {
  nlohmann::json j{{"iter", log.iteration},     {"loss_mix", log.loss.mix},   {"loss_ind", log.loss.ind},
                   {"loss_bal", log.loss.bal},  {"total", log.loss.total},    {"grad_norm", log.grad_norm},
                   {"lr", log.lr}};
  return j.dump();
}

template <typename T>
void Trainer<T>::run(std::ostream* metrics, const std::optional<std::filesystem::path>& checkpoint_dir) {
  while (iteration_ < cfg_.iterations) {
    const auto log = step();
    if (metrics) *metrics << metrics_line(log) << '\n';
    if (checkpoint_dir && cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0 &&
        iteration_ < cfg_.iterations) {
      save(*checkpoint_dir / ("ckpt_" + std::to_string(iteration_) + ".bin"));
    }
  }
  if (metrics) metrics->flush();
}

namespace {

template <typename T>
io::Array pack(const nc::Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>)
    return io::Array::f32(t.shape, std::vector<float>(t.data.begin(), t.data.end()));
  else
    return io::Array::f64(t.shape, std::vector<double>(t.data.begin(), t.data.end()));
}

template <typename T>
nc::Tensor<T> unpack(const io::Array& a) {
  nc::Tensor<T> t(a.shape);
  if constexpr (std::is_same_v<T, float>) {
    if (a.dtype != "f32") throw ConfigError("checkpoint array dtype " + a.dtype + " does not match f32 training");
    const auto v = a.as_f32();
    t.data.assign(v.begin(), v.end());
  } else {
    if (a.dtype != "f64") throw ConfigError("checkpoint array dtype " + a.dtype + " does not match f64 training");
    const auto v = a.as_f64();
    t.data.assign(v.begin(), v.end());
  }
  return t;
}

nlohmann::json grid_json(const std::optional<policy::BinGrid>& g) {
  if (!g) return nullptr;
  return {{"bins", g->bins}, {"lo", g->lo}, {"hi", g->hi}};
}

nlohmann::json scaler_json(const std::optional<policy::FeatureScaler>& f) {
  if (!f) return nullptr;
  return {{"mean", f->mean}, {"scale", f->scale}};
}

std::optional<policy::FeatureScaler> scaler_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  policy::FeatureScaler f;
  f.mean = j.at("mean").get<std::vector<double>>();
  f.scale = j.at("scale").get<std::vector<double>>();
  return f;
}

std::optional<policy::BinGrid> grid_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  policy::BinGrid g;
  g.bins = j.at("bins");
  g.lo = j.at("lo").get<std::vector<double>>();
  g.hi = j.at("hi").get<std::vector<double>>();
  return g;
}

TrainConfig config_from(const nlohmann::json& meta) {
  TrainConfig cfg;
  train::apply(cfg, meta.at("config").get<Settings>());
  cfg.validate();
  return cfg;
}

}  // namespace

template <typename T>
void Trainer<T>::save(const std::filesystem::path& path) const {
  io::ArrayFile f;
  f.format_version = kCheckpointVersion;
  f.meta["config"] = to_settings(cfg_);
  f.meta["iteration"] = iteration_;
  f.meta["rng_state"] = {{"key", nc::CounterRng(cfg_.seed).key()}, {"counter", iteration_}};
  f.meta["adam_steps"] = opt_.steps();
  f.meta["grid"] = grid_json(policy_.grid());
  f.meta["obs_scaler"] = scaler_json(policy_.scaler());
  f.meta["env"] = envbench::constants_json(data_.constants);
  for (const auto& [name, p] : params_) {
    f.arrays["param/" + name] = pack(p.value);
    auto it = opt_.m.find(name);
    if (it != opt_.m.end()) {
      f.arrays["adam.m/" + name] = pack(it->second);
      f.arrays["adam.v/" + name] = pack(opt_.v.at(name));
    }
  }
  io::save(path, f);
}

template <typename T>
void Trainer<T>::restore(const std::filesystem::path& path) {
  const auto f = io::load(path, kCheckpointVersion);
  const auto cfg = config_from(f.meta);
  if (to_settings(cfg) != to_settings(cfg_)) throw ConfigError("checkpoint configuration differs from the trainer's");
  for (auto& [name, p] : params_) {
    auto v = unpack<T>(f.at("param/" + name));
    if (v.shape != p.value.shape) throw ConfigError("checkpoint shape mismatch for " + name);
    p.value = std::move(v);
  }
  opt_ = AdamW<T>();
  opt_.t_ = f.meta.at("adam_steps");
  for (const auto& [key, a] : f.arrays) {
    if (key.rfind("adam.m/", 0) == 0) opt_.m[key.substr(7)] = unpack<T>(a);
    if (key.rfind("adam.v/", 0) == 0) opt_.v[key.substr(7)] = unpack<T>(a);
  }
  if (auto g = grid_from(f.meta.at("grid"))) policy_.set_grid(*g);
  if (auto sc = scaler_from(f.meta.at("obs_scaler"))) policy_.set_scaler(*sc);
  iteration_ = f.meta.at("iteration");
}

envbench::ChunkPolicy LoadedModel::chunk_policy() { return envbench::wrap_policy(*policy, params); }

TrainConfig checkpoint_config(const std::filesystem::path& path) {
  return config_from(io::load(path, kCheckpointVersion).meta);
}

LoadedModel load_model(const std::filesystem::path& path) {
  const auto f = io::load(path, kCheckpointVersion);
  LoadedModel m;
  m.config = config_from(f.meta);
  m.iteration = f.meta.at("iteration");
  m.env = envbench::constants_from_json(f.meta.at("env"));
  m.policy = std::make_unique<policy::Policy<float>>(m.config.model);
  m.policy->init(m.params, nc::CounterRng(0));
  for (auto& [name, p] : m.params) {
    const auto& a = f.at("param/" + name);
    if (a.shape != p.value.shape) throw ConfigError("checkpoint shape mismatch for " + name);
    if (a.dtype == "f32") {
      const auto v = a.as_f32();
      p.value.data.assign(v.begin(), v.end());
    } else {
      const auto d = a.as_f64();
      for (std::size_t i = 0; i < d.size(); ++i) p.value.data[i] = static_cast<float>(d[i]);
    }
  }
  if (auto g = grid_from(f.meta.at("grid"))) m.policy->set_grid(*g);
  if (auto sc = scaler_from(f.meta.at("obs_scaler"))) m.policy->set_scaler(*sc);
  return m;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm<float>(nc::ParamStore<float>&, double);
template double clip_grad_norm<double>(nc::ParamStore<double>&, double);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace moh::train
