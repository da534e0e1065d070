#include "moh/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "moh/errors.hpp"

namespace moh::cli {

namespace fs = std::filesystem;

fs::path resolve(const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  if (const char* root = std::getenv("MOH_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

void apply_env(envbench::EnvConstants& c, const train::Settings& s) {
  auto j = envbench::constants_json(c);
  for (const auto& [key, value] : s) {
    if (key.rfind("env.", 0) != 0) throw ConfigError("unknown environment key '" + key + "'");
    const std::string field = key.substr(4);
    if (!j.contains(field)) throw ConfigError("unknown environment key '" + key + "'");
    auto& slot = j[field];
    try {
      if (slot.is_boolean()) {
        if (value != "true" && value != "false") throw std::invalid_argument(value);
        slot = value == "true";
      } else if (slot.is_number_unsigned()) {
        std::size_t pos = 0;
        const auto x = std::stoull(value, &pos);
        if (pos != value.size() || value.front() == '-') throw std::invalid_argument(value);
        slot = x;
      } else {
        std::size_t pos = 0;
        const double x = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        slot = x;
      }
    } catch (const std::exception&) {
      throw ConfigError(key + ": bad value '" + value + "'");
    }
  }
  c = envbench::constants_from_json(j);
}

train::Settings parse_overrides(const std::vector<std::string>& kv) {
  train::Settings s;
  for (const auto& x : kv) {
    const auto eq = x.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + x + "'");
    s[x.substr(0, eq)] = x.substr(eq + 1);
  }
  return s;
}

envbench::Dataset run_generate(const GenerateOptions& o, std::ostream& log) {
  envbench::EnvConstants c;
  apply_env(c, o.env);
  auto d = envbench::generate_dataset(c, o.episodes, o.horizon, o.seed);
  const auto out = resolve(o.out);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  envbench::save_dataset(out, d);
  log << d.manifest().dump() << '\n';
  return d;
}

train::TrainConfig build_train_config(const std::optional<fs::path>& config, const train::Settings& overrides) {
  train::TrainConfig cfg;
  if (config) train::apply(cfg, train::read_settings(resolve(*config)));
  train::apply(cfg, overrides);
  return cfg;
}

namespace {

template <typename T>
void train_with(const train::TrainConfig& cfg, const envbench::Dataset& data, const fs::path& out, std::ostream& log) {
  train::Trainer<T> trainer(cfg, data);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw RuntimeFailure("cannot write " + (out / "metrics.jsonl").string());
  trainer.run(&metrics, out);
  trainer.save(out / "final.bin");
  log << "trained " << trainer.iteration() << " iterations -> " << (out / "final.bin").string() << '\n';
}

void train_config(const train::TrainConfig& cfg, const envbench::Dataset& data, const fs::path& out,
                  std::ostream& log) {
  if (cfg.dtype == "f64")
    train_with<double>(cfg, data, out, log);
  else
    train_with<float>(cfg, data, out, log);
}

}  // namespace

void run_train(const TrainOptions& o, std::ostream& log) {
  const auto cfg = build_train_config(o.config, o.overrides);
  const auto data = envbench::load_dataset(resolve(o.data));
  train_config(cfg, data, resolve(o.out), log);
}

envbench::Executor make_executor(const ExecutorOptions& e) {
  if (e.executor == "fixed") return envbench::FixedPrefix{e.prefix};
  if (e.executor == "consensus") return dyninfer::ConsensusConfig{e.r, e.n, e.m};
  throw ConfigError("executor must be fixed or consensus, got '" + e.executor + "'");
}

namespace {

std::ofstream open_out(const fs::path& p) {
  const auto path = resolve(p);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  return os;
}

void check_consensus(const envbench::Executor& ex, const train::TrainConfig& cfg) {
  if (const auto* cc = std::get_if<dyninfer::ConsensusConfig>(&ex)) {
    cc->validate(cfg.model.max_horizon);
    if (cfg.model.horizons().size() < 2) throw ConfigError("consensus execution needs a model with several horizons");
  }
}

}  // namespace

envbench::EvalResult run_eval(const EvalOptions& o, std::ostream& log) {
  auto model = train::load_model(resolve(o.checkpoint));
  const auto ex = make_executor(o.executor);
  check_consensus(ex, model.config);
  std::optional<std::ofstream> trace;
  if (o.trace) trace = open_out(*o.trace);
  envbench::EvalOptions eo;
  eo.trials = o.trials;
  eo.seed = o.seed;
  eo.trace = trace ? &*trace : nullptr;
  const auto res = envbench::evaluate(model.chunk_policy(), model.env, ex, eo);
  if (o.out) {
    auto os = open_out(*o.out);
    envbench::write_success_csv(os, res.families);
  }
  envbench::write_success_csv(log, res.families);
  log << "mixed_success," << res.mixed_success() << '\n';
  return res;
}

void run_rollout(const RolloutOptions& o, std::ostream& out) {
  auto model = train::load_model(resolve(o.checkpoint));
  const auto ex = make_executor(o.executor);
  check_consensus(ex, model.config);
  std::size_t fi = 0;
  if (o.family == "waypoint")
    fi = 1;
  else if (o.family != "precision")
    throw ConfigError("family must be precision or waypoint");
  envbench::EvalOptions eo;
  eo.trials = o.trial + 1;
  eo.seed = o.seed;
  eo.keep_records = true;
  const auto res = envbench::evaluate(model.chunk_policy(), model.env, ex, eo);
  const auto& rec = res.records.at(fi * eo.trials + o.trial);
  nlohmann::json j{{"family", o.family}, {"trial", o.trial},   {"executor", envbench::executor_name(ex)},
                   {"success", rec.success}, {"steps", rec.steps}, {"prefixes", rec.prefixes}};
  auto& pos = j["positions"] = nlohmann::json::array();
  auto& act = j["actions"] = nlohmann::json::array();
  for (const auto& ob : rec.observations) pos.push_back({ob.features[0], ob.features[1]});
  for (const auto& a : rec.actions) act.push_back({a[0], a[1]});
  out << j.dump() << '\n';
}

void run_sweep_horizons(const SweepOptions& o, std::ostream& log) {
  if (o.strides.empty()) throw ConfigError("sweep-horizons needs at least one stride");
  const auto base = build_train_config(o.config, o.overrides);
  const auto data = envbench::load_dataset(resolve(o.data));
  const auto out = resolve(o.out);
  fs::create_directories(out);
  struct Run {
    std::string name;
    train::TrainConfig cfg;
  };
  std::vector<Run> runs;
  auto baseline = base;
  baseline.model.moh = false;
  runs.push_back({"baseline", baseline});
  for (auto s : o.strides) {
    auto cfg = base;
    cfg.model.moh = true;
    cfg.model.stride = s;
    runs.push_back({"moh_d" + std::to_string(s), cfg});
  }
  std::ofstream csv(out / "horizons.csv");
  csv << "variant,stride,num_horizons,precision_success,waypoint_success,mixed_success\n";
  for (const auto& r : runs) {
    r.cfg.validate();
    train_config(r.cfg, data, out / r.name, log);
    auto model = train::load_model(out / r.name / "final.bin");
    envbench::EvalOptions eo;
    eo.trials = o.trials;
    eo.seed = o.eval_seed;
    const auto res = envbench::evaluate(model.chunk_policy(), model.env, envbench::FixedPrefix{}, eo);
    const std::size_t stride = r.cfg.model.moh ? r.cfg.model.stride : r.cfg.model.max_horizon;
    std::ostringstream row;
    row << r.name << ',' << stride << ',' << r.cfg.model.horizons().size() << ',' << res.families[0].success_rate << ','
        << res.families[1].success_rate << ',' << res.mixed_success() << '\n';
    csv << row.str();
    csv.flush();
    log << row.str();
  }
}

mixture::GateStats run_gate_stats(const GateStatsOptions& o, std::ostream& log) {
  auto model = train::load_model(resolve(o.checkpoint));
  const auto horizons = model.config.model.horizons();
  if (horizons.size() < 2) throw ConfigError("gate-stats needs a model with several horizons");
  const auto suite = envbench::make_suite(model.env);
  std::vector<encoder::Observation> obs;
  const nc::CounterRng root(o.seed);
  for (std::size_t t = 0; t < suite.size(); ++t) {
    for (std::size_t e = 0; e < o.episodes; ++e) {
      auto rec = envbench::run_expert(suite[t], model.env, root.derive(t).derive(e));
      obs.insert(obs.end(), rec.observations.begin(), rec.observations.end());
    }
  }
  mixture::GateStats stats(horizons);
  const std::size_t chunk = 64;
  for (std::size_t s = 0; s < obs.size(); s += chunk) {
    const std::size_t n = std::min(chunk, obs.size() - s);
    std::vector<nc::CounterRng> rngs;
    for (std::size_t i = 0; i < n; ++i) rngs.push_back(root.derive("policy").derive(s + i));
    const auto pred = model.policy->predict(model.params, std::span(obs).subspan(s, n), rngs, false);
    stats.add(pred.alpha);
  }
  if (o.out) {
    auto os = open_out(*o.out);
    stats.write_csv(os);
  }
  log << "observations," << stats.samples() << "\ninterval_cv2," << stats.interval_cv2() << '\n';
  return stats;
}

std::vector<DynSweepRow> run_dyninfer_sweep(const DynSweepOptions& o, std::ostream& log) {
  if (o.ratios.empty()) throw ConfigError("dyninfer-sweep needs at least one ratio");
  auto model = train::load_model(resolve(o.checkpoint));
  std::vector<DynSweepRow> rows;
  std::optional<std::ofstream> csv;
  if (o.out) {
    csv = open_out(*o.out);
    *csv << "r,success_rate,mean_prefix,precision_success,waypoint_success\n";
  }
  for (double r : o.ratios) {
    const envbench::Executor ex = dyninfer::ConsensusConfig{r, o.n, o.m};
    check_consensus(ex, model.config);
    envbench::EvalOptions eo;
    eo.trials = o.trials;
    eo.seed = o.seed;
    const auto res = envbench::evaluate(model.chunk_policy(), model.env, ex, eo);
    DynSweepRow row{r, res.mixed_success(),
                    0.5 * (res.families[0].mean_prefix + res.families[1].mean_prefix),
                    res.families[0].success_rate, res.families[1].success_rate};
    rows.push_back(row);
    std::ostringstream line;
    line << row.r << ',' << row.success_rate << ',' << row.mean_prefix << ',' << row.precision << ',' << row.waypoint
         << '\n';
    if (csv) *csv << line.str();
    log << line.str();
  }
  return rows;
}

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-horizons action chunking: data, training, evaluation"};
  app.require_subcommand(1);

  GenerateOptions gen;
  std::vector<std::string> gen_env;
  auto* g = app.add_subcommand("generate", "Generate expert demonstrations");
  g->add_option("--out", gen.out, "Dataset file")->required();
  g->add_option("--episodes", gen.episodes, "Episodes per task");
  g->add_option("--horizon", gen.horizon, "Chunk length stored per sample");
  g->add_option("--seed", gen.seed, "Seed");
  g->add_option("--set", gen_env, "Environment override env.<field>=value");

  TrainOptions tr;
  std::string tr_config;
  std::vector<std::string> tr_set;
  auto* t = app.add_subcommand("train", "Train a policy");
  t->add_option("--data", tr.data, "Dataset file")->required();
  t->add_option("--config", tr_config, "Config file");
  t->add_option("--set", tr_set, "Config override key=value");
  t->add_option("--out", tr.out, "Run directory")->required();

  auto add_exec = [](CLI::App* c, ExecutorOptions& e) {
    c->add_option("--executor", e.executor, "fixed or consensus");
    c->add_option("--prefix", e.prefix, "Executed prefix for fixed execution");
    c->add_option("--r", e.r, "Consensus threshold ratio");
    c->add_option("--n", e.n, "Steps always executed");
    c->add_option("--m", e.m, "Minimum active horizons");
  };

  EvalOptions ev;
  std::string ev_out, ev_trace;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on both task families");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  add_exec(e, ev.executor);
  e->add_option("--trials", ev.trials, "Trials per family");
  e->add_option("--seed", ev.seed, "Evaluation seed");
  e->add_option("--out", ev_out, "Success CSV");
  e->add_option("--trace", ev_trace, "Consensus trace (JSON lines)");

  RolloutOptions ro;
  auto* r = app.add_subcommand("rollout", "Print one evaluation episode as JSON");
  r->add_option("--checkpoint", ro.checkpoint, "Checkpoint file")->required();
  add_exec(r, ro.executor);
  r->add_option("--family", ro.family, "precision or waypoint");
  r->add_option("--trial", ro.trial, "Trial index");
  r->add_option("--seed", ro.seed, "Evaluation seed");

  SweepOptions sw;
  std::string sw_config;
  std::vector<std::string> sw_set;
  auto* s = app.add_subcommand("sweep-horizons", "Train and evaluate the baseline and one model per stride");
  s->add_option("--data", sw.data, "Dataset file")->required();
  s->add_option("--config", sw_config, "Config file");
  s->add_option("--set", sw_set, "Config override key=value");
  s->add_option("--strides", sw.strides, "Horizon strides")->required();
  s->add_option("--trials", sw.trials, "Trials per family");
  s->add_option("--eval-seed", sw.eval_seed, "Evaluation seed");
  s->add_option("--out", sw.out, "Output directory")->required();

  GateStatsOptions gs;
  std::string gs_out;
  auto* gt = app.add_subcommand("gate-stats", "Mean gate weights per step and horizon");
  gt->add_option("--checkpoint", gs.checkpoint, "Checkpoint file")->required();
  gt->add_option("--episodes", gs.episodes, "Expert episodes per task");
  gt->add_option("--seed", gs.seed, "Seed");
  gt->add_option("--out", gs_out, "CSV output");

  DynSweepOptions ds;
  std::string ds_out;
  auto* d = app.add_subcommand("dyninfer-sweep", "Success and executed prefix across consensus ratios");
  d->add_option("--checkpoint", ds.checkpoint, "Checkpoint file")->required();
  d->add_option("--ratios", ds.ratios, "Threshold ratios");
  d->add_option("--n", ds.n, "Steps always executed");
  d->add_option("--m", ds.m, "Minimum active horizons");
  d->add_option("--trials", ds.trials, "Trials per family");
  d->add_option("--seed", ds.seed, "Evaluation seed");
  d->add_option("--out", ds_out, "CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  auto opt_path = [](const std::string& x) -> std::optional<fs::path> {
    if (x.empty()) return std::nullopt;
    return fs::path(x);
  };

  try {
    if (*g) {
      gen.env = parse_overrides(gen_env);
      run_generate(gen, std::cout);
    } else if (*t) {
      tr.config = opt_path(tr_config);
      tr.overrides = parse_overrides(tr_set);
      run_train(tr, std::cout);
    } else if (*e) {
      ev.out = opt_path(ev_out);
      ev.trace = opt_path(ev_trace);
      run_eval(ev, std::cout);
    } else if (*r) {
      run_rollout(ro, std::cout);
    } else if (*s) {
      sw.config = opt_path(sw_config);
      sw.overrides = parse_overrides(sw_set);
      run_sweep_horizons(sw, std::cout);
    } else if (*gt) {
      gs.out = opt_path(gs_out);
      run_gate_stats(gs, std::cout);
    } else if (*d) {
      ds.out = opt_path(ds_out);
      run_dyninfer_sweep(ds, std::cout);
    }
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "failure: " << err.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace moh::cli
