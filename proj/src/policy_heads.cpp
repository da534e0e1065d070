#include "moh/policy_heads.hpp"

#include <algorithm>
#include <cmath>

#include "moh/errors.hpp"

namespace moh::policy {

HeadType parse_head(const std::string& name) {
  if (name == "flow") return HeadType::flow;
  if (name == "regression") return HeadType::regression;
  if (name == "classification") return HeadType::classification;
  throw ConfigError("unknown head type '" + name + "' (flow, regression, classification)");
}

std::string head_name(HeadType head) {
  switch (head) {
    case HeadType::flow: return "flow";
    case HeadType::regression: return "regression";
    case HeadType::classification: return "classification";
  }
  return "?";
}

namespace {

double percentile(std::vector<double>& v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::floor(pos));
  const std::size_t j = std::min(i + 1, v.size() - 1);
  return v[i] + (pos - static_cast<double>(i)) * (v[j] - v[i]);
}

}  // namespace

BinGrid BinGrid::fit(const nc::Tensor<double>& values, std::size_t bins, double widen) {
  if (bins < 1) throw ConfigError("bins must be >= 1");
  if (values.rows() == 0) throw ConfigError("cannot fit bins on an empty action set");
  BinGrid g;
  g.bins = bins;
  const std::size_t da = values.cols(), m = values.rows();
  std::vector<double> col(m);
  for (std::size_t j = 0; j < da; ++j) {
    for (std::size_t i = 0; i < m; ++i) col[i] = values.at(i, j);
    double lo = percentile(col, 1.0), hi = percentile(col, 99.0);
    const double span = std::max(hi - lo, 1e-6);
    lo -= widen * span;
    hi += widen * span;
    g.lo.push_back(lo);
    g.hi.push_back(hi);
  }
  return g;
}

FeatureScaler FeatureScaler::fit(std::span<const encoder::Observation> obs) {
  if (obs.empty()) throw ConfigError("cannot fit a feature scaler on no observations");
  const std::size_t D = obs[0].features.size();
  FeatureScaler f;
  f.mean.assign(D, 0.0);
  f.scale.assign(D, 1.0);
  for (const auto& o : obs)
    for (std::size_t j = 0; j < D; ++j) f.mean[j] += o.features.at(j);
  for (auto& m : f.mean) m /= static_cast<double>(obs.size());
  std::vector<double> var(D, 0.0);
  for (const auto& o : obs)
    for (std::size_t j = 0; j < D; ++j) var[j] += (o.features[j] - f.mean[j]) * (o.features[j] - f.mean[j]);
  for (std::size_t j = 0; j < D; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(obs.size()));
    f.scale[j] = sd > 1e-6 ? 1.0 / sd : 1.0;
  }
  return f;
}

encoder::Observation FeatureScaler::apply(const encoder::Observation& o) const {
  if (o.features.size() != mean.size()) {
    throw ConfigError("observation has " + std::to_string(o.features.size()) + " features, scaler expects " +
                      std::to_string(mean.size()));
  }
  encoder::Observation out = o;
  for (std::size_t j = 0; j < mean.size(); ++j) out.features[j] = (o.features[j] - mean[j]) * scale[j];
  return out;
}

std::size_t BinGrid::quantize(std::size_t dim, double value) const {
  const double v = std::clamp(value, lo[dim], hi[dim]);
  const double idx = std::floor((v - lo[dim]) / width(dim));
  if (idx < 0.0) return 0;
  return std::min(static_cast<std::size_t>(idx), bins - 1);
}

double BinGrid::dequantize(std::size_t dim, std::size_t index) const {
  return lo[dim] + (static_cast<double>(index) + 0.5) * width(dim);
}

HorizonSet PolicyConfig::horizons() const {
  return moh ? HorizonSet::with_stride(max_horizon, stride) : HorizonSet::single(max_horizon);
}

encoder::EncoderConfig PolicyConfig::encoder() const {
  return {obs_dim, num_tasks, context_len, d_model, encoder_hidden};
}

transformer::TransformerConfig PolicyConfig::transformer() const {
  return {layers, heads, d_model, ffn, max_horizon, context_len, action_dim, head == HeadType::flow};
}

void PolicyConfig::validate() const {
  if (obs_dim == 0) throw ConfigError("model.obs_dim must be set");
  if (action_dim == 0) throw ConfigError("model.action_dim must be positive");
  if (ode_steps < 1) throw ConfigError("flow.ode_steps must be >= 1");
  if (bins < 2 && head == HeadType::classification) throw ConfigError("classification needs >= 2 bins");
  if (lambda_ind < 0 || lambda_bal < 0) throw ConfigError("loss weights must be non-negative");
  transformer().validate();
  (void)horizons();
}

std::span<const double> Prediction::fused_step(std::size_t b, std::size_t k) const {
  const std::size_t H = fused.shape[1], da = fused.shape[2];
  return {fused.data.data() + (b * H + k) * da, da};
}

nc::Tensor<double> flow_target(const nc::Tensor<double>& eps, const nc::Tensor<double>& actions) {
  if (eps.shape != actions.shape) {
    throw nc::DimensionError("flow_target: noise " + nc::to_string(eps.shape) + " vs actions " +
                             nc::to_string(actions.shape));
  }
  nc::Tensor<double> u(actions.shape);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = actions[i] - eps[i];
  return u;
}

nc::Tensor<double> flow_interpolate(const nc::Tensor<double>& eps, const nc::Tensor<double>& actions,
                                    double tau) {
  if (eps.shape != actions.shape) {
    throw nc::DimensionError("flow_interpolate: noise " + nc::to_string(eps.shape) + " vs actions " +
                             nc::to_string(actions.shape));
  }
  nc::Tensor<double> x(actions.shape);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - tau) * eps[i] + tau * actions[i];
  return x;
}

template <typename T>
Policy<T>::Policy(PolicyConfig cfg)
    : cfg_((cfg.validate(), cfg)), horizons_(cfg_.horizons()), tf_(cfg_.transformer()) {}

template <typename T>
void Policy<T>::init(nc::ParamStore<T>& store, const nc::CounterRng& rng) const {
  encoder::init_encoder(store, cfg_.encoder(), rng);
  tf_.init(store, rng);
  const std::size_t d = cfg_.d_model, da = cfg_.action_dim;
  if (cfg_.head == HeadType::classification) {
    store.add("head.cls.w", nc::truncated_normal<T>({d, da * cfg_.bins}, 0.02, rng.derive("head.cls.w")));
    store.add("head.cls.b", nc::zeros<T>({da * cfg_.bins}), false);
  } else {
    store.add("head.out.w", nc::truncated_normal<T>({d, da}, 0.02, rng.derive("head.out.w")));
    store.add("head.out.b", nc::zeros<T>({da}), false);
  }
  if (cfg_.moh && cfg_.fusion == mixture::FusionMode::gated) mixture::init_gate(store, d, rng);
}

template <typename T>
void Policy<T>::set_scaler(FeatureScaler scaler) {
  if (scaler.mean.size() != cfg_.obs_dim || scaler.scale.size() != cfg_.obs_dim) {
    throw ConfigError("feature scaler width " + std::to_string(scaler.mean.size()) + " does not match obs_dim " +
                      std::to_string(cfg_.obs_dim));
  }
  scaler_ = std::move(scaler);
}

template <typename T>
nc::Var<T> Policy<T>::context(nc::Binder<T>& bind, std::span<const encoder::Observation> obs) const {
  if (!scaler_) return encoder::encode(bind, cfg_.encoder(), obs);
  std::vector<encoder::Observation> scaled;
  scaled.reserve(obs.size());
  for (const auto& o : obs) scaled.push_back(scaler_->apply(o));
  return encoder::encode(bind, cfg_.encoder(), std::span<const encoder::Observation>(scaled));
}

template <typename T>
void Policy<T>::set_grid(BinGrid grid) {
  if (grid.dims() != cfg_.action_dim || grid.bins != cfg_.bins) {
    throw ConfigError("bin grid (" + std::to_string(grid.dims()) + " dims, " + std::to_string(grid.bins) +
                      " bins) does not match the policy");
  }
  grid_ = std::move(grid);
}

template <typename T>
mixture::GateWeights<T> Policy<T>::weights(nc::Binder<T>& bind, nc::Var<T> hidden, std::size_t batch) const {
  if (cfg_.moh && cfg_.fusion == mixture::FusionMode::gated) return mixture::gate(bind, hidden, horizons_, batch);
  return mixture::average_gate(bind.tape(), horizons_, batch);
}

template <typename T>
nc::Var<T> Policy<T>::head_out(nc::Binder<T>& bind, nc::Var<T> hidden) const {
  if (cfg_.head == HeadType::classification) return nc::linear(hidden, bind("head.cls.w"), bind("head.cls.b"));
  return nc::linear(hidden, bind("head.out.w"), bind("head.out.b"));
}

template <typename T>
std::vector<double> Policy<T>::step_weights() const {
  const std::size_t H = horizons_.max_horizon();
  std::vector<double> w(H, 1.0);
  if (cfg_.moh || !cfg_.loss_reweight) return w;
  const auto ref = HorizonSet::with_stride(cfg_.max_horizon, cfg_.stride);
  double total = 0.0;
  for (std::size_t k = 0; k < H; ++k) total += (w[k] = static_cast<double>(ref.active_count(k + 1)));
  for (auto& v : w) v *= static_cast<double>(H) / total;
  return w;
}

template <typename T>
typename Policy<T>::FlowOutput Policy<T>::flow_forward(nc::Binder<T>& bind, nc::Var<T> ctx,
                                                       const nc::Tensor<T>& x,
                                                       std::span<const double> tau) const {
  const std::size_t B = x.shape.at(0);
  auto hs = tf_.forward_multi_horizon(bind, ctx, x, tau, horizons_);
  FlowOutput out;
  out.velocity = head_out(bind, hs.rows);
  out.gate = weights(bind, hs.rows, B);
  out.fused = cfg_.moh ? mixture::fuse(out.velocity, out.gate) : out.velocity;
  return out;
}

template <typename T>
LossGraph<T> Policy<T>::loss(nc::Binder<T>& bind, const Batch& batch, const nc::CounterRng& rng) const {
  const std::size_t B = batch.size(), H = horizons_.max_horizon(), N = horizons_.size();
  const std::size_t da = cfg_.action_dim;
  if (B == 0) throw ConfigError("empty training batch");
  if (batch.chunks.shape != nc::Shape{B, H, da} || batch.row_valid.shape != nc::Shape{B, H}) {
    throw nc::DimensionError("batch chunks " + nc::to_string(batch.chunks.shape) + " / validity " +
                             nc::to_string(batch.row_valid.shape) + " do not match [" + std::to_string(B) +
                             " x " + std::to_string(H) + " x " + std::to_string(da) + "]");
  }
  auto& tape = bind.tape();
  const auto sw = step_weights();
  nc::Var<T> ctx = context(bind, batch.obs);

  // Row weights for per-horizon rows (b, n, k) and fused rows (b, k).
  const bool mean_rows = cfg_.head == HeadType::flow;
  nc::Tensor<double> w_ph(nc::Shape{B * N * H}), w_mix(nc::Shape{B * H});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n <= N; ++n) {
      const std::size_t h = n < N ? horizons_[n] : H;
      double norm = 0.0;
      for (std::size_t k = 0; k < h; ++k)
        if (batch.row_valid.at(b, k)) norm += sw[k];
      const double scale = mean_rows ? (norm > 0 ? 1.0 / (norm * B) : 0.0) : 1.0 / B;
      for (std::size_t k = 0; k < h; ++k) {
        if (!batch.row_valid.at(b, k)) continue;
        if (n < N)
          w_ph[(b * N + n) * H + k] = sw[k] * scale;
        else
          w_mix[b * H + k] = sw[k] * scale;
      }
    }
  }

  mixture::GateWeights<T> gw;
  nc::Var<T> per_elems, mix_loss;
  std::size_t per_row = da;  // elements per per-horizon row in per_elems

  if (cfg_.head == HeadType::flow || cfg_.head == HeadType::regression) {
    nc::Tensor<double> target = batch.chunks;
    nc::Var<T> pred, fused;
    if (cfg_.head == HeadType::flow) {
      nc::Tensor<double> eps(batch.chunks.shape);
      std::vector<double> taus(B);
      for (std::size_t b = 0; b < B; ++b) {
        auto r = rng.derive(b);
        taus[b] = r.uniform();
        for (std::size_t i = 0; i < H * da; ++i) eps[b * H * da + i] = r.normal();
      }
      nc::Tensor<double> x(batch.chunks.shape);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < H * da; ++i) {
          const std::size_t j = b * H * da + i;
          x[j] = (1.0 - taus[b]) * eps[j] + taus[b] * batch.chunks[j];
        }
      target = flow_target(eps, batch.chunks);
      auto out = flow_forward(bind, ctx, transformer::pad_streams(x.cast<T>(), horizons_), taus);
      pred = out.velocity;
      fused = out.fused;
      gw = out.gate;
    } else {
      auto hs = tf_.forward_regression_queries(bind, ctx, B, horizons_);
      pred = head_out(bind, hs.rows);
      gw = weights(bind, hs.rows, B);
      fused = cfg_.moh ? mixture::fuse(pred, gw) : pred;
    }
    nc::Tensor<T> t_ph(nc::Shape{B * N * H, da});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < H; ++k)
          for (std::size_t j = 0; j < da; ++j)
            t_ph.at((b * N + n) * H + k, j) = static_cast<T>(target[(b * H + k) * da + j]);
    nc::Tensor<T> t_mix = target.cast<T>();
    t_mix.shape = nc::Shape{B * H, da};
    nc::Var<T> d_ph = nc::sub(pred, tape.constant(std::move(t_ph)));
    nc::Var<T> d_mix = nc::sub(fused, tape.constant(std::move(t_mix)));
    const bool sq = cfg_.head == HeadType::flow;
    per_elems = sq ? nc::square(d_ph) : nc::abs(d_ph);
    nc::Tensor<T> wm(nc::Shape{B * H * da});
    for (std::size_t r = 0; r < B * H; ++r)
      for (std::size_t j = 0; j < da; ++j) wm[r * da + j] = static_cast<T>(w_mix[r]);
    mix_loss = nc::weighted_sum(sq ? nc::square(d_mix) : nc::abs(d_mix), wm);
  } else {
    if (!grid_) throw ConfigError("classification head needs a fitted bin grid");
    const std::size_t nb = cfg_.bins;
    auto hs = tf_.forward_regression_queries(bind, ctx, B, horizons_);
    nc::Var<T> logits = head_out(bind, hs.rows);  // [B*N*H x da*nb]
    gw = weights(bind, hs.rows, B);
    std::vector<std::size_t> bin(B * H * da);
    for (std::size_t r = 0; r < B * H; ++r)
      for (std::size_t j = 0; j < da; ++j) bin[r * da + j] = grid_->quantize(j, batch.chunks[r * da + j]);

    nc::Var<T> logp = nc::log_softmax(nc::reshape(logits, nc::Shape{B * N * H * da, nb}));
    std::vector<std::size_t> pick(B * N * H * da);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < H; ++k)
          for (std::size_t j = 0; j < da; ++j) {
            const std::size_t e = ((b * N + n) * H + k) * da + j;
            pick[e] = e * nb + bin[(b * H + k) * da + j];
          }
    per_elems = nc::scale(nc::take(logp, std::move(pick), nc::Shape{B * N * H, da}), T(-1));

    nc::Var<T> fused_logp;
    if (cfg_.moh) {
      nc::Var<T> probs = nc::softmax(nc::reshape(logits, nc::Shape{B * N * H * da, nb}));
      nc::Var<T> fused = mixture::fuse(nc::reshape(probs, nc::Shape{B * N * H, da * nb}), gw);
      fused_logp = nc::log(nc::normalize_rows(nc::reshape(fused, nc::Shape{B * H * da, nb})));
    } else {
      fused_logp = logp;
    }
    std::vector<std::size_t> pick_mix(B * H * da);
    for (std::size_t e = 0; e < B * H * da; ++e) pick_mix[e] = e * nb + bin[e];
    nc::Var<T> picked = nc::take(fused_logp, std::move(pick_mix), nc::Shape{B * H * da});
    nc::Tensor<T> wm(nc::Shape{B * H * da});
    for (std::size_t r = 0; r < B * H; ++r)
      for (std::size_t j = 0; j < da; ++j) wm[r * da + j] = static_cast<T>(-w_mix[r]);
    mix_loss = nc::weighted_sum(picked, wm);
  }

  nc::Tensor<T> we(nc::Shape{B * N * H * per_row});
  std::vector<int> group(B * N * H * per_row, -1);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < H; ++k) {
        const std::size_t r = (b * N + n) * H + k;
        if (w_ph[r] == 0.0) continue;
        for (std::size_t j = 0; j < per_row; ++j) {
          we[r * per_row + j] = static_cast<T>(w_ph[r]);
          group[r * per_row + j] = static_cast<int>(n);
        }
      }
  nc::Var<T> per_h = nc::grouped_weighted_sum(per_elems, we, group, N);

  LossGraph<T> g;
  g.per_horizon = per_h;
  std::vector<double> ph(N);
  for (std::size_t n = 0; n < N; ++n) ph[n] = static_cast<double>(per_h.value()[n]);
  if (!cfg_.moh) {
    g.total = nc::sum(per_h);
    g.mix = g.total;
    g.bal = tape.constant(nc::Tensor<T>::scalar(T(0)));
    g.breakdown = mixture::moh_objective(ph[0], ph, 0.0, 0.0, 0.0);
    return g;
  }
  g.mix = mix_loss;
  g.bal = mixture::balance_loss(gw.alpha, horizons_, B);
  g.total = mixture::moh_objective(g.mix, per_h, g.bal, cfg_.lambda_ind, cfg_.lambda_bal);
  g.breakdown = mixture::moh_objective(static_cast<double>(g.mix.value().item()), ph,
                                       static_cast<double>(g.bal.value().item()), cfg_.lambda_ind,
                                       cfg_.lambda_bal);
  g.alpha = gw.alpha.value().template cast<double>();
  return g;
}

template <typename T>
Prediction Policy<T>::predict(nc::ParamStore<T>& store, std::span<const encoder::Observation> obs,
                              std::span<const nc::CounterRng> rngs, bool per_horizon) const {
  const std::size_t B = obs.size(), H = horizons_.max_horizon(), N = horizons_.size();
  const std::size_t da = cfg_.action_dim;
  Prediction p;
  p.batch = B;
  p.horizons = horizons_;
  p.fused = nc::Tensor<double>(nc::Shape{B, H, da});
  p.per_horizon = nc::Tensor<double>(nc::Shape{B, N, H, da});
  p.alpha = nc::Tensor<double>(nc::Shape{B * H, N});
  if (B == 0) return p;

  nc::Tensor<T> ctx_value;
  {
    nc::Tape<T> tape(false);
    nc::Binder<T> bind(tape, store);
    ctx_value = context(bind, obs).value();
  }

  if (cfg_.head == HeadType::flow) {
    if (rngs.size() != B) throw nc::DimensionError("predict: one rng per observation required");
    nc::Tensor<double> xf(nc::Shape{B, H, da});
    for (std::size_t b = 0; b < B; ++b) {
      auto r = rngs[b];
      for (std::size_t i = 0; i < H * da; ++i) xf[b * H * da + i] = r.normal();
    }
    const bool own = per_horizon && N > 1;
    nc::Tensor<double> xs = own ? transformer::pad_streams(xf, horizons_) : nc::Tensor<double>();
    const double dt = 1.0 / static_cast<double>(cfg_.ode_steps);
    std::vector<double> taus(B);
    for (std::size_t s = 0; s < cfg_.ode_steps; ++s) {
      std::fill(taus.begin(), taus.end(), static_cast<double>(s) * dt);
      {
        nc::Tape<T> tape(false);
        nc::Binder<T> bind(tape, store);
        auto out = flow_forward(bind, tape.constant(ctx_value), transformer::pad_streams(xf.cast<T>(), horizons_),
                                taus);
        const auto& v = out.fused.value();
        for (std::size_t i = 0; i < xf.size(); ++i) xf[i] += dt * static_cast<double>(v[i]);
        if (s + 1 == cfg_.ode_steps) p.alpha = out.gate.alpha.value().template cast<double>();
      }
      if (own) {
        nc::Tape<T> tape(false);
        nc::Binder<T> bind(tape, store);
        auto out = flow_forward(bind, tape.constant(ctx_value), xs.cast<T>(), taus);
        const auto& v = out.velocity.value();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < horizons_[n] * da; ++i) {
              const std::size_t e = (b * N + n) * H * da + i;
              xs[e] += dt * static_cast<double>(v[e]);
            }
      }
    }
    p.fused = xf;
    if (own) {
      p.per_horizon = std::move(xs);
    } else if (per_horizon) {
      p.per_horizon = transformer::pad_streams(xf, horizons_);
    }
    return p;
  }

  nc::Tape<T> tape(false);
  nc::Binder<T> bind(tape, store);
  auto hs = tf_.forward_regression_queries(bind, tape.constant(std::move(ctx_value)), B, horizons_);
  nc::Var<T> out = head_out(bind, hs.rows);
  auto gw = weights(bind, hs.rows, B);
  p.alpha = gw.alpha.value().template cast<double>();
  auto clear_padding = [&] {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = horizons_[n]; k < H; ++k)
          for (std::size_t j = 0; j < da; ++j) p.per_horizon[((b * N + n) * H + k) * da + j] = 0.0;
  };
  if (cfg_.head == HeadType::regression) {
    const auto& v = out.value();
    for (std::size_t i = 0; i < v.size(); ++i) p.per_horizon[i] = static_cast<double>(v[i]);
    const auto& f = (cfg_.moh ? mixture::fuse(out, gw) : out).value();
    for (std::size_t i = 0; i < f.size(); ++i) p.fused[i] = static_cast<double>(f[i]);
    clear_padding();
    return p;
  }

  // Classification: argmax bin per (step, dim), decoded to the bin center.
  if (!grid_) throw ConfigError("classification head needs a fitted bin grid");
  const std::size_t nb = cfg_.bins;
  auto decode = [&](const nc::Tensor<T>& scores, std::size_t rows, nc::Tensor<double>& dst) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < da; ++j) {
        const T* s = scores.data.data() + (r * da + j) * nb;
        const std::size_t best = static_cast<std::size_t>(std::max_element(s, s + nb) - s);
        dst[r * da + j] = grid_->dequantize(j, best);
      }
  };
  decode(out.value(), B * N * H, p.per_horizon);
  if (cfg_.moh) {
    nc::Var<T> probs = nc::softmax(nc::reshape(out, nc::Shape{B * N * H * da, nb}));
    decode(mixture::fuse(nc::reshape(probs, nc::Shape{B * N * H, da * nb}), gw).value(), B * H, p.fused);
  } else {
    decode(out.value(), B * H, p.fused);
  }
  clear_padding();
  return p;
}

template class Policy<float>;
template class Policy<double>;

}  // namespace moh::policy
