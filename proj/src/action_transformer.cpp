#include "moh/action_transformer.hpp"

#include <cmath>
#include <numbers>

#include "moh/errors.hpp"

namespace moh::transformer {

void TransformerConfig::validate() const {
  if (layers == 0) throw ConfigError("transformer.layers must be >= 1");
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("transformer.d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (ffn == 0 || max_horizon == 0 || context_len == 0 || action_dim == 0) {
    throw ConfigError("transformer sizes must be positive");
  }
}

HorizonMask make_horizon_mask(std::size_t context_len, bool time_token, std::size_t capacity,
                              std::size_t horizon) {
  if (horizon == 0 || horizon > capacity) {
    throw ConfigError("horizon " + std::to_string(horizon) + " outside [1, " + std::to_string(capacity) + "]");
  }
  HorizonMask m;
  m.context = context_len;
  m.time = time_token ? 1 : 0;
  m.capacity = capacity;
  m.horizon = horizon;
  const std::size_t L = m.length();
  m.position_valid.assign(L, 1);
  for (std::size_t k = horizon; k < capacity; ++k) m.position_valid[context_len + m.time + k] = 0;
  m.additive = nc::Tensor<double>(nc::Shape{L, L}, nc::blocked_value<double>());
  for (std::size_t i = 0; i < L; ++i) {
    if (!m.position_valid[i]) continue;
    const std::size_t keys = i < context_len ? context_len : L;
    for (std::size_t j = 0; j < keys; ++j)
      if (m.position_valid[j]) m.additive.at(i, j) = 0.0;
  }
  return m;
}

template <typename T>
nc::Tensor<T> HiddenStates<T>::block(std::size_t b, std::size_t n) const {
  const auto& v = rows.value();
  const std::size_t H = horizons.max_horizon(), N = horizons.size(), d = v.cols();
  const std::size_t h = horizons[n];
  nc::Tensor<T> out(nc::Shape{h, d});
  const T* src = v.data.data() + ((b * N + n) * H) * d;
  std::copy(src, src + h * d, out.data.begin());
  return out;
}

std::vector<double> time_embedding(double tau, std::size_t width) {
  std::vector<double> e(width, 0.0);
  const std::size_t half = width / 2;
  if (half == 0) return e;
  const double lo = 4e-3, hi = 4.0;
  for (std::size_t i = 0; i < half; ++i) {
    const double frac = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
    const double period = lo * std::pow(hi / lo, frac);
    const double phase = 2.0 * std::numbers::pi * tau / period;
    e[i] = std::sin(phase);
    e[half + i] = std::cos(phase);
  }
  return e;
}

template <typename T>
nc::Tensor<T> pad_streams(const nc::Tensor<T>& chunks, const HorizonSet& horizons) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  if (chunks.shape.size() != 3 || chunks.shape[1] != H) {
    throw nc::DimensionError("pad_streams: expected [B x " + std::to_string(H) + " x d_a], got " +
                             nc::to_string(chunks.shape));
  }
  const std::size_t B = chunks.shape[0], da = chunks.shape[2];
  nc::Tensor<T> out(nc::Shape{B, N, H, da});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = chunks.data.data() + b * H * da;
      std::copy(src, src + horizons[n] * da, out.data.begin() + ((b * N + n) * H) * da);
    }
  return out;
}

ActionTransformer::ActionTransformer(TransformerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void ActionTransformer::check_horizons(const HorizonSet& horizons) const {
  if (horizons.max_horizon() > cfg_.max_horizon) {
    throw ConfigError("horizon " + std::to_string(horizons.max_horizon()) + " exceeds the model's maximum " +
                      std::to_string(cfg_.max_horizon));
  }
}

template <typename T>
void ActionTransformer::init(nc::ParamStore<T>& store, const nc::CounterRng& rng) const {
  const std::size_t d = cfg_.d_model;
  auto w = [&](const std::string& name, nc::Shape shape) {
    store.add(name, nc::truncated_normal<T>(shape, 0.02, rng.derive(name)));
  };
  auto bias = [&](const std::string& name, std::size_t n) { store.add(name, nc::zeros<T>({n}), false); };
  auto norm = [&](const std::string& name) {
    store.add(name + ".g", nc::ones<T>({d}), false);
    store.add(name + ".b", nc::zeros<T>({d}), false);
  };
  w("tf.act_in.w", {cfg_.action_dim, d});
  bias("tf.act_in.b", d);
  w("tf.pos", {cfg_.max_horizon, d});
  w("tf.query", {1, d});
  if (cfg_.time_token) {
    w("tf.time.w", {d, d});
    bias("tf.time.b", d);
  }
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "tf.l" + std::to_string(l) + ".";
    norm(p + "ln1");
    for (const char* m : {"q", "k", "v", "o"}) {
      w(p + "attn." + m + ".w", {d, d});
      bias(p + "attn." + m + ".b", d);
    }
    norm(p + "ln2");
    w(p + "ffn.w1", {d, cfg_.ffn});
    bias(p + "ffn.b1", cfg_.ffn);
    w(p + "ffn.w2", {cfg_.ffn, d});
    bias(p + "ffn.b2", d);
  }
  norm("tf.lnf");
}

template <typename T>
HiddenStates<T> ActionTransformer::forward_multi_horizon(nc::Binder<T>& bind, nc::Var<T> ctx,
                                                         const nc::Tensor<T>& action_inputs,
                                                         std::span<const double> tau,
                                                         const HorizonSet& horizons) const {
  check_horizons(horizons);
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  const auto& s = action_inputs.shape;
  if (s.size() != 4 || s[1] != N || s[2] != H || s[3] != cfg_.action_dim) {
    throw nc::DimensionError("action tokens " + nc::to_string(s) + " do not match [B x " + std::to_string(N) +
                             " x " + std::to_string(H) + " x " + std::to_string(cfg_.action_dim) + "]");
  }
  const std::size_t B = s[0];
  if (cfg_.time_token && tau.size() != B) {
    throw nc::DimensionError("expected one tau per sample (" + std::to_string(B) + "), got " +
                             std::to_string(tau.size()));
  }
  auto& tape = bind.tape();
  nc::Tensor<T> flat = action_inputs;
  flat.shape = nc::Shape{B * N * H, cfg_.action_dim};
  nc::Var<T> tokens = nc::linear(tape.constant(std::move(flat)), bind("tf.act_in.w"), bind("tf.act_in.b"));

  std::vector<nc::Var<T>> parts;
  if (cfg_.time_token) {
    const std::size_t d = cfg_.d_model;
    nc::Tensor<T> emb(nc::Shape{B * N, d});
    for (std::size_t b = 0; b < B; ++b) {
      const auto e = time_embedding(tau[b], d);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < d; ++j) emb.at(b * N + n, j) = static_cast<T>(e[j]);
    }
    parts.push_back(nc::linear(tape.constant(std::move(emb)), bind("tf.time.w"), bind("tf.time.b")));
  }
  parts.push_back(tokens);
  nc::Var<T> stream = parts.size() == 1 ? parts[0] : nc::concat_rows<T>(parts);
  return run(bind, ctx, stream, B, horizons);
}

template <typename T>
HiddenStates<T> ActionTransformer::forward_regression_queries(nc::Binder<T>& bind, nc::Var<T> ctx,
                                                              std::size_t batch,
                                                              const HorizonSet& horizons) const {
  check_horizons(horizons);
  if (cfg_.time_token) throw ConfigError("regression queries require a transformer without a time token");
  const std::size_t rows = batch * horizons.size() * horizons.max_horizon();
  nc::Var<T> q = nc::gather_rows(bind("tf.query"), std::vector<int>(rows, 0));
  return run(bind, ctx, q, batch, horizons);
}

template <typename T>
HiddenStates<T> ActionTransformer::run(nc::Binder<T>& bind, nc::Var<T> ctx, nc::Var<T> stream_tokens,
                                       std::size_t B, const HorizonSet& horizons) const {
  const std::size_t H = horizons.max_horizon(), N = horizons.size(), C = cfg_.context_len;
  const std::size_t Tt = cfg_.time_token ? 1 : 0, d = cfg_.d_model;
  if (ctx.value().rows() != B * C || ctx.value().cols() != d) {
    throw nc::DimensionError("context " + nc::to_string(ctx.value().shape) + " does not match [" +
                             std::to_string(B * C) + " x " + std::to_string(d) + "]");
  }

  // Input rows: time (b, n) | actions (b, n, k) with k < H. The block input is
  // context (b, c) | time (b, n) | kept actions (b, n, k), where only k < h_n
  // is kept unless the padded layout is requested.
  const std::size_t time0 = B * C, act_rows = B * N * H;
  const bool padded = cfg_.padded_layout;
  std::vector<int> kept;                    // stream_tokens row of each kept action slot
  std::vector<int> slot_row(act_rows, -1);  // block row of each (b, n, k), -1 if dropped
  std::vector<std::size_t> stream_start(B * N);
  const std::size_t act0 = time0 + B * N * Tt;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      stream_start[b * N + n] = act0 + kept.size();
      const std::size_t len = padded ? H : horizons[n];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t slot = (b * N + n) * H + k;
        slot_row[slot] = static_cast<int>(act0 + kept.size());
        kept.push_back(static_cast<int>(B * N * Tt + slot));
      }
    }

  std::vector<nc::Var<T>> parts{ctx};
  {
    const auto& sv = stream_tokens.value();
    if (sv.rows() != B * N * Tt + act_rows) throw nc::DimensionError("stream tokens have the wrong row count");
    if (Tt) {
      std::vector<int> time_rows(B * N);
      for (std::size_t i = 0; i < B * N; ++i) time_rows[i] = static_cast<int>(i);
      parts.push_back(nc::gather_rows(stream_tokens, std::move(time_rows)));
    }
    // Learned positional embeddings on action slots.
    std::vector<int> pos_rows(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i)
      pos_rows[i] = static_cast<int>((kept[i] - B * N * Tt) % H);
    nc::Var<T> acts = nc::gather_rows(stream_tokens, kept);
    parts.push_back(nc::add(acts, nc::gather_rows(bind("tf.pos"), std::move(pos_rows))));
  }
  nc::Var<T> x = nc::concat_rows<T>(parts);

  auto layout = std::make_shared<nc::AttentionLayout<T>>();
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t cap = padded ? H : horizons[n];
    const auto hm = make_horizon_mask(C, cfg_.time_token, cap, horizons[n]);
    nc::AttentionMask<T> m;
    m.queries = Tt + cap;
    m.keys = hm.length();
    m.additive.resize(m.queries * m.keys);
    m.query_valid.resize(m.queries);
    for (std::size_t i = 0; i < m.queries; ++i) {
      m.query_valid[i] = hm.position_valid[C + i];
      for (std::size_t j = 0; j < m.keys; ++j)
        m.additive[i * m.keys + j] = static_cast<T>(hm.additive.at(C + i, j));
    }
    layout->masks.push_back(std::move(m));
  }
  for (std::size_t b = 0; b < B; ++b) {
    nc::AttentionGroup cg;
    for (std::size_t c = 0; c < C; ++c) cg.query_rows.push_back(static_cast<int>(b * C + c));
    cg.key_rows = cg.query_rows;
    layout->groups.push_back(cg);
    for (std::size_t n = 0; n < N; ++n) {
      nc::AttentionGroup g;
      g.key_rows = cg.query_rows;
      if (Tt) g.query_rows.push_back(static_cast<int>(time0 + b * N + n));
      const std::size_t len = padded ? H : horizons[n];
      for (std::size_t k = 0; k < len; ++k) g.query_rows.push_back(static_cast<int>(stream_start[b * N + n] + k));
      g.key_rows.insert(g.key_rows.end(), g.query_rows.begin(), g.query_rows.end());
      g.mask = static_cast<int>(n);
      layout->groups.push_back(std::move(g));
    }
  }
  std::shared_ptr<const nc::AttentionLayout<T>> shared = layout;

  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "tf.l" + std::to_string(l) + ".";
    nc::Var<T> h = nc::layer_norm(x, bind(p + "ln1.g"), bind(p + "ln1.b"));
    nc::Var<T> q = nc::linear(h, bind(p + "attn.q.w"), bind(p + "attn.q.b"));
    nc::Var<T> k = nc::linear(h, bind(p + "attn.k.w"), bind(p + "attn.k.b"));
    nc::Var<T> v = nc::linear(h, bind(p + "attn.v.w"), bind(p + "attn.v.b"));
    nc::Var<T> a = nc::multi_head_attention(q, k, v, shared, cfg_.heads);
    x = nc::add(x, nc::linear(a, bind(p + "attn.o.w"), bind(p + "attn.o.b")));
    h = nc::layer_norm(x, bind(p + "ln2.g"), bind(p + "ln2.b"));
    h = nc::gelu(nc::linear(h, bind(p + "ffn.w1"), bind(p + "ffn.b1")));
    x = nc::add(x, nc::linear(h, bind(p + "ffn.w2"), bind(p + "ffn.b2")));
  }

  std::vector<int> out_rows(x.value().rows() - act0);
  for (std::size_t r = 0; r < out_rows.size(); ++r) out_rows[r] = static_cast<int>(act0 + r);
  nc::Var<T> z = nc::gather_rows(x, std::move(out_rows));
  z = nc::layer_norm(z, bind("tf.lnf.g"), bind("tf.lnf.b"));
  if (!padded) {
    for (auto& r : slot_row)
      if (r >= 0) r -= static_cast<int>(act0);
    z = nc::gather_rows(z, std::move(slot_row));
  }

  HiddenStates<T> out;
  out.rows = z;
  out.batch = B;
  out.horizons = horizons;
  return out;
}

#define MOH_INSTANTIATE_TRANSFORMER(T)                                                                   \
  template struct HiddenStates<T>;                                                                       \
  template nc::Tensor<T> pad_streams<T>(const nc::Tensor<T>&, const HorizonSet&);                        \
  template void ActionTransformer::init<T>(nc::ParamStore<T>&, const nc::CounterRng&) const;             \
  template HiddenStates<T> ActionTransformer::forward_multi_horizon<T>(                                  \
      nc::Binder<T>&, nc::Var<T>, const nc::Tensor<T>&, std::span<const double>, const HorizonSet&) const; \
  template HiddenStates<T> ActionTransformer::forward_regression_queries<T>(                             \
      nc::Binder<T>&, nc::Var<T>, std::size_t, const HorizonSet&) const;

MOH_INSTANTIATE_TRANSFORMER(float)
MOH_INSTANTIATE_TRANSFORMER(double)

}  // namespace moh::transformer
