#include "moh/encoder.hpp"

#include "moh/errors.hpp"

namespace moh::encoder {

template <typename T>
void init_encoder(nc::ParamStore<T>& store, const EncoderConfig& cfg, const nc::CounterRng& rng) {
  if (cfg.obs_dim == 0 || cfg.context_len == 0 || cfg.d_model == 0 || cfg.num_tasks == 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  const std::size_t C = cfg.context_len, d = cfg.d_model;
  store.add("enc.w1", nc::truncated_normal<T>({cfg.obs_dim, cfg.hidden}, 0.02, rng.derive("enc.w1")));
  store.add("enc.b1", nc::zeros<T>({cfg.hidden}), false);
  store.add("enc.w2", nc::truncated_normal<T>({cfg.hidden, C * d}, 0.02, rng.derive("enc.w2")));
  store.add("enc.b2", nc::zeros<T>({C * d}), false);
  store.add("enc.pos", nc::truncated_normal<T>({C, d}, 0.02, rng.derive("enc.pos")));
  store.add("enc.task", nc::truncated_normal<T>({cfg.num_tasks, d}, 0.02, rng.derive("enc.task")));
}

template <typename T>
nc::Var<T> encode(nc::Binder<T>& bind, const EncoderConfig& cfg, std::span<const Observation> batch) {
  const std::size_t B = batch.size(), C = cfg.context_len, d = cfg.d_model;
  if (B == 0) throw ConfigError("encode: empty batch");
  nc::Tensor<T> x(nc::Shape{B, cfg.obs_dim});
  std::vector<int> pos_rows(B * C), task_rows(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& obs = batch[b];
    if (obs.features.size() != cfg.obs_dim) {
      throw ConfigError("observation has " + std::to_string(obs.features.size()) +
                        " features, encoder expects " + std::to_string(cfg.obs_dim));
    }
    if (obs.task >= cfg.num_tasks) {
      throw ConfigError("task id " + std::to_string(obs.task) + " outside [0, " +
                        std::to_string(cfg.num_tasks) + ")");
    }
    for (std::size_t j = 0; j < cfg.obs_dim; ++j) x.at(b, j) = static_cast<T>(obs.features[j]);
    for (std::size_t c = 0; c < C; ++c) {
      pos_rows[b * C + c] = static_cast<int>(c);
      task_rows[b * C + c] = static_cast<int>(obs.task);
    }
  }
  auto& tape = bind.tape();
  nc::Var<T> h = nc::gelu(nc::linear(tape.constant(std::move(x)), bind("enc.w1"), bind("enc.b1")));
  nc::Var<T> tokens = nc::reshape(nc::linear(h, bind("enc.w2"), bind("enc.b2")), nc::Shape{B * C, d});
  tokens = nc::add(tokens, nc::gather_rows(bind("enc.pos"), std::move(pos_rows)));
  return nc::add(tokens, nc::gather_rows(bind("enc.task"), std::move(task_rows)));
}

template <typename T>
nc::Tensor<T> encode_one(nc::ParamStore<T>& store, const EncoderConfig& cfg, const Observation& obs) {
  nc::Tape<T> tape(false);
  nc::Binder<T> bind(tape, store);
  return encode(bind, cfg, std::span<const Observation>(&obs, 1)).value();
}

#define MOH_INSTANTIATE_ENCODER(T)                                                                  \
  template void init_encoder<T>(nc::ParamStore<T>&, const EncoderConfig&, const nc::CounterRng&);  \
  template nc::Var<T> encode<T>(nc::Binder<T>&, const EncoderConfig&, std::span<const Observation>); \
  template nc::Tensor<T> encode_one<T>(nc::ParamStore<T>&, const EncoderConfig&, const Observation&);

MOH_INSTANTIATE_ENCODER(float)
MOH_INSTANTIATE_ENCODER(double)

}  // namespace moh::encoder
