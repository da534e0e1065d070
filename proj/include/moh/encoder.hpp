#pragma once

#include <span>
#include <vector>

#include "moh/numcore/ops.hpp"
#include "moh/numcore/params.hpp"

namespace moh::encoder {

/// Low-dimensional observation: proprioceptive state followed by goal
/// features, plus the task identifier standing in for an instruction.
struct Observation {
  std::vector<double> features;
  std::size_t task = 0;
};

struct EncoderConfig {
  std::size_t obs_dim = 0;
  std::size_t num_tasks = 1;
  std::size_t context_len = 8;
  std::size_t d_model = 64;
  std::size_t hidden = 128;
};

/// Registers enc.* parameters.
template <typename T>
void init_encoder(nc::ParamStore<T>& store, const EncoderConfig& cfg, const nc::CounterRng& rng);

/// Lifts each observation to context_len tokens: a two-layer MLP produces
/// all tokens at once, then learned positional embeddings and the task
/// embedding are added to every token. Output rows are (b, c): [B*C x d].
template <typename T>
nc::Var<T> encode(nc::Binder<T>& bind, const EncoderConfig& cfg, std::span<const Observation> batch);

/// Context tokens [C x d] of a single observation.
template <typename T>
nc::Tensor<T> encode_one(nc::ParamStore<T>& store, const EncoderConfig& cfg, const Observation& obs);

}  // namespace moh::encoder
