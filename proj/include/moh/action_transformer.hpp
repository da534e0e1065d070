#pragma once

#include <span>
#include <vector>

#include "moh/horizon.hpp"
#include "moh/numcore/ops.hpp"
#include "moh/numcore/params.hpp"

namespace moh::transformer {

struct TransformerConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t ffn = 256;
  std::size_t max_horizon = 30;
  std::size_t context_len = 8;
  std::size_t action_dim = 2;
  /// Flow policies carry one extra token holding the time embedding.
  bool time_token = true;
  /// Run every stream at full capacity under its horizon mask. The default
  /// drops padded slots before the blocks; valid positions agree either way.
  bool padded_layout = false;

  void validate() const;
};

/// Attention mask of one horizon stream laid out as [context | time | actions]
/// with `capacity` action slots, of which the first `horizon` are valid.
///
/// Context tokens see only context (so they are shared by every stream).
/// The time token and valid action positions see context, the time token and
/// valid action positions. Positions beyond the horizon are invalid: no row
/// attends to them and they attend to nothing.
struct HorizonMask {
  std::size_t context = 0;
  std::size_t time = 0;
  std::size_t capacity = 0;
  std::size_t horizon = 0;
  nc::Tensor<double> additive;             // L x L, L = context + time + capacity
  std::vector<std::uint8_t> position_valid;  // L

  std::size_t length() const { return context + time + capacity; }
};

HorizonMask make_horizon_mask(std::size_t context_len, bool time_token, std::size_t capacity,
                              std::size_t horizon);

/// Hidden states at action positions for every stream, rows (b, n, k) with
/// k < H. Rows with k >= h_n are padding and carry no meaning (zero unless
/// the padded layout is used).
template <typename T>
struct HiddenStates {
  nc::Var<T> rows;
  std::size_t batch = 0;
  HorizonSet horizons{{1}};

  /// Z^(h) for sample b and horizon index n: [h_n x d] (valid rows only).
  nc::Tensor<T> block(std::size_t b, std::size_t n) const;
};

/// Sinusoidal embedding of tau in [0, 1] with periods spaced geometrically
/// from 4e-3 to 4.
std::vector<double> time_embedding(double tau, std::size_t width);

/// Zero-pads each truncated chunk to H: input [B x H x d_a] -> [B x N x H x d_a].
template <typename T>
nc::Tensor<T> pad_streams(const nc::Tensor<T>& chunks, const HorizonSet& horizons);

/// Shared full-attention action transformer. All horizon streams run as one
/// batch with shared weights; context tokens are encoded once per sample.
class ActionTransformer {
 public:
  explicit ActionTransformer(TransformerConfig cfg);

  const TransformerConfig& config() const { return cfg_; }

  template <typename T>
  void init(nc::ParamStore<T>& store, const nc::CounterRng& rng) const;

  /// ctx: [B*C x d]; action_inputs: [B x N x H x d_a], padded per stream;
  /// tau: one entry per sample when the time token is enabled, else empty.
  template <typename T>
  HiddenStates<T> forward_multi_horizon(nc::Binder<T>& bind, nc::Var<T> ctx,
                                        const nc::Tensor<T>& action_inputs, std::span<const double> tau,
                                        const HorizonSet& horizons) const;

  /// One-step variant: the learnable query is expanded to H positions per
  /// stream and processed exactly as action tokens.
  template <typename T>
  HiddenStates<T> forward_regression_queries(nc::Binder<T>& bind, nc::Var<T> ctx, std::size_t batch,
                                             const HorizonSet& horizons) const;

 private:
  template <typename T>
  HiddenStates<T> run(nc::Binder<T>& bind, nc::Var<T> ctx, nc::Var<T> stream_tokens, std::size_t batch,
                      const HorizonSet& horizons) const;
  void check_horizons(const HorizonSet& horizons) const;

  TransformerConfig cfg_;
};

}  // namespace moh::transformer
