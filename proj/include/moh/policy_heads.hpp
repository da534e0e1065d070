#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moh/action_transformer.hpp"
#include "moh/encoder.hpp"
#include "moh/horizon.hpp"
#include "moh/mixture.hpp"

namespace moh::policy {

enum class HeadType { flow, regression, classification };

HeadType parse_head(const std::string& name);
std::string head_name(HeadType head);

/// Per-dimension uniform bins over [lo, hi]. Indices are 0-based.
struct BinGrid {
  std::size_t bins = 64;
  std::vector<double> lo, hi;

  /// Ranges from the 1st/99th percentiles of `values` (rows of d_a entries),
  /// each widened by 5% of its span on both sides.
  static BinGrid fit(const nc::Tensor<double>& values, std::size_t bins, double widen = 0.05);

  std::size_t dims() const { return lo.size(); }
  double width(std::size_t dim) const { return (hi[dim] - lo[dim]) / static_cast<double>(bins); }
  /// Clamp to range, then floor; boundaries go to the upper bin and the
  /// range maximum to the last bin.
  std::size_t quantize(std::size_t dim, double value) const;
  double dequantize(std::size_t dim, std::size_t index) const;
};

/// Per-feature affine standardization of observations, fitted on the
/// training set and frozen. Features with no spread pass through centred.
struct FeatureScaler {
  std::vector<double> mean, scale;

  static FeatureScaler fit(std::span<const encoder::Observation> obs);
  encoder::Observation apply(const encoder::Observation& o) const;
};

struct PolicyConfig {
  HeadType head = HeadType::flow;
  std::size_t obs_dim = 0;
  std::size_t num_tasks = 1;
  std::size_t action_dim = 2;
  std::size_t context_len = 8;
  std::size_t d_model = 64;
  std::size_t encoder_hidden = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t max_horizon = 30;
  std::size_t stride = 3;
  /// false: single-stream baseline at max_horizon trained on its own loss.
  bool moh = true;
  mixture::FusionMode fusion = mixture::FusionMode::gated;
  double lambda_ind = 1.0;
  double lambda_bal = 1e-3;
  /// Baseline only: weight step k of the loss by its active-horizon count
  /// under the stride set, normalized to mean 1.
  bool loss_reweight = false;
  std::size_t bins = 64;
  std::size_t ode_steps = 10;

  HorizonSet horizons() const;
  encoder::EncoderConfig encoder() const;
  transformer::TransformerConfig transformer() const;
  void validate() const;
};

/// Supervision batch: chunks [B x H x d_a] with row validity [B x H]
/// (rows past the episode end are 0).
struct Batch {
  std::vector<encoder::Observation> obs;
  nc::Tensor<double> chunks;
  nc::Tensor<std::uint8_t> row_valid;

  std::size_t size() const { return obs.size(); }
};

template <typename T>
struct LossGraph {
  nc::Var<T> total;
  nc::Var<T> mix;
  nc::Var<T> per_horizon;  // [N]
  nc::Var<T> bal;
  mixture::MoHLossBreakdown breakdown;
  nc::Tensor<double> alpha;  // [B*H x N]; empty for the baseline
};

/// Chunk prediction for a batch of observations.
struct Prediction {
  std::size_t batch = 0;
  HorizonSet horizons{{1}};
  nc::Tensor<double> fused;        // [B x H x d_a]
  nc::Tensor<double> per_horizon;  // [B x N x H x d_a]; rows k >= h_n are 0
  nc::Tensor<double> alpha;        // [B*H x N]

  /// Fused action at 0-based step k of sample b.
  std::span<const double> fused_step(std::size_t b, std::size_t k) const;
};

/// Policy = encoder + action transformer + head, with MoH fusion.
template <typename T>
class Policy {
 public:
  explicit Policy(PolicyConfig cfg);

  const PolicyConfig& config() const { return cfg_; }
  const HorizonSet& horizons() const { return horizons_; }
  const transformer::ActionTransformer& transformer() const { return tf_; }

  void init(nc::ParamStore<T>& store, const nc::CounterRng& rng) const;

  const std::optional<BinGrid>& grid() const { return grid_; }
  void set_grid(BinGrid grid);
  const std::optional<FeatureScaler>& scaler() const { return scaler_; }
  void set_scaler(FeatureScaler scaler);

  /// Training objective. Flow draws tau and noise per example from
  /// rng.derive(b); identical rng gives identical draws.
  LossGraph<T> loss(nc::Binder<T>& bind, const Batch& batch, const nc::CounterRng& rng) const;

  /// Inference. Flow starts every sample from noise drawn from
  /// rngs[b]; with per_horizon set, each horizon also integrates its own
  /// trajectory from the same noise. One-step heads ignore the rngs.
  Prediction predict(nc::ParamStore<T>& store, std::span<const encoder::Observation> obs,
                     std::span<const nc::CounterRng> rngs, bool per_horizon = true) const;

  /// One flow forward: per-horizon velocities [B*N*H x d_a] and gate weights
  /// at state x [B x N x H x d_a] (each stream padded) and time tau.
  struct FlowOutput {
    nc::Var<T> velocity;
    nc::Var<T> fused;
    mixture::GateWeights<T> gate;
  };
  FlowOutput flow_forward(nc::Binder<T>& bind, nc::Var<T> ctx, const nc::Tensor<T>& x,
                          std::span<const double> tau) const;

 private:
  mixture::GateWeights<T> weights(nc::Binder<T>& bind, nc::Var<T> hidden, std::size_t batch) const;
  nc::Var<T> head_out(nc::Binder<T>& bind, nc::Var<T> hidden) const;
  std::vector<double> step_weights() const;
  nc::Var<T> context(nc::Binder<T>& bind, std::span<const encoder::Observation> obs) const;

  PolicyConfig cfg_;
  HorizonSet horizons_;
  transformer::ActionTransformer tf_;
  std::optional<BinGrid> grid_;
  std::optional<FeatureScaler> scaler_;
};

/// Ground-truth velocity of the linear path: u = A - eps.
nc::Tensor<double> flow_target(const nc::Tensor<double>& eps, const nc::Tensor<double>& actions);

/// Point on the path: (1 - tau) * eps + tau * A.
nc::Tensor<double> flow_interpolate(const nc::Tensor<double>& eps, const nc::Tensor<double>& actions,
                                    double tau);

}  // namespace moh::policy
