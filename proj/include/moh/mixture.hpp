#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "moh/horizon.hpp"
#include "moh/numcore/ops.hpp"
#include "moh/numcore/params.hpp"

namespace moh::mixture {

// Row conventions used throughout:
//   per-horizon rows  (b, n, k) -> (b * N + n) * H + k
//   step rows         (b, k)    -> b * H + k
// with k the 0-based step inside the chunk.

enum class FusionMode { gated, average };

/// Mixture weights alpha [B*H x N] over horizons at every step, with the
/// validity mask (step k+1 <= h_n). Invalid entries are exactly zero.
template <typename T>
struct GateWeights {
  nc::Var<T> alpha;
  nc::Var<T> logits;  // unset for average fusion
  nc::Tensor<std::uint8_t> valid;
  std::size_t batch = 0;
  std::size_t horizon = 0;
  std::size_t streams = 0;
};

/// Registers the shared linear gate head d_model -> 1 (weights + bias).
template <typename T>
void init_gate(nc::ParamStore<T>& store, std::size_t d_model, const nc::CounterRng& rng);

/// Gate logits from each horizon's own hidden state through the shared head,
/// normalized by a masked softmax over the horizons valid at each step.
template <typename T>
GateWeights<T> gate(nc::Binder<T>& bind, nc::Var<T> hidden, const HorizonSet& horizons,
                    std::size_t batch);

/// Same normalization applied to externally supplied logits [B*H x N].
template <typename T>
GateWeights<T> gate_from_logits(nc::Var<T> logits, const HorizonSet& horizons, std::size_t batch);

/// Uniform weights over the valid horizons at each step (no gate head).
template <typename T>
GateWeights<T> average_gate(nc::Tape<T>& tape, const HorizonSet& horizons, std::size_t batch);

/// Fused prediction [B*H x D]: a_k = sum over valid h of alpha[k][h] * a^(h)_k,
/// from per-horizon predictions [B*N*H x D].
template <typename T>
nc::Var<T> fuse(nc::Var<T> per_horizon, const GateWeights<T>& weights);

/// Mean squared coefficient of variation of per-interval average gate usage.
/// Steps are partitioned by {0, h_1, ..., h_N}; interval i averages alpha over
/// the batch and its steps for the horizons still active there, and only
/// intervals with more than one active horizon contribute.
template <typename T>
nc::Var<T> balance_loss(nc::Var<T> alpha, const HorizonSet& horizons, std::size_t batch,
                        double eps = 1e-8);

/// Loss components of one step; total = mix + lambda_ind * ind + lambda_bal * bal.
struct MoHLossBreakdown {
  double mix = 0.0;
  double ind = 0.0;
  double bal = 0.0;
  double total = 0.0;
  double lambda_ind = 1.0;
  double lambda_bal = 1e-3;
  std::vector<double> per_horizon;
};

MoHLossBreakdown moh_objective(double mix, std::span<const double> per_horizon, double bal,
                               double lambda_ind = 1.0, double lambda_bal = 1e-3);

/// Graph version: mix and bal are scalars, per_horizon is [N].
template <typename T>
nc::Var<T> moh_objective(nc::Var<T> mix, nc::Var<T> per_horizon, nc::Var<T> bal, double lambda_ind,
                         double lambda_bal);

/// Accumulates mean gate weight per (step, horizon) over an evaluation set.
class GateStats {
 public:
  explicit GateStats(HorizonSet horizons);

  /// alpha is [B*H x N] in step-row order.
  void add(const nc::Tensor<double>& alpha);
  nc::Tensor<double> mean() const;  // [H x N]; inactive entries are 0
  std::size_t samples() const { return samples_; }
  const HorizonSet& horizons() const { return horizons_; }

  /// CSV columns: step,horizon,mean_weight (1-based steps, horizon in steps).
  void write_csv(std::ostream& os) const;
  /// Balance-loss statistic of the mean weights (per-interval CV^2 averaged).
  double interval_cv2(double eps = 1e-8) const;

 private:
  HorizonSet horizons_;
  nc::Tensor<double> sum_;
  std::size_t samples_ = 0;
};

}  // namespace moh::mixture
