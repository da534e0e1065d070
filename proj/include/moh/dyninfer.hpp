#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "moh/horizon.hpp"
#include "moh/numcore/tensor.hpp"

namespace moh::dyninfer {

struct ConsensusConfig {
  double r = 1.1;      // scaling ratio on the early-step mean disagreement
  std::size_t n = 5;   // minimum executed steps
  std::size_t m = 5;   // minimum active horizons to keep extending

  void validate(std::size_t max_horizon) const;
};

struct ConsensusTrace {
  std::vector<double> disagreement;   // d_k for k = 1..H (index k-1)
  std::vector<std::size_t> active;    // |H_k| for k = 1..H
  double threshold = 0.0;
  std::size_t k_exec = 0;
};

/// Weighted l1 disagreement at 1-based step k between the fused action and
/// each active horizon's action. fused: [H x d_a]; per_horizon: [N x H x d_a];
/// alpha: [H x N].
double disagreement(const nc::Tensor<double>& fused, const nc::Tensor<double>& per_horizon,
                    const nc::Tensor<double>& alpha, const HorizonSet& horizons, std::size_t k);

/// Prefix selection from precomputed disagreements d_1..d_H.
ConsensusTrace consensus_from_disagreements(std::span<const double> dbar, const HorizonSet& horizons,
                                            const ConsensusConfig& cfg);

/// Executable prefix length by horizon consensus.
ConsensusTrace consensus_prefix(const nc::Tensor<double>& fused, const nc::Tensor<double>& per_horizon,
                                const nc::Tensor<double>& alpha, const HorizonSet& horizons,
                                const ConsensusConfig& cfg);

/// One JSON object per line: {"disagreement": [...], "threshold": t, "k_exec": K, "active": [...]}.
void write_trace(std::ostream& os, const ConsensusTrace& trace);

}  // namespace moh::dyninfer
