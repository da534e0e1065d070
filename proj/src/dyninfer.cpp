#include "moh/dyninfer.hpp"

#include <cmath>
#include <ostream>

#include <json.hpp>

#include "moh/errors.hpp"

namespace moh::dyninfer {

void ConsensusConfig::validate(std::size_t max_horizon) const {
  if (n < 1 || m < 1) throw ConfigError("consensus n and m must be >= 1");
  if (!(r > 0.0)) throw ConfigError("consensus r must be positive");
  if (n > max_horizon) {
    throw ConfigError("consensus n = " + std::to_string(n) + " exceeds the chunk length " +
                      std::to_string(max_horizon));
  }
}

double disagreement(const nc::Tensor<double>& fused, const nc::Tensor<double>& per_horizon,
                    const nc::Tensor<double>& alpha, const HorizonSet& horizons, std::size_t k) {
  const std::size_t H = horizons.max_horizon(), N = horizons.size();
  if (fused.shape.size() != 2 || fused.shape[0] != H || per_horizon.shape != nc::Shape{N, H, fused.shape[1]} ||
      alpha.shape != nc::Shape{H, N}) {
    throw nc::DimensionError("disagreement: fused " + nc::to_string(fused.shape) + ", per-horizon " +
                             nc::to_string(per_horizon.shape) + ", alpha " + nc::to_string(alpha.shape) +
                             " do not match horizons " + horizons.to_string());
  }
  if (k < 1 || k > H) throw ConfigError("disagreement: step " + std::to_string(k) + " outside [1, H]");
  const std::size_t da = fused.shape[1];
  double d = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (!horizons.covers(k, n)) continue;
    double l1 = 0.0;
    for (std::size_t j = 0; j < da; ++j)
      l1 += std::abs(fused.at(k - 1, j) - per_horizon[(n * H + k - 1) * da + j]);
    d += alpha.at(k - 1, n) * l1;
  }
  return d;
}

ConsensusTrace consensus_from_disagreements(std::span<const double> dbar, const HorizonSet& horizons,
                                            const ConsensusConfig& cfg) {
  const std::size_t H = horizons.max_horizon();
  cfg.validate(H);
  if (dbar.size() != H) throw nc::DimensionError("consensus: need one disagreement per step");
  ConsensusTrace t;
  t.disagreement.assign(dbar.begin(), dbar.end());
  for (std::size_t k = 1; k <= H; ++k) t.active.push_back(horizons.active_count(k));
  double early = 0.0;
  for (std::size_t k = 0; k < cfg.n; ++k) early += dbar[k];
  t.threshold = early / static_cast<double>(cfg.n) * cfg.r;
  t.k_exec = cfg.n;
  for (std::size_t k = cfg.n + 1; k <= H; ++k) {
    if (t.active[k - 1] < cfg.m || dbar[k - 1] > t.threshold) break;
    t.k_exec = k;
  }
  return t;
}

ConsensusTrace consensus_prefix(const nc::Tensor<double>& fused, const nc::Tensor<double>& per_horizon,
                                const nc::Tensor<double>& alpha, const HorizonSet& horizons,
                                const ConsensusConfig& cfg) {
  const std::size_t H = horizons.max_horizon();
  cfg.validate(H);
  std::vector<double> d(H);
  for (std::size_t k = 1; k <= H; ++k) d[k - 1] = disagreement(fused, per_horizon, alpha, horizons, k);
  return consensus_from_disagreements(d, horizons, cfg);
}

void write_trace(std::ostream& os, const ConsensusTrace& trace) {
  nlohmann::json j;
  j["disagreement"] = trace.disagreement;
  j["threshold"] = trace.threshold;
  j["k_exec"] = trace.k_exec;
  j["active"] = trace.active;
  os << j.dump() << '\n';
}

}  // namespace moh::dyninfer
