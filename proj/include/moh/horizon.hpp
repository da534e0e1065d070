#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moh/numcore/tensor.hpp"

namespace moh {

/// Ordered candidate horizons h_1 < ... < h_N = H, in action steps.
class HorizonSet {
 public:
  /// {d, 2d, ..., H}; H must be divisible by d.
  static HorizonSet with_stride(std::size_t max_horizon, std::size_t stride);
  /// Single horizon {H}: the baseline configuration.
  static HorizonSet single(std::size_t horizon) { return HorizonSet({horizon}); }

  explicit HorizonSet(std::vector<std::size_t> horizons);

  std::size_t size() const { return horizons_.size(); }
  std::size_t max_horizon() const { return horizons_.back(); }
  std::size_t operator[](std::size_t i) const { return horizons_[i]; }
  const std::vector<std::size_t>& horizons() const { return horizons_; }

  /// Step k (1-based) is predicted by horizon index n iff k <= h_n.
  bool covers(std::size_t step, std::size_t n) const { return step <= horizons_[n]; }
  /// |{h : h >= k}| for 1-based step k.
  std::size_t active_count(std::size_t step) const;
  /// Validity mask [H x N] with entry (k-1, n) = covers(k, n).
  nc::Tensor<std::uint8_t> step_mask() const;

  std::string to_string() const;
  bool operator==(const HorizonSet&) const = default;

 private:
  std::vector<std::size_t> horizons_;
};

/// H x d_a block of actions; rows beyond the episode end may be flagged
/// as padding.
struct ActionChunk {
  nc::Tensor<double> actions;           // [H x d_a]
  std::vector<std::uint8_t> row_valid;  // H entries; empty means all valid

  std::size_t horizon() const { return actions.shape.empty() ? 0 : actions.shape[0]; }
  std::size_t action_dim() const { return actions.cols(); }
};

/// First h rows of a chunk, unmodified.
nc::Tensor<double> truncate(const ActionChunk& chunk, std::size_t h);

}  // namespace moh
