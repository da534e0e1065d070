#include "moh/horizon.hpp"

#include <algorithm>

#include "moh/errors.hpp"

namespace moh {

HorizonSet HorizonSet::with_stride(std::size_t max_horizon, std::size_t stride) {
  if (stride < 1 || stride > max_horizon) {
    throw ConfigError("horizon stride " + std::to_string(stride) + " must lie in [1, " +
                      std::to_string(max_horizon) + "]");
  }
  if (max_horizon % stride != 0) {
    throw ConfigError("horizon stride " + std::to_string(stride) + " does not divide H = " +
                      std::to_string(max_horizon));
  }
  std::vector<std::size_t> hs;
  for (std::size_t h = stride; h <= max_horizon; h += stride) hs.push_back(h);
  return HorizonSet(std::move(hs));
}

HorizonSet::HorizonSet(std::vector<std::size_t> horizons) : horizons_(std::move(horizons)) {
  if (horizons_.empty()) throw ConfigError("horizon set is empty");
  if (horizons_.front() < 1) throw ConfigError("horizons must be >= 1");
  for (std::size_t i = 1; i < horizons_.size(); ++i) {
    if (horizons_[i] <= horizons_[i - 1]) {
      throw ConfigError("horizons must be strictly increasing: " + to_string());
    }
  }
}

std::size_t HorizonSet::active_count(std::size_t step) const {
  return static_cast<std::size_t>(
      std::count_if(horizons_.begin(), horizons_.end(), [step](std::size_t h) { return h >= step; }));
}

nc::Tensor<std::uint8_t> HorizonSet::step_mask() const {
  const std::size_t H = max_horizon(), N = size();
  nc::Tensor<std::uint8_t> m(nc::Shape{H, N});
  for (std::size_t k = 1; k <= H; ++k)
    for (std::size_t n = 0; n < N; ++n) m.at(k - 1, n) = covers(k, n) ? 1 : 0;
  return m;
}

std::string HorizonSet::to_string() const {
  std::string s = "{";
  for (std::size_t i = 0; i < horizons_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(horizons_[i]);
  }
  return s + "}";
}

nc::Tensor<double> truncate(const ActionChunk& chunk, std::size_t h) {
  const std::size_t H = chunk.horizon(), da = chunk.action_dim();
  if (h > H) {
    throw ConfigError("cannot truncate a chunk of horizon " + std::to_string(H) + " to " +
                      std::to_string(h));
  }
  nc::Tensor<double> out(nc::Shape{h, da});
  std::copy_n(chunk.actions.data.begin(), h * da, out.data.begin());
  return out;
}

}  // namespace moh
