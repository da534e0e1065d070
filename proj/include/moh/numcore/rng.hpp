#pragma once

#include <cstdint>
#include <string_view>

namespace moh::nc {

/// SplitMix64 run in counter mode: draw i of a stream is mix(key, i), so any
/// draw is addressable and streams are derived by hashing tags into the key.
/// All randomness in the project flows through explicitly passed instances.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0)
      : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal();
  /// Normal with the given std, resampled until |x| <= bound * std.
  double truncated_normal(double std, double bound = 2.0);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  CounterRng derive(std::uint64_t tag) const;
  CounterRng derive(std::string_view tag) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_string(std::string_view s);

}  // namespace moh::nc
