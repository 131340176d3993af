#pragma once

#include <cstdint>

namespace sal_lab {

std::uint64_t splitmix64(std::uint64_t x);

/// Counter-based generator: draw n of stream (seed, stream) is a pure function
/// of (seed, stream, n), so results never depend on thread count or on the
/// standard library's distributions.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t next_u64() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }
  /// Uniform in [0, n); n > 0. Rejection sampling keeps it exactly uniform.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  bool bernoulli(double p) { return uniform01() < p; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace sal_lab
