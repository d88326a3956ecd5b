#pragma once

/**
 * Counter-derived RNG streams.
 *
 * Every random draw in the library comes from a stream derived functionally
 * from (seed, purpose, indices...). There is no global RNG state: two runs
 * with the same seed produce bit-identical draws, streams for different
 * (step, prompt, k) are independent regardless of evaluation order, and
 * resuming from a checkpoint re-derives the exact streams from the step
 * counter alone.
 */

#include <cstdint>
#include <initializer_list>

namespace nrt {

// Stream purposes. Part of the stream key, so draws for different uses
// never collide even with equal indices.
enum class RngPurpose : std::uint64_t {
  ParamInit = 1,
  Shuffle = 2,
  Trace = 3,
  Eval = 4,
  Analysis = 5,
  Warmup = 6,
  Test = 7,
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  RngStream() = default;

  static RngStream derive(std::uint64_t seed, RngPurpose purpose,
                          std::initializer_list<std::uint64_t> path = {}) {
    std::uint64_t s = seed;
    std::uint64_t mixed = splitmix64(s) ^ (static_cast<std::uint64_t>(purpose) * 0xd6e8feb86659fd93ULL);
    for (std::uint64_t p : path) {
      std::uint64_t t = mixed + 0x9e3779b97f4a7c15ULL * (p + 1);
      mixed = splitmix64(t);
    }
    RngStream r;
    r.state_ = mixed;
    return r;
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound) by rejection; bound > 0.
  std::uint64_t next_below(std::uint64_t bound) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % bound;
  }

  // Uniform in [lo, hi].
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_ = 0;
};

}  // namespace nrt
