#pragma once

#include <cmath>
#include <cstdint>

namespace hourglass {

// Deterministic random stream based on SplitMix64. The generator algorithm
// is fixed so that a given seed yields the same draw sequence on every
// platform; `position()` counts raw 64-bit draws.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    ++position_;
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // Independent stream derived from this stream's seed and an index; used
  // for per-sample generation so samples are order-independent.
  RngStream child(uint64_t index) const {
    RngStream mix(state_ ^ (0xA5A5A5A5DEADBEEFULL + index * 0x9E3779B97F4A7C15ULL));
    mix.next_u64();
    return RngStream(mix.next_u64());
  }

  uint64_t position() const { return position_; }

 private:
  uint64_t state_;
  uint64_t position_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hourglass
