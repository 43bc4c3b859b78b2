#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace cmert {

// Deterministic RNG used everywhere seeds matter. The distribution code lives
// here instead of <random>'s distribution templates because those are
// implementation-defined; this keeps checkpoints and generated streams
// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range via rejection sampling (unbiased).
  int uniform_int(int lo, int hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
  }

  // Box-Muller; the cosine twin is discarded so each call consumes a fixed
  // number of engine draws.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cmert
