#pragma once

#include <cstdint>
#include <random>

namespace palab {

/// Seeded generator with distributions defined here rather than by the
/// standard library, whose distribution algorithms differ between
/// implementations. std::mt19937_64's raw output is fully specified, so
/// every stream below is reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, bound); bound must be positive.
  std::uint64_t below(std::uint64_t bound);
  // Box-Muller; caches the second variate.
  double normal(double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Independent stream for a named purpose, so adding a consumer does not
// shift the values every other consumer sees.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace palab
