#pragma once

#include <cstdint>
#include <random>

#include "refil/tensor.hpp"

namespace refil {

/// Explicit seeded random source. Owned by callers and passed by reference;
/// the library keeps no hidden global RNG state.
///
/// Normal and uniform draws are computed here rather than through the
/// <random> distributions so results do not depend on the standard library
/// implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  float rademacher() { return (engine_() >> 63) ? 1.0f : -1.0f; }

  Tensor normal_tensor(const Shape& shape, float stddev = 1.0f);
  Tensor uniform_tensor(const Shape& shape, float lo, float hi);
  Tensor rademacher_tensor(const Shape& shape);

  /// Deterministic child seed from a parent seed and a path of indices.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace refil
