#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace thm {

/// xoshiro256** seeded through splitmix64.
///
/// All draws (uniform reals, bounded integers, normals) are derived with
/// integer arithmetic and IEEE operations only, so a given seed yields the
/// same sequence on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const noexcept { return seed_; }

  /// Independent stream derived from this generator's seed and `salt`.
  Rng fork(std::uint64_t salt) const;

  /// Hex serialization of the full state (seed and the four state words).
  std::string save_state() const;
  static Rng load_state(const std::string& text);

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> s_{};
};

std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace thm
