#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace forge {

/// Seedable generator used for every random draw in the project.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the standard,
/// and the uniform/normal transforms below are implemented here rather than taken
/// from <random> distributions (those are implementation-defined). Independent
/// streams are derived with split(name): the child seed is
/// splitmix64(seed ^ fnv1a64(name)), so "init", "data" and "sampling" never share
/// a sequence and adding draws to one stream leaves the others untouched.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  Rng split(std::string_view stream) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace forge
