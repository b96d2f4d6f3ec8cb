#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace rtpp {

/// Seeded random stream with portable, bit-reproducible draws.
///
/// Only std::mt19937_64 is used from <random>; its output sequence is fixed by
/// the standard, whereas the std distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0, 1).
  double uniform();
  /// Standard normal via Box-Muller (one cached spare).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);
  /// Exponential with the given mean.
  double exponential(double mean);
  /// Poisson(rate) by sequential inversion.
  std::int64_t poisson(double rate);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Stream seed derived from a base seed and a user id (FNV-1a then mix).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key, std::uint64_t a);

}  // namespace rtpp
