#include "rtpp/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rtpp {

double Rng::uniform() {
  // 53 random mantissa bits, shifted off zero.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::exponential(double mean) { return -std::log(uniform()) * mean; }

std::int64_t Rng::poisson(double rate) {
  if (!(rate > 0.0)) throw std::invalid_argument("Rng::poisson: rate must be positive");
  const double u = uniform();
  // Walk the CDF in log space so large rates do not underflow exp(-rate).
  std::int64_t k = 0;
  double log_p = -rate;
  double cdf = std::exp(log_p);
  while (cdf < u) {
    ++k;
    log_p += std::log(rate) - std::log(static_cast<double>(k));
    cdf += std::exp(log_p);
    if (k > 100000 + static_cast<std::int64_t>(20.0 * rate)) break;
  }
  return k;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(mix64(seed) ^ h);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) { return mix64(mix64(seed) ^ mix64(a + 0x632be59bd9b4e019ULL)); }

std::uint64_t derive_seed(std::uint64_t seed, std::string_view key, std::uint64_t a) {
  return derive_seed(derive_seed(seed, key), a);
}

}  // namespace rtpp
