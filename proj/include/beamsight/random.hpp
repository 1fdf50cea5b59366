#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace beamsight {

// Counter-based random streams. A stream is a (key, counter) pair; every draw
// hashes the pair, so a stream keyed by (seed, epoch, sample) yields the same
// values no matter which thread consumes it or in what order.

constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine_keys(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (mix64(b) + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

constexpr std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class RandomStream {
 public:
  constexpr RandomStream() = default;
  constexpr explicit RandomStream(std::uint64_t key) : key_(mix64(key)) {}

  /// Derives an independent child stream; the parent is left untouched.
  constexpr RandomStream split(std::uint64_t sub) const {
    RandomStream child;
    child.key_ = combine_keys(key_, sub);
    return child;
  }
  constexpr RandomStream split(std::string_view label) const { return split(hash_label(label)); }

  constexpr std::uint64_t next_u64() { return mix64(key_ ^ mix64(++counter_)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do v = next_u64();
    while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double sd = 1.0) {
    // Box-Muller; consumes exactly two draws.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Poisson by inversion; fine for the small means used by the generator.
  std::uint32_t poisson(double mean) {
    const double u = uniform();
    double p = std::exp(-mean);
    double cdf = p;
    std::uint32_t k = 0;
    while (u > cdf && k < 10000) {
      ++k;
      p *= mean / k;
      cdf += p;
      if (p == 0.0) break;
    }
    return k;
  }

  constexpr std::uint64_t key() const { return key_; }
  constexpr std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Stream keyed by a seed and any number of integer coordinates.
template <typename... Keys>
RandomStream keyed_stream(std::uint64_t seed, Keys... keys) {
  RandomStream s(seed);
  ((s = s.split(static_cast<std::uint64_t>(keys))), ...);
  return s;
}

}  // namespace beamsight
