#pragma once

// Deterministic random number generation. Every random choice in the library
// (synthetic features, label-noise selection, parameter initialization, batch
// shuffles) flows through SplitMix64 keyed by an integer seed and a stream id,
// so datasets and training runs are reproducible from the seed alone.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

namespace jttm {

// SplitMix64, Steele/Lea/Flood 2014. Reference constants from
// https://prng.di.unimi.it/splitmix64.c
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double next_double() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n) via rejection sampling.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    std::uint64_t r;
    do {
      r = next();
    } while (r < threshold);
    return r % n;
  }

 private:
  std::uint64_t state_;
};

// Fixed stream ids separating the independent uses of one user seed.
enum class Stream : std::uint64_t {
  synthetic_features = 1,
  noise_selection = 2,
  noise_labels = 3,
  param_init = 4,
  shuffle = 5,
  stage2 = 6,
};

// Derives an independent sub-seed from (seed, stream, counter) by chaining
// SplitMix64 rounds. The counter separates per-epoch shuffles.
inline std::uint64_t mix_seed(std::uint64_t seed, Stream stream,
                              std::uint64_t counter = 0) {
  SplitMix64 a(seed);
  SplitMix64 b(a.next() + static_cast<std::uint64_t>(stream));
  SplitMix64 c(b.next() + counter);
  return c.next();
}

// Box-Muller. Values are produced two at a time; the spare of an odd-length
// tail is discarded so consumption does not depend on caller history.
inline void fill_standard_normal(SplitMix64& rng, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); i += 2) {
    double u1 = rng.next_double();
    while (u1 <= 0.0) u1 = rng.next_double();
    const double u2 = rng.next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    out[i] = r * std::cos(a);
    if (i + 1 < out.size()) out[i + 1] = r * std::sin(a);
  }
}

// Fisher-Yates permutation of {0, ..., n-1}.
inline std::vector<std::size_t> random_permutation(std::size_t n,
                                                   SplitMix64& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

}  // namespace jttm
