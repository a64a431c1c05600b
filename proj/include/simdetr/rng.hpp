// SPDX-License-Identifier: Apache-2.0
//
// Splittable deterministic RNG. Every consumer derives its own stream from
// (seed, stream name), so output bytes do not depend on call interleaving.
#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace simdetr {

namespace detail {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream) {
    std::uint64_t s = seed;
    std::uint64_t mixed = detail::splitmix64_next(s) ^ detail::fnv1a64(stream);
    base_ = mixed;
    state_ = mixed;
  }

  // Derive an independent child stream without consuming this one.
  Rng split(std::string_view substream) const { return Rng(base_, substream); }

  std::uint64_t next_u64() { return detail::splitmix64_next(state_); }

  // [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one draw per call, spare discarded.
  double normal() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Unbiased integer in [0,n)
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  Rng() = default;
  std::uint64_t base_ = 0;
  std::uint64_t state_ = 0;
};

}  // namespace simdetr
