// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string_view>

#include "dia/tensor.hpp"

namespace dia {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based generator: output n is a pure function of (key, n), so a
/// stream can be split into independent children without consuming state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(detail::splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t seed_key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    std::uint64_t x = detail::splitmix64(key_ ^ detail::splitmix64(counter_++));
    return detail::splitmix64(x + key_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    // Lemire-style rejection keeps the result unbiased.
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t v;
    do v = next_u64();
    while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; one draw per pair of uniforms.
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool coin() { return (next_u64() >> 63) != 0; }

  Rng split(std::uint64_t tag) const { return Rng(key_, detail::splitmix64(tag) ^ 0xd1b54a32d192ed03ULL); }
  Rng split(std::string_view tag) const { return split(detail::fnv1a(tag)); }

 private:
  Rng(std::uint64_t parent, std::uint64_t tag) : key_(detail::splitmix64(parent ^ tag)) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline Tensor sample_gaussian(Rng& rng, const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("sample_gaussian: empty shape");
  for (auto e : shape)
    if (e == 0) throw std::invalid_argument("sample_gaussian: zero extent in shape " + shape_str(shape));
  Tensor out(shape);
  for (auto& v : out) v = rng.gaussian();
  return out;
}

inline Tensor sample_uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor out(shape);
  for (auto& v : out) v = rng.uniform(lo, hi);
  return out;
}

}  // namespace dia
