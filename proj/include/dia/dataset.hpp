// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dia/denoiser.hpp"
#include "dia/rng.hpp"
#include "dia/tensor.hpp"

namespace dia {

struct Sample {
  Tensor image;
  Condition cond;
};

enum class ShapeClass : int { disk = 0, bar = 1 };

namespace detail {

// Soft edge of width ~1px so the shapes are smooth functions of their jitter.
inline double soft_step(double signed_dist) { return 1.0 / (1.0 + std::exp(4.0 * signed_dist)); }

}  // namespace detail

/// One procedurally generated grayscale shape on a dark background.
/// Class 0 is a centered disk, class 1 a centered vertical bar; position,
/// size, and intensities are jittered from `rng`.
inline Sample make_shape(ShapeClass cls, std::size_t size, Rng& rng) {
  const double n = static_cast<double>(size);
  const double cx = (n - 1.0) / 2.0 + rng.uniform(-0.6, 0.6);
  const double cy = (n - 1.0) / 2.0 + rng.uniform(-0.6, 0.6);
  const double bg = rng.uniform(0.05, 0.2);
  const double fg = rng.uniform(0.7, 0.95);
  Tensor img({size, size});
  if (cls == ShapeClass::disk) {
    const double r = n * rng.uniform(0.26, 0.36);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy) - r;
        img[y * size + x] = bg + (fg - bg) * detail::soft_step(d);
      }
  } else {
    const double half_w = n * rng.uniform(0.1, 0.16);
    const double half_h = n * rng.uniform(0.34, 0.42);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = std::abs(static_cast<double>(x) - cx) - half_w;
        const double dy = std::abs(static_cast<double>(y) - cy) - half_h;
        img[y * size + x] = bg + (fg - bg) * detail::soft_step(std::max(dx, dy));
      }
  }
  return {clamp(img, 0.0, 1.0), Condition::of(static_cast<int>(cls))};
}

/// Alternating disk/bar samples; sample i draws from its own split stream so
/// any prefix of the dataset is independent of `count`.
inline std::vector<Sample> make_toy_dataset(std::uint64_t seed, std::size_t count, std::size_t size = 8) {
  const Rng root(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = root.split(static_cast<std::uint64_t>(i));
    out.push_back(make_shape(i % 2 == 0 ? ShapeClass::disk : ShapeClass::bar, size, r));
  }
  return out;
}

/// Per-class mean image.
inline std::vector<Tensor> class_centroids(const std::vector<Sample>& data, int classes) {
  std::vector<Tensor> sums(static_cast<std::size_t>(classes), Tensor::zeros_like(data.front().image));
  std::vector<double> counts(static_cast<std::size_t>(classes), 0.0);
  for (const auto& s : data) {
    const auto c = static_cast<std::size_t>(s.cond.class_id.value_or(0));
    sums[c] += s.image;
    counts[c] += 1.0;
  }
  for (std::size_t c = 0; c < sums.size(); ++c)
    if (counts[c] > 0) sums[c] *= 1.0 / counts[c];
  return sums;
}

}  // namespace dia
