// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dia/rng.hpp"
#include "dia/tensor.hpp"

namespace dia::purify {

/// x + σ·N(0, I), clamped to [0,1].
inline Tensor gaussian(const Tensor& x, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("purify::gaussian: sigma must be >= 0");
  if (sigma == 0.0) return x;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + sigma * rng.gaussian(), 0.0, 1.0);
  return out;
}

/// Removes `crop_frac` of each axis (half from each border, centered) and
/// resizes back with corner-aligned bilinear interpolation.
///
/// In pixel-centre coordinates the kept region is [c, n−1−c] with
/// c = crop_frac·(n−1)/2; output pixel i samples c + i·(n−1−2c)/(n−1).
inline Tensor crop_resize(const Tensor& x, double crop_frac) {
  if (x.shape().size() != 2) throw std::invalid_argument("purify::crop_resize: expected a rank-2 image");
  if (!(crop_frac >= 0.0 && crop_frac < 1.0)) throw std::invalid_argument("purify::crop_resize: crop_frac must be in [0,1)");
  if (crop_frac == 0.0) return x;
  const auto h = x.shape()[0], w = x.shape()[1];
  auto coord = [crop_frac](std::size_t i, std::size_t n) {
    if (n == 1) return 0.0;
    const double span = static_cast<double>(n - 1);
    const double c = crop_frac * span / 2.0;
    return c + static_cast<double>(i) * (span - 2.0 * c) / span;
  };
  Tensor out(x.shape());
  for (std::size_t i = 0; i < h; ++i) {
    const double sy = coord(i, h);
    const auto y0 = std::min(static_cast<std::size_t>(std::floor(sy)), h - 1);
    const auto y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < w; ++j) {
      const double sx = coord(j, w);
      const auto x0 = std::min(static_cast<std::size_t>(std::floor(sx)), w - 1);
      const auto x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * x[y0 * w + x0] + fx * x[y0 * w + x1];
      const double bot = (1.0 - fx) * x[y1 * w + x0] + fx * x[y1 * w + x1];
      out[i * w + j] = (1.0 - fy) * top + fy * bot;
    }
  }
  return out;
}

/// Rounds to `levels` evenly spaced values in [0,1].
inline Tensor quantize(const Tensor& x, int levels) {
  if (levels < 2) throw std::invalid_argument("purify::quantize: need at least 2 levels");
  const double q = static_cast<double>(levels - 1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::round(std::clamp(x[i], 0.0, 1.0) * q) / q;
  return out;
}

}  // namespace dia::purify
