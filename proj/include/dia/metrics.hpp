// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dia/tensor.hpp"

namespace dia::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;
inline constexpr std::size_t kSsimWindow = 8;

inline double mse(const Tensor& a, const Tensor& b) {
  Tensor::require_same_shape(a, b, "mse");
  return squared_norm(a - b) / static_cast<double>(a.size());
}

/// Unit dynamic range; capped at 99 dB when mse < 1e-10.
inline double psnr_from_mse(double m) {
  if (m < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

inline double psnr(const Tensor& a, const Tensor& b) { return psnr_from_mse(mse(a, b)); }

inline double linf(const Tensor& a, const Tensor& b) {
  Tensor::require_same_shape(a, b, "linf");
  return max_abs(a - b);
}

namespace detail {

// SSIM over one window given flat index lists; sample (N−1) covariances.
inline double ssim_window(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& idx, double range) {
  const double n = static_cast<double>(idx.size());
  double ma = 0.0, mb = 0.0;
  for (auto i : idx) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (auto i : idx) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    cov += (a[i] - ma) * (b[i] - mb);
  }
  const double denom = n > 1.0 ? n - 1.0 : 1.0;
  va /= denom;
  vb /= denom;
  cov /= denom;
  const double c1 = (kSsimK1 * range) * (kSsimK1 * range);
  const double c2 = (kSsimK2 * range) * (kSsimK2 * range);
  return ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

}  // namespace detail

/// Structural similarity on rank-2 images with dynamic range 1. The 8×8
/// window is clipped to the image on each axis and slid at stride 1; the
/// window means are averaged. Images no larger than 8×8 get one global window.
inline double ssim(const Tensor& a, const Tensor& b) {
  Tensor::require_same_shape(a, b, "ssim");
  std::size_t h = 1, w = a.size();
  if (a.shape().size() == 2) {
    h = a.shape()[0];
    w = a.shape()[1];
  }
  const std::size_t wh = std::min(kSsimWindow, h), ww = std::min(kSsimWindow, w);
  std::vector<std::size_t> idx;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + wh <= h; ++y)
    for (std::size_t x = 0; x + ww <= w; ++x) {
      idx.clear();
      for (std::size_t dy = 0; dy < wh; ++dy)
        for (std::size_t dx = 0; dx < ww; ++dx) idx.push_back((y + dy) * w + x + dx);
      total += detail::ssim_window(a, b, idx, 1.0);
      ++count;
    }
  return total / static_cast<double>(count);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace dia::metrics
