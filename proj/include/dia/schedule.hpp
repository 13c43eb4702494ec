// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dia/tensor.hpp"

namespace dia {

/// Discrete diffusion schedule with β linearly spaced over T steps.
///
/// Index t runs over [0, T); alpha_bar[t] is the running product of
/// alpha[0..t], so alpha_bar[0] = alpha[0].
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double abar(int t) const {
    check_t(t);
    return alpha_bar[static_cast<std::size_t>(t)];
  }

  void check_t(int t) const {
    if (t < 0 || t >= T)
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  }

  bool operator==(const NoiseSchedule&) const = default;
};

inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("build_schedule: T must be at least 2");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

inline NoiseSchedule default_schedule() { return build_schedule(1000, 1e-4, 0.02); }

inline void to_json(nlohmann::json& j, const NoiseSchedule& s) {
  j = nlohmann::json{{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline void from_json(const nlohmann::json& j, NoiseSchedule& s) {
  s = build_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

/// Increasing DDIM timesteps τ_0 < τ_1 < ... < τ_S.
struct TimestepGrid {
  std::vector<int> taus;

  int steps() const { return static_cast<int>(taus.size()) - 1; }
  int first() const { return taus.front(); }
  int last() const { return taus.back(); }

  bool operator==(const TimestepGrid&) const = default;
};

inline void validate_grid(const TimestepGrid& g, const NoiseSchedule& s) {
  if (g.taus.size() < 2) throw std::invalid_argument("timestep grid needs at least one step");
  if (g.taus.front() < 0) throw std::invalid_argument("timestep grid starts below 0");
  if (g.taus.back() > s.T - 1)
    throw std::invalid_argument("timestep grid ends at " + std::to_string(g.taus.back()) + " beyond T-1 = " +
                                std::to_string(s.T - 1));
  for (std::size_t k = 1; k < g.taus.size(); ++k)
    if (g.taus[k] <= g.taus[k - 1]) throw std::invalid_argument("timestep grid is not strictly increasing");
}

/// Leading spacing: τ_k = k·⌊T/S⌋.
inline TimestepGrid leading_grid(int T, int steps) {
  if (steps < 1) throw std::invalid_argument("leading_grid: steps must be >= 1");
  const int stride = T / steps;
  if (stride < 1) throw std::invalid_argument("leading_grid: more steps than timesteps");
  TimestepGrid g;
  for (int k = 0; k <= steps; ++k) g.taus.push_back(k * stride);
  // When S divides T the final point lands on T itself; cap it at T-1.
  if (g.taus.back() > T - 1) g.taus.back() = T - 1;
  return g;
}

inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  Tensor::require_same_shape(x0, eps, "forward_noise");
  const double ab = s.abar(t);
  return lincomb(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// λ(t) = √(1/ᾱ_{t+1} − 1) − √(1/ᾱ_t − 1)
inline double lambda_coeff(int t, const NoiseSchedule& s) {
  if (t == s.T - 1) throw std::out_of_range("lambda_coeff: alpha_bar[t+1] undefined at t = T-1");
  return std::sqrt(1.0 / s.abar(t + 1) - 1.0) - std::sqrt(1.0 / s.abar(t) - 1.0);
}

/// Coefficients of one deterministic DDIM move x_to = scale·x_from + eps_gain·ε,
/// valid in both directions.
struct StepCoeffs {
  double scale;
  double eps_gain;
};

inline StepCoeffs ddim_coeffs_abar(double abar_from, double abar_to) {
  const double scale = std::sqrt(abar_to / abar_from);
  const double gain = std::sqrt(abar_to) * (std::sqrt(1.0 / abar_to - 1.0) - std::sqrt(1.0 / abar_from - 1.0));
  return {scale, gain};
}

inline StepCoeffs ddim_coeffs(int t_from, int t_to, const NoiseSchedule& s) {
  return ddim_coeffs_abar(s.abar(t_from), s.abar(t_to));
}

/// Deterministic DDIM denoising move from t_from down to t_to (σ = 0).
inline Tensor ddim_sample_step(const Tensor& x, int t_from, int t_to, const Tensor& eps_pred,
                               const NoiseSchedule& s) {
  if (t_to >= t_from)
    throw std::invalid_argument("ddim_sample_step: t_to (" + std::to_string(t_to) + ") must be below t_from (" +
                                std::to_string(t_from) + ")");
  Tensor::require_same_shape(x, eps_pred, "ddim_sample_step");
  const double ab_from = s.abar(t_from), ab_to = s.abar(t_to);
  // predicted x0, then re-noise toward t_to
  Tensor out(x.shape());
  const double a = std::sqrt(ab_to) / std::sqrt(ab_from);
  const double c = std::sqrt(1.0 - ab_to) - std::sqrt(ab_to) * std::sqrt(1.0 - ab_from) / std::sqrt(ab_from);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + c * eps_pred[i];
  return out;
}

struct InvertStep {
  Tensor next;
  Tensor delta;
};

/// Deterministic DDIM inversion move from t_from up to t_to. Returns the next
/// latent and the noising term Δ separately: next = scale·x + Δ.
inline InvertStep ddim_invert_step(const Tensor& x, int t_from, int t_to, const Tensor& eps_pred,
                                   const NoiseSchedule& s) {
  if (t_to <= t_from)
    throw std::invalid_argument("ddim_invert_step: t_to (" + std::to_string(t_to) + ") must exceed t_from (" +
                                std::to_string(t_from) + ")");
  Tensor::require_same_shape(x, eps_pred, "ddim_invert_step");
  const auto [scale, gain] = ddim_coeffs(t_from, t_to, s);
  Tensor delta = eps_pred * gain;
  Tensor next = x * scale;
  next += delta;
  return {std::move(next), std::move(delta)};
}

}  // namespace dia
