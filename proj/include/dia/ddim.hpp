// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dia/denoiser.hpp"
#include "dia/schedule.hpp"
#include "dia/tensor.hpp"

namespace dia {

/// Which timestep the denoiser sees during an inversion move from t_from to t_to.
enum class InversionQuery { source, destination };

/// Guided noise prediction used along a trajectory. A null condition always
/// means the plain unconditional prediction.
struct Guidance {
  Condition cond;
  double scale = 1.0;

  Tensor eps(const Denoiser& d, const Tensor& z, int t) const {
    if (cond.is_null()) return predict_eps(d, z, t, cond);
    return cfg_predict(d, z, t, cond, scale);
  }
};

enum class Direction { inversion, sampling };

/// Latents h_0..h_S along a timestep grid together with the per-step Δ terms,
/// so that states[k+1] = scale_k·states[k] + deltas[k].
struct Trajectory {
  std::vector<Tensor> states;
  std::vector<Tensor> deltas;
  std::vector<int> timesteps;  // timestep of each state
  Direction direction = Direction::inversion;

  const Tensor& final_state() const { return states.back(); }
  int steps() const { return static_cast<int>(deltas.size()); }
};

inline int inversion_query_t(int t_from, int t_to, InversionQuery q) {
  return q == InversionQuery::source ? t_from : t_to;
}

inline Trajectory rollout_invert(const Tensor& z0, const TimestepGrid& grid, const NoiseSchedule& s,
                                 const Denoiser& d, const Guidance& g,
                                 InversionQuery query = InversionQuery::source) {
  validate_grid(grid, s);
  Trajectory tr;
  tr.direction = Direction::inversion;
  tr.states.push_back(z0);
  tr.timesteps.push_back(grid.taus.front());
  for (int k = 0; k < grid.steps(); ++k) {
    const int from = grid.taus[static_cast<std::size_t>(k)];
    const int to = grid.taus[static_cast<std::size_t>(k) + 1];
    const Tensor& h = tr.states.back();
    Tensor eps = g.eps(d, h, inversion_query_t(from, to, query));
    if (!eps.same_shape(h))
      throw std::invalid_argument("rollout_invert: denoiser output shape " + shape_str(eps.shape()) +
                                  " differs from latent " + shape_str(h.shape()));
    auto step = ddim_invert_step(h, from, to, eps, s);
    tr.states.push_back(std::move(step.next));
    tr.deltas.push_back(std::move(step.delta));
    tr.timesteps.push_back(to);
  }
  return tr;
}

/// Descends the grid from τ_S to τ_0. states[0] is the input at τ_S.
inline Trajectory rollout_sample(const Tensor& zT, const TimestepGrid& grid, const NoiseSchedule& s,
                                 const Denoiser& d, const Guidance& g) {
  validate_grid(grid, s);
  Trajectory tr;
  tr.direction = Direction::sampling;
  tr.states.push_back(zT);
  tr.timesteps.push_back(grid.taus.back());
  for (int k = grid.steps(); k > 0; --k) {
    const int from = grid.taus[static_cast<std::size_t>(k)];
    const int to = grid.taus[static_cast<std::size_t>(k) - 1];
    const Tensor& h = tr.states.back();
    Tensor eps = g.eps(d, h, from);
    if (!eps.same_shape(h))
      throw std::invalid_argument("rollout_sample: denoiser output shape " + shape_str(eps.shape()) +
                                  " differs from latent " + shape_str(h.shape()));
    const auto [scale, gain] = ddim_coeffs(from, to, s);
    Tensor delta = eps * gain;
    Tensor next = ddim_sample_step(h, from, to, eps, s);
    tr.states.push_back(std::move(next));
    tr.deltas.push_back(std::move(delta));
    tr.timesteps.push_back(to);
  }
  return tr;
}

/// h_S = bias + mt   and   h_S = h_0 + pt
struct Decomposition {
  Tensor bias;  // decayed starting latent
  Tensor mt;    // model trajectory: accumulated, rescaled Δ terms
  Tensor pt;    // process trajectory
};

inline Decomposition decompose_trajectory(const Trajectory& tr, const NoiseSchedule& s) {
  if (tr.direction != Direction::inversion)
    throw std::invalid_argument("decompose_trajectory: needs an inversion trajectory");
  if (tr.states.size() != tr.deltas.size() + 1 || tr.timesteps.size() != tr.states.size())
    throw std::invalid_argument("decompose_trajectory: malformed trajectory");
  const double ab_first = s.abar(tr.timesteps.front());
  const double ab_last = s.abar(tr.timesteps.back());
  Decomposition out;
  out.bias = tr.states.front() * std::sqrt(ab_last / ab_first);
  out.mt = Tensor::zeros_like(tr.states.front());
  for (std::size_t k = 0; k < tr.deltas.size(); ++k)
    out.mt.axpy(std::sqrt(ab_last) / std::sqrt(s.abar(tr.timesteps[k + 1])), tr.deltas[k]);
  out.pt = tr.states.back() - tr.states.front();
  return out;
}

}  // namespace dia
