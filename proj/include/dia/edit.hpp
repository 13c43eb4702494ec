// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

#include "dia/codec.hpp"
#include "dia/ddim.hpp"
#include "dia/denoiser.hpp"
#include "dia/schedule.hpp"

namespace dia {

struct EditTask {
  Condition source_cond;
  Condition target_cond;
  int steps = 10;
  double guidance = 1.0;  // applied while sampling; inversion runs unguided (w = 1)
};

/// Everything an edit or attack needs from the trained side.
struct Models {
  CodecPtr codec;
  DenoiserPtr denoiser;
  NoiseSchedule schedule;
  InversionQuery query = InversionQuery::source;
};

inline void check_models(const Models& m) {
  if (!m.codec || !m.denoiser) throw std::invalid_argument("models: missing codec or denoiser");
  if (shape_numel(m.codec->latent_shape()) != m.denoiser->latent_dim())
    throw std::invalid_argument("models: codec latent size does not match denoiser");
}

/// DDIM-to-DDIM edit: invert under the source condition, resample under the
/// target condition, decode, clamp to [0,1].
inline Tensor edit_ddim(const Tensor& x, const EditTask& task, const Models& m) {
  check_models(m);
  if (task.steps < 1) throw std::invalid_argument("edit_ddim: steps must be >= 1");
  for (double v : x)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("edit_ddim: image must lie in [0,1]");
  const TimestepGrid grid = leading_grid(m.schedule.T, task.steps);
  const Tensor z = encode(*m.codec, x);
  const Trajectory inv = rollout_invert(z, grid, m.schedule, *m.denoiser, {task.source_cond, 1.0}, m.query);
  const Trajectory smp =
      rollout_sample(inv.final_state(), grid, m.schedule, *m.denoiser, {task.target_cond, task.guidance});
  return clamp(decode(*m.codec, smp.final_state()), 0.0, 1.0);
}

}  // namespace dia
