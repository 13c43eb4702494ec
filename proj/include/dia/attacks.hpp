// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dia/pipeline.hpp"
#include "dia/rng.hpp"

namespace dia {

enum class Objective { dia_pt, dia_r, dia_mt, adv_dm, sds, encoder, random };

inline constexpr std::array<std::pair<Objective, std::string_view>, 7> kObjectiveNames{{
    {Objective::dia_pt, "dia_pt"},
    {Objective::dia_r, "dia_r"},
    {Objective::dia_mt, "dia_mt"},
    {Objective::adv_dm, "adv_dm"},
    {Objective::sds, "sds"},
    {Objective::encoder, "encoder"},
    {Objective::random, "random"},
}};

inline std::string objective_name(Objective o) {
  for (const auto& [k, v] : kObjectiveNames)
    if (k == o) return std::string(v);
  throw std::logic_error("objective_name: unknown objective");
}

inline std::string objective_list() {
  std::string s;
  for (const auto& [k, v] : kObjectiveNames) s += (s.empty() ? "" : ", ") + std::string(v);
  return s;
}

inline Objective parse_objective(std::string_view name) {
  for (const auto& [k, v] : kObjectiveNames)
    if (v == name) return k;
  throw std::invalid_argument("unknown objective '" + std::string(name) + "' (valid: " + objective_list() + ")");
}

struct AttackConfig {
  double epsilon = 0.05;
  double step_size = 0.005;  // ε/10
  int iterations = 20;
  Objective objective = Objective::dia_pt;
  int traj_steps = 10;
  std::uint64_t seed = 0;
  bool random_start = false;
  GradMode grad_mode = GradMode::decomposed;
};

inline void validate(const AttackConfig& c) {
  if (!(c.epsilon > 0.0)) throw std::invalid_argument("attack: epsilon must be positive");
  if (!(c.step_size > 0.0 && c.step_size <= c.epsilon))
    throw std::invalid_argument("attack: need 0 < step_size <= epsilon");
  if (c.iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
  if (c.traj_steps < 1) throw std::invalid_argument("attack: traj_steps must be >= 1");
}

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"epsilon", c.epsilon},         {"step_size", c.step_size},
                     {"iterations", c.iterations},   {"objective", objective_name(c.objective)},
                     {"traj_steps", c.traj_steps},   {"seed", c.seed},
                     {"random_start", c.random_start}, {"grad_mode", c.grad_mode == GradMode::naive ? "naive" : "decomposed"}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  c = AttackConfig{};
  c.objective = parse_objective(j.at("objective").get<std::string>());
  c.epsilon = j.value("epsilon", c.epsilon);
  c.step_size = j.value("step_size", c.epsilon / 10.0);
  c.iterations = j.value("iterations", c.iterations);
  c.traj_steps = j.value("traj_steps", c.traj_steps);
  c.seed = j.value("seed", c.seed);
  c.random_start = j.value("random_start", c.random_start);
  const auto mode = j.value("grad_mode", std::string("decomposed"));
  if (mode != "decomposed" && mode != "naive") throw std::invalid_argument("grad_mode must be decomposed or naive");
  c.grad_mode = mode == "naive" ? GradMode::naive : GradMode::decomposed;
  validate(c);
}

struct AttackResult {
  Tensor delta;
  std::vector<double> loss_curve;  // objective at the start of each iteration
  double final_loss = 0.0;         // objective at the returned perturbation
  Tensor immunized;                // clamp(x + δ)
};

/// Objective value and the direction PGD follows. `ascent` = false means the
/// sign step is subtracted.
struct ObjectiveValue {
  double value = 0.0;
  Tensor grad;
  bool ascent = true;
};

using ObjectiveFn = std::function<ObjectiveValue(const Tensor& x, Rng& rng)>;

/// Models the attacks run against.
struct AttackContext {
  CodecPtr codec;
  DenoiserPtr denoiser;
  NoiseSchedule schedule;
  Guidance guidance;
  InversionQuery query = InversionQuery::source;
};

inline Pipeline attack_inversion_pipeline(const AttackContext& ctx, int steps) {
  return make_inversion_pipeline(ctx.codec, ctx.denoiser, ctx.schedule, leading_grid(ctx.schedule.T, steps),
                                 ctx.guidance, ctx.query);
}

inline Pipeline attack_roundtrip_pipeline(const AttackContext& ctx, int steps) {
  return make_roundtrip_pipeline(ctx.codec, ctx.denoiser, ctx.schedule, leading_grid(ctx.schedule.T, steps),
                                 ctx.guidance, ctx.guidance, ctx.query);
}

namespace detail {

inline LossValue squared_distance(const Tensor& terminal, const Tensor& target) {
  Tensor r = terminal - target;
  const double v = squared_norm(r);
  return {v, r * 2.0};
}

inline void require_inversion_plan(const Pipeline& p, const char* who) {
  if (p.stages.empty() || p.stages.front().kind != StageKind::encode || !p.has(StageKind::invert) ||
      p.has(StageKind::sample) || p.has(StageKind::decode))
    throw std::invalid_argument(std::string(who) + ": plan must be encode followed by inversion steps");
}

inline int last_inversion_t(const Pipeline& p) {
  for (auto it = p.stages.rbegin(); it != p.stages.rend(); ++it)
    if (it->kind == StageKind::invert) return it->t_to;
  throw std::invalid_argument("pipeline has no inversion stage");
}

}  // namespace detail

/// ‖h_S − E(x)‖² with E(x) held constant for the gradient.
inline ObjectiveValue loss_dia_pt(const Tensor& x, const Pipeline& p, GradMode mode = GradMode::decomposed) {
  detail::require_inversion_plan(p, "loss_dia_pt");
  const Tensor anchor = encode(*p.codec, x);
  auto r = trajectory_grad(p, detail::squared_distance, x, anchor, mode);
  return {r.loss, std::move(r.grad), true};
}

/// ‖decode(sample(invert(E(x)))) − x‖² with the subtracted x held constant.
inline ObjectiveValue loss_dia_r(const Tensor& x, const Pipeline& p, GradMode mode = GradMode::decomposed) {
  if (p.stages.empty() || p.stages.front().kind != StageKind::encode || p.stages.back().kind != StageKind::decode ||
      !p.has(StageKind::invert) || !p.has(StageKind::sample))
    throw std::invalid_argument("loss_dia_r: plan must be encode, inversion, sampling, decode");
  auto r = trajectory_grad(p, detail::squared_distance, x, x, mode);
  return {r.loss, std::move(r.grad), true};
}

/// ‖h_S − √ᾱ_{τS}·E(x)‖² with the subtrahend held constant.
inline ObjectiveValue loss_dia_mt(const Tensor& x, const Pipeline& p, GradMode mode = GradMode::decomposed) {
  detail::require_inversion_plan(p, "loss_dia_mt");
  const double c = std::sqrt(p.schedule.abar(detail::last_inversion_t(p)));
  const Tensor anchor = encode(*p.codec, x) * c;
  auto r = trajectory_grad(p, detail::squared_distance, x, anchor, mode);
  return {r.loss, std::move(r.grad), true};
}

/// One diffusion-loss draw: ‖ε − ε_θ(√ᾱ_t·E(x) + √(1−ᾱ_t)·ε, t)‖² and its
/// gradient through the denoiser and the encoder.
inline ObjectiveValue loss_adv_dm_fixed(const Tensor& x, const Pipeline& p, int t, const Tensor& eps) {
  const Tensor z = encode(*p.codec, x);
  const double ab = p.schedule.abar(t);
  const Tensor zt = forward_noise(z, t, eps, p.schedule);
  const Guidance& g = p.stages.size() > 1 ? p.stages[1].guidance : Guidance{};
  detail::GuidedTapes tapes;
  const Tensor pred = detail::guided_record(*p.denoiser, g, zt, t, tapes);
  Tensor r = eps - pred;
  const double v = squared_norm(r);
  Tensor gz = detail::guided_vjp(*p.denoiser, tapes, r * -2.0) * std::sqrt(ab);
  return {v, p.codec->encode_vjp(x, gz), true};
}

inline int sample_grid_timestep(const Pipeline& p, Rng& rng) {
  return p.grid.taus[rng.below(p.grid.taus.size())];
}

/// AdvDM-style: t uniform over the grid, ε ~ N(0, I), fresh per call.
inline ObjectiveValue loss_adv_dm(const Tensor& x, const Pipeline& p, Rng& rng) {
  const int t = sample_grid_timestep(p, rng);
  const Tensor eps = sample_gaussian(rng, p.codec->latent_shape());
  return loss_adv_dm_fixed(x, p, t, eps);
}

/// ‖E(x) − target‖² with a constant target latent.
inline ObjectiveValue loss_encoder(const Tensor& x, const Tensor& target_latent, const Codec& codec) {
  const Tensor z = encode(codec, x);
  Tensor::require_same_shape(z, target_latent, "loss_encoder");
  Tensor r = z - target_latent;
  return {squared_norm(r), codec.encode_vjp(x, r * 2.0), true};
}

/// Score-distillation direction Eᵀ·(ε_θ(z_t, t) − ε): the denoiser Jacobian
/// is taken as the identity. PGD applies it with a descent sign.
inline ObjectiveValue loss_sds_fixed(const Tensor& x, const Pipeline& p, int t, const Tensor& eps) {
  const Tensor z = encode(*p.codec, x);
  const Tensor zt = forward_noise(z, t, eps, p.schedule);
  const Guidance& g = p.stages.size() > 1 ? p.stages[1].guidance : Guidance{};
  Tensor r = g.eps(*p.denoiser, zt, t) - eps;
  const double v = squared_norm(r);
  return {v, p.codec->encode_vjp(x, r), false};
}

inline ObjectiveValue loss_sds_step(const Tensor& x, const Pipeline& p, Rng& rng) {
  const int t = sample_grid_timestep(p, rng);
  const Tensor eps = sample_gaussian(rng, p.codec->latent_shape());
  return loss_sds_fixed(x, p, t, eps);
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// δ ← clamp(δ, −ε, ε), then δ ← clamp(x0 + δ, 0, 1) − x0.
///
/// δ is left untouched when x0 + δ is already inside the box. Otherwise the
/// subtraction can round one ulp past a bound, so the result is nudged until
/// |δ| ≤ ε and x0 + δ ∈ [0,1] hold exactly in floating point.
inline void project(Tensor& delta, const Tensor& x0, double eps) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double v = std::clamp(delta[i], -eps, eps);
    if (x0[i] + v > 1.0) v = std::max(1.0 - x0[i], -eps);
    if (x0[i] + v < 0.0) v = std::min(-x0[i], eps);
    while (x0[i] + v > 1.0) v = std::nextafter(v, -1.0);
    while (x0[i] + v < 0.0) v = std::nextafter(v, 1.0);
    delta[i] = v;
  }
}

/// Sign-gradient PGD in the L∞ ball around x0, intersected with [0,1].
/// `on_iterate` (optional) sees δ after every projection.
inline AttackResult pgd_maximize(const Tensor& x0, const ObjectiveFn& objective, const AttackConfig& cfg, Rng& rng,
                                 const std::function<void(int, const Tensor&)>& on_iterate = {}) {
  validate(cfg);
  for (double v : x0)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pgd_maximize: input must lie in [0,1]");
  AttackResult res;
  res.delta = Tensor::zeros_like(x0);
  if (cfg.random_start) {
    for (auto& d : res.delta) d = rng.uniform(-cfg.epsilon, cfg.epsilon);
    project(res.delta, x0, cfg.epsilon);
  }
  for (int it = 0; it < cfg.iterations; ++it) {
    const ObjectiveValue ov = objective(x0 + res.delta, rng);
    if (!std::isfinite(ov.value) || !all_finite(ov.grad))
      throw std::runtime_error("pgd: non-finite objective or gradient at iteration " + std::to_string(it));
    res.loss_curve.push_back(ov.value);
    const double dir = ov.ascent ? 1.0 : -1.0;
    for (std::size_t i = 0; i < res.delta.size(); ++i) res.delta[i] += dir * cfg.step_size * sign(ov.grad[i]);
    project(res.delta, x0, cfg.epsilon);
    if (on_iterate) on_iterate(it, res.delta);
  }
  res.final_loss = objective(x0 + res.delta, rng).value;
  res.immunized = clamp(x0 + res.delta, 0.0, 1.0);
  return res;
}

/// Random ±ε perturbation (then clamped to the valid range).
inline AttackResult random_noise_control(const Tensor& x0, const AttackConfig& cfg, Rng& rng) {
  validate(cfg);
  AttackResult res;
  res.delta = Tensor(x0.shape());
  for (auto& d : res.delta) d = rng.coin() ? cfg.epsilon : -cfg.epsilon;
  project(res.delta, x0, cfg.epsilon);
  res.loss_curve.assign(static_cast<std::size_t>(cfg.iterations), 0.0);
  res.immunized = clamp(x0 + res.delta, 0.0, 1.0);
  return res;
}

/// Binds an objective to the context; the encoder attack anchors at x0.
inline ObjectiveFn make_objective(Objective o, const AttackContext& ctx, const Tensor& x0, int traj_steps,
                                  GradMode mode = GradMode::decomposed) {
  switch (o) {
    case Objective::dia_pt: {
      auto p = attack_inversion_pipeline(ctx, traj_steps);
      return [p, mode](const Tensor& x, Rng&) { return loss_dia_pt(x, p, mode); };
    }
    case Objective::dia_mt: {
      auto p = attack_inversion_pipeline(ctx, traj_steps);
      return [p, mode](const Tensor& x, Rng&) { return loss_dia_mt(x, p, mode); };
    }
    case Objective::dia_r: {
      auto p = attack_roundtrip_pipeline(ctx, traj_steps);
      return [p, mode](const Tensor& x, Rng&) { return loss_dia_r(x, p, mode); };
    }
    case Objective::adv_dm: {
      auto p = attack_inversion_pipeline(ctx, traj_steps);
      return [p](const Tensor& x, Rng& rng) { return loss_adv_dm(x, p, rng); };
    }
    case Objective::sds: {
      auto p = attack_inversion_pipeline(ctx, traj_steps);
      return [p](const Tensor& x, Rng& rng) { return loss_sds_step(x, p, rng); };
    }
    case Objective::encoder: {
      const Tensor target = encode(*ctx.codec, x0);
      auto codec = ctx.codec;
      return [codec, target](const Tensor& x, Rng&) { return loss_encoder(x, target, *codec); };
    }
    case Objective::random: break;
  }
  throw std::invalid_argument("make_objective: '" + objective_name(o) + "' has no differentiable objective");
}

inline AttackResult run_attack(const Tensor& x0, const AttackConfig& cfg, const AttackContext& ctx,
                               const std::function<void(int, const Tensor&)>& on_iterate = {}) {
  validate(cfg);
  Rng rng = Rng(cfg.seed).split(objective_name(cfg.objective));
  if (cfg.objective == Objective::random) return random_noise_control(x0, cfg, rng);
  return pgd_maximize(x0, make_objective(cfg.objective, ctx, x0, cfg.traj_steps, cfg.grad_mode), cfg, rng, on_iterate);
}

}  // namespace dia
