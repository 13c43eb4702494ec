// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "dia/attacks.hpp"
#include "dia/codec.hpp"
#include "dia/ddim.hpp"
#include "dia/denoiser.hpp"
#include "dia/diffop.hpp"
#include "dia/pipeline.hpp"
#include "dia/rng.hpp"

namespace dia {

/// Random affine codec with a well-conditioned encoder, for tests.
inline std::shared_ptr<LinearCodec> random_linear_codec(const Shape& image_shape, std::size_t latent, Rng& rng) {
  const auto n = shape_numel(image_shape);
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  return std::make_shared<LinearCodec>(image_shape, sample_gaussian(rng, {latent, n}) * s,
                                       sample_gaussian(rng, {latent}) * 0.1, sample_gaussian(rng, {n, latent}) * s,
                                       sample_gaussian(rng, {n}) * 0.1);
}

/// Uniform image in [0.1, 0.9] so ±h probes stay inside [0,1].
inline Tensor random_image(Rng& rng, const Shape& shape) { return sample_uniform(rng, shape, 0.1, 0.9); }

enum class DiaLoss { pt, r, mt };

inline const char* dia_loss_name(DiaLoss l) {
  switch (l) {
    case DiaLoss::pt: return "dia_pt";
    case DiaLoss::r: return "dia_r";
    case DiaLoss::mt: return "dia_mt";
  }
  return "?";
}

/// Plan used by each DIA objective.
inline Pipeline dia_pipeline(DiaLoss l, CodecPtr codec, DenoiserPtr d, const NoiseSchedule& s, int steps,
                             const Guidance& g, InversionQuery q = InversionQuery::source) {
  const auto grid = leading_grid(s.T, steps);
  return l == DiaLoss::r ? make_roundtrip_pipeline(std::move(codec), std::move(d), s, grid, g, g, q)
                         : make_inversion_pipeline(std::move(codec), std::move(d), s, grid, g, q);
}

inline ObjectiveValue dia_objective(DiaLoss l, const Tensor& x, const Pipeline& p, GradMode mode = GradMode::decomposed) {
  switch (l) {
    case DiaLoss::pt: return loss_dia_pt(x, p, mode);
    case DiaLoss::r: return loss_dia_r(x, p, mode);
    case DiaLoss::mt: return loss_dia_mt(x, p, mode);
  }
  throw std::logic_error("dia_objective");
}

/// The detached subtrahend each DIA objective compares against, evaluated at x.
inline Tensor dia_anchor(DiaLoss l, const Tensor& x, const Pipeline& p) {
  switch (l) {
    case DiaLoss::pt: return encode(*p.codec, x);
    case DiaLoss::r: return x;
    case DiaLoss::mt: {
      int t_last = 0;
      for (const auto& st : p.stages)
        if (st.kind == StageKind::invert) t_last = st.t_to;
      return encode(*p.codec, x) * std::sqrt(p.schedule.abar(t_last));
    }
  }
  throw std::logic_error("dia_anchor");
}

/// max relative error between trajectory_grad and central differences of
/// the objective with its anchor frozen at x.
inline double dia_gradient_error(DiaLoss l, const Tensor& x, const Pipeline& p, double h = 1e-5) {
  const Tensor anchor = dia_anchor(l, x, p);
  const Tensor grad = dia_objective(l, x, p).grad;
  const Tensor fd = finite_difference_grad(
      [&](const Tensor& xp) { return squared_norm(run_pipeline(p, xp) - anchor); }, x, h);
  return max_rel_error(grad, fd);
}

struct SelftestCase {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

inline SelftestCase check_le(std::string name, double value, double limit) {
  return {std::move(name), value <= limit, "value=" + sci(value) + " limit=" + sci(limit)};
}

inline SelftestCase check_ge(std::string name, double value, double limit) {
  return {std::move(name), value >= limit, "value=" + sci(value) + " limit=" + sci(limit)};
}

}  // namespace detail

/// Identity, decomposition, gradient and memory checks on small seeded
/// models. Deterministic for a given seed.
inline std::vector<SelftestCase> run_selftest(std::uint64_t seed = 0) {
  std::vector<SelftestCase> out;
  const Rng root(seed);
  const auto s = default_schedule();
  const Shape img{8, 8};
  const auto grid = leading_grid(s.T, 10);

  {  // zero denoiser, identity codec: invert then sample returns the input
    Rng r = root.split("zero");
    const Tensor z = random_image(r, img);
    ZeroDenoiser zero(64);
    const auto inv = rollout_invert(z, grid, s, zero, {});
    const auto back = rollout_sample(inv.final_state(), grid, s, zero, {});
    out.push_back(detail::check_le("identity.zero_roundtrip", max_abs(back.final_state() - z), 1e-12));
  }
  {  // one inversion step then one sampling step with the same ε
    Rng r = root.split("shared");
    const Tensor z = sample_gaussian(r, {64}), eps = sample_gaussian(r, {64});
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < grid.taus.size(); ++k) {
      const auto step = ddim_invert_step(z, grid.taus[k], grid.taus[k + 1], eps, s);
      const Tensor back = ddim_sample_step(step.next, grid.taus[k + 1], grid.taus[k], eps, s);
      worst = std::max(worst, max_abs(back - z));
    }
    out.push_back(detail::check_le("identity.shared_eps_step", worst, 1e-12));
  }

  Rng mr = root.split("mlp");
  MlpConfig mc;
  mc.latent_dim = 64;
  mc.hidden = 32;
  const auto mlp = std::make_shared<MlpDenoiser>(MlpDenoiser::init(mc, mr, 1.0));
  const Guidance g{Condition::of(0), 1.0};

  {  // h_S = bias + MT and h_S = h_0 + PT
    Rng r = root.split("decomp");
    double worst = 0.0;
    for (int i = 0; i < 16; ++i) {
      const Tensor z = sample_gaussian(r, {64});
      const auto tr = rollout_invert(z, grid, s, *mlp, g);
      const auto dec = decompose_trajectory(tr, s);
      worst = std::max(worst, max_rel_error(dec.bias + dec.mt, tr.final_state()));
      worst = std::max(worst, max_rel_error(tr.states.front() + dec.pt, tr.final_state()));
    }
    out.push_back(detail::check_le("decomposition.bias_mt_pt", worst, 1e-10));
  }
  {
    Rng r = root.split("vjp");
    const Tensor z = sample_gaussian(r, {64});
    out.push_back(detail::check_le("vjp.mlp", vjp_selftest(denoiser_op(mlp, 500, Condition::of(1)), z, r), 1e-6));
    const auto codec = random_linear_codec(img, 16, r);
    const Tensor x = random_image(r, img);
    out.push_back(detail::check_le("vjp.linear_codec.encode", vjp_selftest(encode_op(codec), x, r), 1e-6));
    out.push_back(
        detail::check_le("vjp.linear_codec.decode", vjp_selftest(decode_op(codec), sample_gaussian(r, {16}), r), 1e-6));
  }

  {  // trajectory gradients against central differences, both codecs
    Rng r = root.split("grad");
    const auto id = std::make_shared<IdentityCodec>(img);
    Rng lr = root.split("grad-codec");
    const auto lin = random_linear_codec(img, 64, lr);
    for (DiaLoss l : {DiaLoss::pt, DiaLoss::r, DiaLoss::mt}) {
      for (const auto& [cname, codec] : {std::pair<std::string, CodecPtr>{"identity", id}, {"linear", lin}}) {
        const Tensor x = random_image(r, img);
        const auto p = dia_pipeline(l, codec, mlp, s, 10, g);
        out.push_back(detail::check_le(std::string("gradient.") + dia_loss_name(l) + "." + cname,
                                       dia_gradient_error(l, x, p), 1e-5));
      }
    }
    const Tensor x = random_image(r, img);
    const auto p = dia_pipeline(DiaLoss::r, id, mlp, s, 10, g);
    const Tensor a = loss_dia_r(x, p, GradMode::decomposed).grad, b = loss_dia_r(x, p, GradMode::naive).grad;
    out.push_back(detail::check_le("gradient.naive_equals_decomposed", max_abs(a - b), 0.0));
  }

  {  // intra-stage peak versus trajectory length
    Rng r = root.split("memory");
    const Tensor x = random_image(r, img);
    const auto id = std::make_shared<IdentityCodec>(img);
    auto make = [&](int steps) { return dia_pipeline(DiaLoss::pt, id, mlp, s, steps, g); };
    auto loss = [](const Tensor& t, const Tensor& a) { return detail::squared_distance(t, a); };
    const auto dec = memory_probe(make, loss, x, x, GradMode::decomposed);
    const auto naive = memory_probe(make, loss, x, x, GradMode::naive);
    out.push_back(detail::check_le("memory.decomposed_growth", dec.ratio(), 1.5));
    out.push_back(detail::check_ge("memory.naive_growth", naive.ratio(), 5.0));
  }

  {  // PGD box constraints on a short DIA-PT run
    Rng r = root.split("pgd");
    const Tensor x0 = sample_uniform(r, img, 0.0, 1.0);
    AttackContext ctx{std::make_shared<IdentityCodec>(img), mlp, s, g, InversionQuery::source};
    AttackConfig cfg;
    cfg.iterations = 5;
    cfg.traj_steps = 5;
    double worst = 0.0;
    run_attack(x0, cfg, ctx, [&](int, const Tensor& d) {
      double v = max_abs(d) - cfg.epsilon;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double xi = x0[i] + d[i];
        v = std::max(v, std::max(-xi, xi - 1.0));
      }
      worst = std::max(worst, v);
    });
    out.push_back(detail::check_le("pgd.box_violation", std::max(worst, 0.0), 1e-15));
  }
  return out;
}

/// Prints one PASS/FAIL line per case; returns true when all pass.
inline bool print_selftest(const std::vector<SelftestCase>& cases, std::ostream& os) {
  bool ok = true;
  for (const auto& c : cases) {
    os << (c.passed ? "PASS " : "FAIL ") << c.name << ' ' << c.detail << '\n';
    ok = ok && c.passed;
  }
  os << (ok ? "selftest: all passed" : "selftest: FAILED") << '\n';
  return ok;
}

}  // namespace dia
