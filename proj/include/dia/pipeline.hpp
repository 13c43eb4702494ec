// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dia/codec.hpp"
#include "dia/ddim.hpp"
#include "dia/denoiser.hpp"
#include "dia/schedule.hpp"
#include "dia/tensor.hpp"

namespace dia {

enum class StageKind { encode, invert, sample, decode };

inline const char* stage_name(StageKind k) {
  switch (k) {
    case StageKind::encode: return "encode";
    case StageKind::invert: return "invert";
    case StageKind::sample: return "sample";
    case StageKind::decode: return "decode";
  }
  return "?";
}

struct Stage {
  StageKind kind = StageKind::encode;
  int t_from = 0;
  int t_to = 0;
  Guidance guidance;
};

/// A chain of differentiable stages: codec hops and single DDIM moves.
/// The intermediate values between stages are the trajectory points h_t.
struct Pipeline {
  CodecPtr codec;
  DenoiserPtr denoiser;
  NoiseSchedule schedule;
  TimestepGrid grid;
  InversionQuery query = InversionQuery::source;
  std::vector<Stage> stages;

  Pipeline slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > stages.size()) throw std::out_of_range("Pipeline::slice: bad range");
    Pipeline p = *this;
    p.stages.assign(stages.begin() + static_cast<std::ptrdiff_t>(begin), stages.begin() + static_cast<std::ptrdiff_t>(end));
    return p;
  }

  bool has(StageKind k) const {
    for (const auto& s : stages)
      if (s.kind == k) return true;
    return false;
  }

  std::size_t count(StageKind k) const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.kind == k;
    return n;
  }
};

inline void append_inversion(Pipeline& p, const Guidance& g) {
  for (int k = 0; k < p.grid.steps(); ++k)
    p.stages.push_back({StageKind::invert, p.grid.taus[static_cast<std::size_t>(k)],
                        p.grid.taus[static_cast<std::size_t>(k) + 1], g});
}

inline void append_sampling(Pipeline& p, const Guidance& g) {
  for (int k = p.grid.steps(); k > 0; --k)
    p.stages.push_back({StageKind::sample, p.grid.taus[static_cast<std::size_t>(k)],
                        p.grid.taus[static_cast<std::size_t>(k) - 1], g});
}

/// encode → S inversion moves.
inline Pipeline make_inversion_pipeline(CodecPtr codec, DenoiserPtr denoiser, NoiseSchedule schedule, TimestepGrid grid,
                                        Guidance g, InversionQuery query = InversionQuery::source) {
  validate_grid(grid, schedule);
  Pipeline p{std::move(codec), std::move(denoiser), std::move(schedule), std::move(grid), query, {}};
  p.stages.push_back({StageKind::encode, 0, 0, {}});
  append_inversion(p, g);
  return p;
}

/// encode → S inversion moves → S sampling moves → decode.
inline Pipeline make_roundtrip_pipeline(CodecPtr codec, DenoiserPtr denoiser, NoiseSchedule schedule,
                                        TimestepGrid grid, Guidance invert_g, Guidance sample_g,
                                        InversionQuery query = InversionQuery::source) {
  Pipeline p = make_inversion_pipeline(std::move(codec), std::move(denoiser), std::move(schedule), std::move(grid),
                                       invert_g, query);
  append_sampling(p, sample_g);
  p.stages.push_back({StageKind::decode, 0, 0, {}});
  return p;
}

/// Checks that stage shapes chain from an input of `input_shape`.
inline void validate_pipeline(const Pipeline& p, const Shape& input_shape) {
  if (p.stages.empty()) throw std::invalid_argument("pipeline: empty plan");
  if (!p.codec || !p.denoiser) throw std::invalid_argument("pipeline: missing codec or denoiser");
  const Shape image = p.codec->image_shape(), latent = p.codec->latent_shape();
  if (shape_numel(latent) != p.denoiser->latent_dim())
    throw std::invalid_argument("pipeline: codec latent size " + std::to_string(shape_numel(latent)) +
                                " does not match denoiser latent size " + std::to_string(p.denoiser->latent_dim()));
  Shape cur = input_shape;
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    const auto& st = p.stages[i];
    const bool from_image = st.kind == StageKind::encode;
    const Shape& need = from_image ? image : latent;
    if (cur != need)
      throw std::invalid_argument("pipeline: stage " + std::to_string(i) + " (" + stage_name(st.kind) +
                                  ") expects input " + shape_str(need) + ", got " + shape_str(cur));
    if (st.kind == StageKind::invert || st.kind == StageKind::sample) {
      p.schedule.check_t(st.t_from);
      p.schedule.check_t(st.t_to);
      if ((st.kind == StageKind::invert) != (st.t_to > st.t_from))
        throw std::invalid_argument("pipeline: stage " + std::to_string(i) + " moves the wrong way in time");
      p.denoiser->check_condition(st.guidance.cond);
    }
    cur = st.kind == StageKind::decode ? image : latent;
  }
}

namespace detail {

// Guided ε with its tapes. Null condition or w = 0 → unconditional only;
// w = 1 → conditional only; otherwise the blend (1−w)·ε_u + w·ε_c.
struct GuidedTapes {
  DenoiserTape uncond, cond;
  bool use_uncond = false, use_cond = false;
  double w = 1.0;
};

inline Tensor guided_record(const Denoiser& d, const Guidance& g, const Tensor& z, int t, GuidedTapes& tapes) {
  if (!(g.scale >= 0.0)) throw std::invalid_argument("guidance scale must be >= 0");
  tapes.w = g.scale;
  tapes.use_uncond = g.cond.is_null() || g.scale != 1.0;
  tapes.use_cond = !g.cond.is_null() && g.scale != 0.0;
  d.check_latent(z);
  d.check_condition(g.cond);
  if (tapes.use_uncond && !tapes.use_cond) return d.record(z, t, Condition::none(), tapes.uncond);
  if (tapes.use_cond && !tapes.use_uncond) return d.record(z, t, g.cond, tapes.cond);
  Tensor eu = d.record(z, t, Condition::none(), tapes.uncond);
  Tensor ec = d.record(z, t, g.cond, tapes.cond);
  return lincomb(1.0 - g.scale, eu, g.scale, ec);
}

inline Tensor guided_vjp(const Denoiser& d, const GuidedTapes& tapes, const Tensor& cot) {
  if (tapes.use_uncond && !tapes.use_cond) return d.vjp_from(tapes.uncond, cot);
  if (tapes.use_cond && !tapes.use_uncond) return d.vjp_from(tapes.cond, cot);
  return lincomb(1.0 - tapes.w, d.vjp_from(tapes.uncond, cot), tapes.w, d.vjp_from(tapes.cond, cot));
}

inline int query_t(const Pipeline& p, const Stage& st) {
  return st.kind == StageKind::invert ? inversion_query_t(st.t_from, st.t_to, p.query) : st.t_from;
}

}  // namespace detail

/// Activations a stage keeps for a later VJP (only used when not recomputing).
struct StageRecord {
  detail::GuidedTapes tapes;
};

inline Tensor stage_forward(const Pipeline& p, const Stage& st, const Tensor& h, StageRecord* rec = nullptr) {
  switch (st.kind) {
    case StageKind::encode: return encode(*p.codec, h);
    case StageKind::decode: return decode(*p.codec, h);
    case StageKind::invert:
    case StageKind::sample: {
      detail::GuidedTapes local;
      auto& tapes = rec ? rec->tapes : local;
      Tensor eps = detail::guided_record(*p.denoiser, st.guidance, h, detail::query_t(p, st), tapes);
      if (st.kind == StageKind::invert) return ddim_invert_step(h, st.t_from, st.t_to, eps, p.schedule).next;
      return ddim_sample_step(h, st.t_from, st.t_to, eps, p.schedule);
    }
  }
  throw std::logic_error("stage_forward: unknown stage");
}

/// Jᵀ·cot for one stage at input h. Without a record the denoiser is
/// re-evaluated at h and its activations are dropped on return.
inline Tensor stage_vjp(const Pipeline& p, const Stage& st, const Tensor& h, const Tensor& cot,
                        const StageRecord* rec = nullptr) {
  switch (st.kind) {
    case StageKind::encode: return p.codec->encode_vjp(h, cot);
    case StageKind::decode: return p.codec->decode_vjp(h, cot);
    case StageKind::invert:
    case StageKind::sample: {
      const auto [scale, gain] = ddim_coeffs(st.t_from, st.t_to, p.schedule);
      Tensor eps_cot = cot * gain;
      Tensor through_eps;
      if (rec) {
        through_eps = detail::guided_vjp(*p.denoiser, rec->tapes, eps_cot);
      } else {
        detail::GuidedTapes tapes;
        (void)detail::guided_record(*p.denoiser, st.guidance, h, detail::query_t(p, st), tapes);
        through_eps = detail::guided_vjp(*p.denoiser, tapes, eps_cot);
      }
      through_eps.axpy(scale, cot);
      return through_eps;
    }
  }
  throw std::logic_error("stage_vjp: unknown stage");
}

inline Tensor run_pipeline(const Pipeline& p, const Tensor& x) {
  validate_pipeline(p, x.shape());
  Tensor h = x;
  for (const auto& st : p.stages) h = stage_forward(p, st, h);
  return h;
}

/// All intermediate points h_0 (input) .. h_n (terminal).
inline std::vector<Tensor> pipeline_states(const Pipeline& p, const Tensor& x) {
  validate_pipeline(p, x.shape());
  std::vector<Tensor> hs{x};
  for (const auto& st : p.stages) hs.push_back(stage_forward(p, st, hs.back()));
  return hs;
}

struct LossValue {
  double value = 0.0;
  Tensor cotangent;  // ∂loss/∂terminal
};

/// Scalar loss on the terminal value; `aux` carries detached references.
using TerminalLoss = std::function<LossValue(const Tensor& terminal, const Tensor& aux)>;

enum class GradMode {
  decomposed,  // store stage inputs only, recompute each stage on the way back
  naive        // keep every stage's activations from the forward pass
};

struct GradReport {
  Tensor grad;
  double loss = 0.0;
  Tensor terminal;
  std::int64_t peak_live_tensors = 0;  // excluding stored stage inputs
  std::int64_t peak_live_scalars = 0;  // excluding stored stage inputs
  std::int64_t stored_scalars = 0;     // total size of the stored stage inputs
};

namespace detail {

// RAII pin: excludes a stored tensor from the intra-stage high-water mark.
class Pinned {
 public:
  explicit Pinned(Tensor t) : t_(std::move(t)) {
    auto& s = mem_stats();
    s.pinned_tensors += 1;
    s.pinned_scalars += static_cast<std::int64_t>(t_.size());
  }
  Pinned(Pinned&& o) noexcept : t_(std::move(o.t_)), live_(o.live_) { o.live_ = false; }
  Pinned& operator=(Pinned&&) = delete;
  Pinned(const Pinned&) = delete;
  ~Pinned() {
    if (!live_) return;
    auto& s = mem_stats();
    s.pinned_tensors -= 1;
    s.pinned_scalars -= static_cast<std::int64_t>(t_.size());
  }
  const Tensor& get() const { return t_; }

 private:
  Tensor t_;
  bool live_ = true;
};

inline void check_cotangent(const Tensor& cot, std::size_t stage, StageKind kind) {
  if (!all_finite(cot))
    throw std::runtime_error("non-finite cotangent after stage " + std::to_string(stage) + " (" + stage_name(kind) + ")");
}

}  // namespace detail

/// Gradient of loss(pipeline(x), aux) with respect to x by chained per-stage
/// VJPs, seeded with ∂loss/∂terminal.
///
/// In decomposed mode only the stage inputs are kept between the forward and
/// backward walks; each stage is re-evaluated locally when its VJP is needed.
inline GradReport trajectory_grad(const Pipeline& p, const TerminalLoss& loss, const Tensor& x, const Tensor& aux,
                                  GradMode mode = GradMode::decomposed) {
  validate_pipeline(p, x.shape());
  auto& ms = mem_stats();
  const MemStats outer = ms;
  const std::int64_t base_t = ms.live_tensors - ms.pinned_tensors;
  const std::int64_t base_s = ms.live_scalars - ms.pinned_scalars;
  ms.peak_tensors = base_t;
  ms.peak_scalars = base_s;

  GradReport rep;
  {
    const std::size_t n = p.stages.size();
    std::vector<detail::Pinned> inputs;
    std::vector<StageRecord> records;
    inputs.reserve(n + 1);
    if (mode == GradMode::naive) records.resize(n);

    inputs.emplace_back(x);
    for (std::size_t i = 0; i < n; ++i) {
      StageRecord* rec = mode == GradMode::naive ? &records[i] : nullptr;
      inputs.emplace_back(stage_forward(p, p.stages[i], inputs.back().get(), rec));
      rep.stored_scalars += static_cast<std::int64_t>(inputs.back().get().size());
    }
    rep.stored_scalars += static_cast<std::int64_t>(x.size());
    rep.terminal = inputs.back().get();

    LossValue lv = loss(inputs.back().get(), aux);
    if (!lv.cotangent.same_shape(inputs.back().get()))
      throw std::invalid_argument("trajectory_grad: loss cotangent shape " + shape_str(lv.cotangent.shape()) +
                                  " does not match terminal " + shape_str(inputs.back().get().shape()));
    rep.loss = lv.value;
    Tensor cot = std::move(lv.cotangent);
    detail::check_cotangent(cot, n, n ? p.stages.back().kind : StageKind::encode);

    for (std::size_t i = n; i-- > 0;) {
      inputs.pop_back();
      const StageRecord* rec = mode == GradMode::naive ? &records[i] : nullptr;
      cot = stage_vjp(p, p.stages[i], inputs.back().get(), cot, rec);
      if (mode == GradMode::naive) records.pop_back();
      detail::check_cotangent(cot, i, p.stages[i].kind);
    }
    rep.grad = std::move(cot);
  }
  if (ms.allocations == outer.allocations)
    throw std::runtime_error("trajectory_grad: allocation instrumentation recorded nothing");
  rep.peak_live_tensors = ms.peak_tensors - base_t;
  rep.peak_live_scalars = ms.peak_scalars - base_s;
  ms.peak_tensors = std::max(outer.peak_tensors, ms.peak_tensors);
  ms.peak_scalars = std::max(outer.peak_scalars, ms.peak_scalars);
  return rep;
}

/// Jᵀ·cotangent of the whole plan at x (no loss).
inline Tensor pullback(const Pipeline& p, const Tensor& x, const Tensor& cotangent,
                       GradMode mode = GradMode::decomposed) {
  auto seed = [&cotangent](const Tensor& terminal, const Tensor&) {
    return LossValue{dot(cotangent, terminal), cotangent};
  };
  return trajectory_grad(p, seed, x, Tensor::scalar(0.0), mode).grad;
}

struct MemoryProbe {
  std::int64_t peak_small = 0;  // intra-stage peak scalars at the short grid
  std::int64_t peak_large = 0;  // ... at the long grid
  std::int64_t stored_small = 0;
  std::int64_t stored_large = 0;
  double ratio() const { return static_cast<double>(peak_large) / static_cast<double>(std::max<std::int64_t>(peak_small, 1)); }
};

/// Intra-stage live-allocation peaks of trajectory_grad for pipelines built
/// at two trajectory lengths (stored stage inputs reported separately).
inline MemoryProbe memory_probe(const std::function<Pipeline(int steps)>& make, const TerminalLoss& loss,
                                const Tensor& x, const Tensor& aux, GradMode mode, int small_steps = 5,
                                int large_steps = 50) {
  MemoryProbe m;
  const auto a = trajectory_grad(make(small_steps), loss, x, aux, mode);
  const auto b = trajectory_grad(make(large_steps), loss, x, aux, mode);
  if (a.peak_live_scalars <= 0 || b.peak_live_scalars <= 0)
    throw std::runtime_error("memory_probe: instrumentation reported no live allocations");
  m.peak_small = a.peak_live_scalars;
  m.peak_large = b.peak_live_scalars;
  m.stored_small = a.stored_scalars;
  m.stored_large = b.stored_scalars;
  return m;
}

}  // namespace dia
