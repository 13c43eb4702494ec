// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dia/codec.hpp"
#include "dia/dataset.hpp"
#include "dia/denoiser.hpp"
#include "dia/rng.hpp"
#include "dia/schedule.hpp"

namespace dia {

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double momentum = 0.9;
  double cond_drop = 0.1;      // probability of training a sample as unconditional
  int heldout_draws = 4;       // (t, ε) draws per held-out image
  int curve_draws = 2;         // fixed (t, ε) draws per training image for the loss curve
  MlpConfig model;
};

struct TrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> epoch_losses;  // training-set loss on fixed draws, after each epoch
  std::vector<double> sgd_losses;    // mean minibatch loss seen during each epoch
};

struct NoisedExample {
  Tensor latent;
  int t;
  Tensor eps;
  Condition cond;
};

/// Fixed (t, ε) draws over a set of latents, for reproducible loss estimates.
inline std::vector<NoisedExample> draw_noised(const std::vector<Tensor>& latents, const std::vector<Condition>& conds,
                                              const NoiseSchedule& s, int draws, Rng rng) {
  std::vector<NoisedExample> out;
  for (std::size_t i = 0; i < latents.size(); ++i)
    for (int k = 0; k < draws; ++k) {
      const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
      out.push_back({latents[i], t, sample_gaussian(rng, latents[i].shape()), conds[i]});
    }
  return out;
}

/// Mean of ‖ε − ε_θ(z_t, c, t)‖² over the given draws.
inline double diffusion_loss(const Denoiser& d, const std::vector<NoisedExample>& ex, const NoiseSchedule& s) {
  double total = 0.0;
  for (const auto& e : ex) {
    const Tensor zt = forward_noise(e.latent, e.t, e.eps, s);
    total += squared_norm(e.eps - predict_eps(d, zt, e.t, e.cond));
  }
  return total / static_cast<double>(ex.size());
}

namespace detail {

struct Momentum {
  std::vector<Tensor> vel;

  void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, double lr, double mu) {
    if (vel.empty())
      for (auto* p : params) vel.push_back(Tensor::zeros_like(*p));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& v = vel[i];
      const auto& g = *grads[i];
      auto& p = *params[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = mu * v[j] - lr * g[j];
        p[j] += v[j];
      }
    }
  }
};

}  // namespace detail

/// Trains an MLP ε-predictor on the diffusion objective with SGD + momentum.
/// Latents are codec.encode(image). Deterministic given `seed`.
inline MlpDenoiser train_denoiser(const std::vector<Sample>& train, const std::vector<Sample>& heldout,
                                  const Codec& codec, const NoiseSchedule& s, const TrainConfig& cfg,
                                  std::uint64_t seed, TrainReport* report = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  const Shape img_shape = train.front().image.shape();
  for (const auto& x : train)
    if (x.image.shape() != img_shape) throw std::invalid_argument("train_denoiser: images differ in shape");

  const Rng root(seed);
  Rng init_rng = root.split("init");
  MlpConfig mcfg = cfg.model;
  mcfg.latent_dim = shape_numel(codec.latent_shape());
  MlpDenoiser model = MlpDenoiser::init(mcfg, init_rng);

  std::vector<Tensor> latents;
  std::vector<Condition> conds;
  for (const auto& x : train) {
    latents.push_back(encode(codec, x.image));
    conds.push_back(x.cond);
  }
  std::vector<Tensor> ho_latents;
  std::vector<Condition> ho_conds;
  for (const auto& x : heldout.empty() ? train : heldout) {
    ho_latents.push_back(encode(codec, x.image));
    ho_conds.push_back(x.cond);
  }
  const auto ho = draw_noised(ho_latents, ho_conds, s, cfg.heldout_draws, root.split("heldout"));
  // fixed draws keep resampling noise out of the per-epoch curve
  const auto curve = draw_noised(latents, conds, s, cfg.curve_draws, root.split("curve"));

  TrainReport rep;
  rep.initial_heldout_loss = diffusion_loss(model, ho, s);

  std::vector<Tensor*> params;
  for (auto& l : model.layers()) {
    params.push_back(&l.W);
    params.push_back(&l.b);
  }
  params.push_back(&model.class_embed());
  detail::Momentum opt;

  std::vector<std::size_t> order(latents.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = root.split(static_cast<std::uint64_t>(epoch) + 1000);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.below(i)]);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      MlpGrads grads = model.zero_grads();
      for (std::size_t j = start; j < end; ++j) {
        const auto idx = order[j];
        const int t = static_cast<int>(erng.below(static_cast<std::uint64_t>(s.T)));
        const Tensor eps = sample_gaussian(erng, latents[idx].shape());
        const Condition c = erng.uniform() < cfg.cond_drop ? Condition::none() : conds[idx];
        const Tensor zt = forward_noise(latents[idx], t, eps, s);
        DenoiserTape tape;
        const Tensor out = model.record(zt, t, c, tape);
        Tensor resid = out - eps;
        const double l = squared_norm(resid);
        if (!std::isfinite(l))
          throw std::runtime_error("train_denoiser: loss diverged at epoch " + std::to_string(epoch));
        epoch_loss += l;
        model.accumulate_grads(tape, resid * (2.0 * inv_b), grads);
      }
      std::vector<const Tensor*> gp;
      for (std::size_t l = 0; l < grads.W.size(); ++l) {
        gp.push_back(&grads.W[l]);
        gp.push_back(&grads.b[l]);
      }
      gp.push_back(&grads.class_embed);
      opt.step(params, gp, cfg.lr, cfg.momentum);
    }
    rep.sgd_losses.push_back(epoch_loss / static_cast<double>(order.size()));
    rep.epoch_losses.push_back(diffusion_loss(model, curve, s));
  }
  rep.final_heldout_loss = diffusion_loss(model, ho, s);
  if (!std::isfinite(rep.final_heldout_loss))
    throw std::runtime_error("train_denoiser: held-out loss diverged after epoch " + std::to_string(cfg.epochs - 1));
  if (report) *report = std::move(rep);
  return model;
}

struct CodecTrainConfig {
  std::size_t latent_dim = 32;
  int iterations = 3000;
  double lr = 0.3;
  double momentum = 0.9;
};

/// Fits an affine autoencoder by full-batch gradient descent with momentum
/// on the mean squared pixel reconstruction error.
inline LinearCodec train_linear_codec(const std::vector<Sample>& data, const CodecTrainConfig& cfg, std::uint64_t seed,
                                      double* final_mse = nullptr) {
  if (data.empty()) throw std::invalid_argument("train_linear_codec: empty dataset");
  const Shape img_shape = data.front().image.shape();
  const std::size_t n = shape_numel(img_shape), k = cfg.latent_dim;
  Rng rng(seed);
  const double lim = std::sqrt(3.0 / static_cast<double>(n));
  Tensor E = sample_uniform(rng, {k, n}, -lim, lim), e = Tensor::zeros({k});
  Tensor D = sample_uniform(rng, {n, k}, -lim, lim), d = Tensor::zeros({n});

  // centre the data so the bias terms carry the mean
  Tensor mean = Tensor::zeros({n});
  for (const auto& s : data)
    for (std::size_t i = 0; i < n; ++i) mean[i] += s.image[i];
  mean *= 1.0 / static_cast<double>(data.size());
  d = mean;

  std::vector<Tensor*> params{&E, &e, &D, &d};
  detail::Momentum opt;
  const double scale = 2.0 / static_cast<double>(data.size() * n);
  double mse = 0.0;
  for (int it = 0; it < cfg.iterations; ++it) {
    Tensor gE = Tensor::zeros_like(E), ge = Tensor::zeros_like(e), gD = Tensor::zeros_like(D), gd = Tensor::zeros_like(d);
    double sse = 0.0;
    for (const auto& s : data) {
      Tensor z({k});
      for (std::size_t r = 0; r < k; ++r) {
        double acc = e[r];
        for (std::size_t c = 0; c < n; ++c) acc += E[r * n + c] * s.image[c];
        z[r] = acc;
      }
      Tensor resid({n});
      for (std::size_t r = 0; r < n; ++r) {
        double acc = d[r];
        for (std::size_t c = 0; c < k; ++c) acc += D[r * k + c] * z[c];
        resid[r] = acc - s.image[r];
        sse += resid[r] * resid[r];
      }
      Tensor gz = Tensor::zeros({k});
      for (std::size_t r = 0; r < n; ++r) {
        const double g = scale * resid[r];
        gd[r] += g;
        for (std::size_t c = 0; c < k; ++c) {
          gD[r * k + c] += g * z[c];
          gz[c] += g * D[r * k + c];
        }
      }
      for (std::size_t r = 0; r < k; ++r) {
        ge[r] += gz[r];
        for (std::size_t c = 0; c < n; ++c) gE[r * n + c] += gz[r] * s.image[c];
      }
    }
    mse = sse / static_cast<double>(data.size() * n);
    if (!std::isfinite(mse)) throw std::runtime_error("train_linear_codec: diverged at iteration " + std::to_string(it));
    opt.step(params, {&gE, &ge, &gD, &gd}, cfg.lr, cfg.momentum);
  }
  LinearCodec codec(img_shape, std::move(E), std::move(e), std::move(D), std::move(d));
  if (final_mse) {
    double sse = 0.0;
    for (const auto& s : data) sse += squared_norm(codec.decode(codec.encode(s.image)) - s.image);
    *final_mse = sse / static_cast<double>(data.size() * n);
  }
  return codec;
}

}  // namespace dia
