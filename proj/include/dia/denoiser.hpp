// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dia/diffop.hpp"
#include "dia/rng.hpp"
#include "dia/tensor.hpp"

namespace dia {

/// Class label fed to the denoiser; an empty class_id means unconditional.
struct Condition {
  std::optional<int> class_id;

  static Condition none() { return {}; }
  static Condition of(int id) { return {id}; }
  bool is_null() const { return !class_id.has_value(); }
  bool operator==(const Condition&) const = default;
};

/// Saved activations from one denoiser evaluation, enough to run its VJP
/// without recomputing the forward pass.
struct DenoiserTape {
  int t = 0;
  Condition cond;
  std::vector<Tensor> acts;
};

/// ε_θ(z, t, c). Implementations are immutable after construction and safe to
/// evaluate concurrently.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual std::string kind() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual int num_classes() const = 0;

  /// Forward pass on a flat latent, recording what vjp_from needs.
  virtual Tensor record(const Tensor& z, int t, const Condition& c, DenoiserTape& tape) const = 0;
  /// Jᵀ·cotangent with respect to the latent input only.
  virtual Tensor vjp_from(const DenoiserTape& tape, const Tensor& cotangent) const = 0;

  virtual Tensor forward(const Tensor& z, int t, const Condition& c) const {
    DenoiserTape tape;
    return record(z, t, c, tape);
  }

  /// Recompute-then-pull-back; intermediate activations die with the call.
  Tensor vjp(const Tensor& z, int t, const Condition& c, const Tensor& cotangent) const {
    DenoiserTape tape;
    (void)record(z, t, c, tape);
    return vjp_from(tape, cotangent);
  }

  void check_condition(const Condition& c) const {
    if (c.class_id && (*c.class_id < 0 || *c.class_id >= num_classes()))
      throw std::out_of_range("unknown class_id " + std::to_string(*c.class_id) + " (model has " +
                              std::to_string(num_classes()) + " classes)");
  }

  void check_latent(const Tensor& z) const {
    if (z.size() != latent_dim())
      throw std::invalid_argument(kind() + " denoiser: latent of " + std::to_string(z.size()) + " values, expected " +
                                  std::to_string(latent_dim()));
  }
};

using DenoiserPtr = std::shared_ptr<const Denoiser>;

inline Tensor predict_eps(const Denoiser& d, const Tensor& z, int t, const Condition& c) {
  d.check_latent(z);
  d.check_condition(c);
  Tensor eps = d.forward(z, t, c);
  if (!all_finite(eps)) throw std::runtime_error(d.kind() + " denoiser produced non-finite output at t=" + std::to_string(t));
  return eps;
}

/// Classifier-free guidance: ε_u + w·(ε_c − ε_u). w = 1 and w = 0 return the
/// conditional and unconditional predictions unchanged.
inline Tensor cfg_predict(const Denoiser& d, const Tensor& z, int t, const Condition& c, double w) {
  if (!(w >= 0.0)) throw std::invalid_argument("cfg_predict: guidance scale must be >= 0");
  if (c.is_null() && w != 0.0) throw std::invalid_argument("cfg_predict: null condition requires guidance 0");
  if (w == 0.0) return predict_eps(d, z, t, Condition::none());
  if (w == 1.0) return predict_eps(d, z, t, c);
  Tensor eu = predict_eps(d, z, t, Condition::none());
  Tensor ec = predict_eps(d, z, t, c);
  return lincomb(1.0 - w, eu, w, ec);
}

/// ε_θ ≡ 0.
class ZeroDenoiser final : public Denoiser {
 public:
  explicit ZeroDenoiser(std::size_t dim, int classes = 2) : dim_(dim), classes_(classes) {}

  std::string kind() const override { return "zero"; }
  std::size_t latent_dim() const override { return dim_; }
  int num_classes() const override { return classes_; }

  Tensor record(const Tensor& z, int t, const Condition& c, DenoiserTape& tape) const override {
    tape.t = t;
    tape.cond = c;
    return Tensor::zeros_like(z);
  }
  Tensor vjp_from(const DenoiserTape&, const Tensor& cotangent) const override {
    return Tensor::zeros_like(cotangent);
  }

 private:
  std::size_t dim_;
  int classes_;
};

/// ε_θ(z, t, c) = g(t)·W_c·z + b with g(t) = 1 + time_gain·t/1000.
///
/// W_c is the per-class matrix when one is configured for class c, otherwise
/// the shared matrix (always used for the null condition).
class LinearDenoiser final : public Denoiser {
 public:
  LinearDenoiser(Tensor W, Tensor b, double time_gain = 0.0, std::vector<Tensor> class_W = {}, int classes = 2)
      : W_(std::move(W)), b_(std::move(b)), time_gain_(time_gain), class_W_(std::move(class_W)), classes_(classes) {
    const auto& s = W_.shape();
    if (s.size() != 2 || s[0] != s[1]) throw std::invalid_argument("LinearDenoiser: W must be square");
    if (b_.size() != s[0]) throw std::invalid_argument("LinearDenoiser: bias length mismatch");
    for (const auto& m : class_W_)
      if (m.shape() != s) throw std::invalid_argument("LinearDenoiser: class matrix shape mismatch");
    if (!class_W_.empty() && static_cast<int>(class_W_.size()) != classes_)
      throw std::invalid_argument("LinearDenoiser: need one class matrix per class");
  }

  static LinearDenoiser scaled_identity(std::size_t dim, double c, double time_gain = 0.0) {
    Tensor W({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) W[i * dim + i] = c;
    return LinearDenoiser(std::move(W), Tensor::zeros({dim}), time_gain);
  }

  std::string kind() const override { return "linear"; }
  std::size_t latent_dim() const override { return b_.size(); }
  int num_classes() const override { return classes_; }

  double gain(int t) const { return 1.0 + time_gain_ * static_cast<double>(t) / 1000.0; }

  const Tensor& matrix(const Condition& c) const {
    if (c.class_id && !class_W_.empty()) return class_W_.at(static_cast<std::size_t>(*c.class_id));
    return W_;
  }
  const Tensor& bias() const { return b_; }

  Tensor record(const Tensor& z, int t, const Condition& c, DenoiserTape& tape) const override {
    tape.t = t;
    tape.cond = c;
    const auto n = latent_dim();
    const Tensor& M = matrix(c);
    const double g = gain(t);
    Tensor out(z.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += M[i * n + j] * z[j];
      out[i] = g * acc + b_[i];
    }
    return out;
  }

  Tensor vjp_from(const DenoiserTape& tape, const Tensor& cot) const override {
    const auto n = latent_dim();
    const Tensor& M = matrix(tape.cond);
    const double g = gain(tape.t);
    Tensor out(cot.shape());
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += M[i * n + j] * cot[i];
      out[j] = g * acc;
    }
    return out;
  }

 private:
  Tensor W_;
  Tensor b_;
  double time_gain_;
  std::vector<Tensor> class_W_;
  int classes_;
};

struct MlpConfig {
  std::size_t latent_dim = 64;
  std::size_t hidden = 128;
  std::size_t depth = 2;
  std::size_t time_dim = 16;
  std::size_t class_dim = 8;
  int num_classes = 2;

  std::size_t input_dim() const { return latent_dim + time_dim + class_dim; }
  bool operator==(const MlpConfig&) const = default;
};

/// Sinusoidal embedding [sin(t·f_0..f_{h-1}), cos(t·f_0..f_{h-1})], f_i = 10000^(−i/h).
inline void timestep_embedding(int t, std::span<double> out) {
  const std::size_t half = out.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(t) * f);
    out[half + i] = std::cos(static_cast<double>(t) * f);
  }
}

struct AffineLayer {
  Tensor W;  // out x in
  Tensor b;  // out

  std::size_t in() const { return W.shape()[1]; }
  std::size_t out() const { return W.shape()[0]; }

  void apply(std::span<const double> x, std::span<double> y) const {
    const auto ni = in(), no = out();
    for (std::size_t o = 0; o < no; ++o) {
      const double* row = W.begin() + o * ni;
      double acc = b[o];
      for (std::size_t i = 0; i < ni; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
  }

  /// gx = Wᵀ·gy
  void pullback(std::span<const double> gy, std::span<double> gx) const {
    const auto ni = in(), no = out();
    std::fill(gx.begin(), gx.end(), 0.0);
    for (std::size_t o = 0; o < no; ++o) {
      const double* row = W.begin() + o * ni;
      const double g = gy[o];
      for (std::size_t i = 0; i < ni; ++i) gx[i] += row[i] * g;
    }
  }
};

/// Parameter gradients of an MlpDenoiser, laid out like its parameters.
struct MlpGrads {
  std::vector<Tensor> W, b;
  Tensor class_embed;
};

/// Affine+tanh stack over [z, timestep embedding, class embedding].
///
/// The class embedding table has num_classes + 1 rows; the last row is the
/// learned null (unconditional) embedding.
class MlpDenoiser final : public Denoiser {
 public:
  MlpDenoiser(MlpConfig cfg, std::vector<AffineLayer> layers, Tensor class_embed)
      : cfg_(cfg), layers_(std::move(layers)), class_embed_(std::move(class_embed)) {
    if (layers_.size() != cfg_.depth + 1) throw std::invalid_argument("MlpDenoiser: layer count mismatch");
    std::size_t prev = cfg_.input_dim();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::size_t want_out = l + 1 == layers_.size() ? cfg_.latent_dim : cfg_.hidden;
      if (layers_[l].in() != prev || layers_[l].out() != want_out || layers_[l].b.size() != want_out)
        throw std::invalid_argument("MlpDenoiser: layer " + std::to_string(l) + " has wrong dimensions");
      prev = want_out;
    }
    if (class_embed_.shape() != Shape{static_cast<std::size_t>(cfg_.num_classes) + 1, cfg_.class_dim})
      throw std::invalid_argument("MlpDenoiser: class embedding table has wrong shape");
  }

  /// Glorot-uniform hidden layers; the output layer is scaled by `out_scale`
  /// so a fresh model predicts ε ≈ 0.
  static MlpDenoiser init(const MlpConfig& cfg, Rng& rng, double out_scale = 0.01) {
    std::vector<AffineLayer> layers;
    std::size_t prev = cfg.input_dim();
    for (std::size_t l = 0; l <= cfg.depth; ++l) {
      const bool last = l == cfg.depth;
      const std::size_t out = last ? cfg.latent_dim : cfg.hidden;
      const double lim = std::sqrt(6.0 / static_cast<double>(prev + out)) * (last ? out_scale : 1.0);
      layers.push_back({sample_uniform(rng, {out, prev}, -lim, lim), Tensor::zeros({out})});
      prev = out;
    }
    Tensor emb = sample_gaussian(rng, {static_cast<std::size_t>(cfg.num_classes) + 1, cfg.class_dim});
    return MlpDenoiser(cfg, std::move(layers), std::move(emb));
  }

  std::string kind() const override { return "mlp"; }
  std::size_t latent_dim() const override { return cfg_.latent_dim; }
  int num_classes() const override { return cfg_.num_classes; }

  const MlpConfig& config() const { return cfg_; }
  const std::vector<AffineLayer>& layers() const { return layers_; }
  std::vector<AffineLayer>& layers() { return layers_; }
  const Tensor& class_embed() const { return class_embed_; }
  Tensor& class_embed() { return class_embed_; }

  std::size_t class_row(const Condition& c) const {
    return c.class_id ? static_cast<std::size_t>(*c.class_id) : static_cast<std::size_t>(cfg_.num_classes);
  }

  // Tape layout: acts[0] = assembled input, acts[l] = tanh output of hidden layer l.
  Tensor record(const Tensor& z, int t, const Condition& c, DenoiserTape& tape) const override {
    tape.t = t;
    tape.cond = c;
    tape.acts.clear();
    tape.acts.reserve(layers_.size());

    Tensor in({cfg_.input_dim()});
    std::copy(z.begin(), z.end(), in.begin());
    timestep_embedding(t, in.values().subspan(cfg_.latent_dim, cfg_.time_dim));
    const auto row = class_row(c);
    std::copy_n(class_embed_.begin() + row * cfg_.class_dim, cfg_.class_dim,
                in.begin() + cfg_.latent_dim + cfg_.time_dim);
    tape.acts.push_back(std::move(in));

    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      Tensor h({layers_[l].out()});
      layers_[l].apply(tape.acts.back().values(), h.values());
      for (auto& v : h) v = std::tanh(v);
      tape.acts.push_back(std::move(h));
    }
    Tensor out(z.shape());
    layers_.back().apply(tape.acts.back().values(), out.values());
    return out;
  }

  Tensor vjp_from(const DenoiserTape& tape, const Tensor& cot) const override {
    Tensor g = backprop_hidden(tape, cot, nullptr);
    Tensor gz(cot.shape());
    std::copy_n(g.begin(), cfg_.latent_dim, gz.begin());
    return gz;
  }

  /// Full backward pass accumulating parameter gradients into `grads`.
  void accumulate_grads(const DenoiserTape& tape, const Tensor& cot, MlpGrads& grads) const {
    Tensor gin = backprop_hidden(tape, cot, &grads);
    const auto row = class_row(tape.cond);
    for (std::size_t k = 0; k < cfg_.class_dim; ++k)
      grads.class_embed[row * cfg_.class_dim + k] += gin[cfg_.latent_dim + cfg_.time_dim + k];
  }

  MlpGrads zero_grads() const {
    MlpGrads g;
    for (const auto& l : layers_) {
      g.W.push_back(Tensor::zeros_like(l.W));
      g.b.push_back(Tensor::zeros_like(l.b));
    }
    g.class_embed = Tensor::zeros_like(class_embed_);
    return g;
  }

 private:
  // Returns the gradient with respect to the assembled input vector.
  Tensor backprop_hidden(const DenoiserTape& tape, const Tensor& cot, MlpGrads* grads) const {
    if (tape.acts.size() != layers_.size()) throw std::logic_error("MlpDenoiser: tape does not match model depth");
    Tensor gy({cot.size()});
    std::copy(cot.begin(), cot.end(), gy.begin());
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      const Tensor& x = tape.acts[l];
      if (grads) {
        auto& gW = grads->W[l];
        auto& gb = grads->b[l];
        const auto ni = layer.in();
        for (std::size_t o = 0; o < layer.out(); ++o) {
          gb[o] += gy[o];
          double* row = gW.begin() + o * ni;
          for (std::size_t i = 0; i < ni; ++i) row[i] += gy[o] * x[i];
        }
      }
      Tensor gx({layer.in()});
      layer.pullback(gy.values(), gx.values());
      if (l > 0) {
        // x = tanh(a) for hidden activations
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - x[i] * x[i];
      }
      gy = std::move(gx);
    }
    return gy;
  }

  MlpConfig cfg_;
  std::vector<AffineLayer> layers_;
  Tensor class_embed_;
};

/// Adapts a denoiser at fixed (t, c) to the DiffOp contract on its latent input.
inline DiffOp denoiser_op(DenoiserPtr d, int t, Condition c) {
  return {[d, t, c](const Tensor& z) { return predict_eps(*d, z, t, c); },
          [d, t, c](const Tensor& z, const Tensor& g) { return d->vjp(z, t, c, g); }};
}

}  // namespace dia
