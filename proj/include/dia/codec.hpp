// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "dia/diffop.hpp"
#include "dia/tensor.hpp"

namespace dia {

/// Image <-> latent map. Both directions are differentiable and expose VJPs.
class Codec {
 public:
  virtual ~Codec() = default;

  virtual std::string kind() const = 0;
  virtual Shape image_shape() const = 0;
  virtual Shape latent_shape() const = 0;

  virtual Tensor encode(const Tensor& image) const = 0;
  virtual Tensor decode(const Tensor& latent) const = 0;
  virtual Tensor encode_vjp(const Tensor& image, const Tensor& cotangent) const = 0;
  virtual Tensor decode_vjp(const Tensor& latent, const Tensor& cotangent) const = 0;

  void check_image(const Tensor& x) const {
    if (x.shape() != image_shape())
      throw std::invalid_argument(kind() + " codec: image shape " + shape_str(x.shape()) + ", expected " +
                                  shape_str(image_shape()));
  }
  void check_latent(const Tensor& z) const {
    if (z.shape() != latent_shape())
      throw std::invalid_argument(kind() + " codec: latent shape " + shape_str(z.shape()) + ", expected " +
                                  shape_str(latent_shape()));
  }
};

using CodecPtr = std::shared_ptr<const Codec>;

inline Tensor encode(const Codec& c, const Tensor& image) {
  c.check_image(image);
  return c.encode(image);
}

inline Tensor decode(const Codec& c, const Tensor& latent) {
  c.check_latent(latent);
  return c.decode(latent);
}

/// Pixel-space diffusion: the latent is the image.
class IdentityCodec final : public Codec {
 public:
  explicit IdentityCodec(Shape image_shape) : shape_(std::move(image_shape)) {}

  std::string kind() const override { return "identity"; }
  Shape image_shape() const override { return shape_; }
  Shape latent_shape() const override { return shape_; }

  Tensor encode(const Tensor& x) const override { return x; }
  Tensor decode(const Tensor& z) const override { return z; }
  Tensor encode_vjp(const Tensor&, const Tensor& g) const override { return g; }
  Tensor decode_vjp(const Tensor&, const Tensor& g) const override { return g; }

 private:
  Shape shape_;
};

/// Affine encoder/decoder pair: z = E·vec(x) + e, x = reshape(D·z + d).
class LinearCodec final : public Codec {
 public:
  LinearCodec(Shape image_shape, Tensor enc_W, Tensor enc_b, Tensor dec_W, Tensor dec_b)
      : shape_(std::move(image_shape)),
        enc_W_(std::move(enc_W)),
        enc_b_(std::move(enc_b)),
        dec_W_(std::move(dec_W)),
        dec_b_(std::move(dec_b)) {
    const auto n = shape_numel(shape_);
    const auto k = enc_b_.size();
    if (enc_W_.shape() != Shape{k, n} || dec_W_.shape() != Shape{n, k} || dec_b_.size() != n)
      throw std::invalid_argument("LinearCodec: inconsistent parameter shapes");
  }

  std::string kind() const override { return "linear"; }
  Shape image_shape() const override { return shape_; }
  Shape latent_shape() const override { return {enc_b_.size()}; }

  std::size_t pixels() const { return dec_b_.size(); }
  std::size_t latent_dim() const { return enc_b_.size(); }

  const Tensor& enc_W() const { return enc_W_; }
  const Tensor& enc_b() const { return enc_b_; }
  const Tensor& dec_W() const { return dec_W_; }
  const Tensor& dec_b() const { return dec_b_; }

  Tensor encode(const Tensor& x) const override {
    Tensor z({latent_dim()});
    matvec(enc_W_, enc_b_, x, z);
    return z;
  }
  Tensor decode(const Tensor& z) const override {
    Tensor x(shape_);
    matvec(dec_W_, dec_b_, z, x);
    return x;
  }
  Tensor encode_vjp(const Tensor&, const Tensor& g) const override {
    Tensor out(shape_);
    matvec_t(enc_W_, g, out);
    return out;
  }
  Tensor decode_vjp(const Tensor&, const Tensor& g) const override {
    Tensor out({latent_dim()});
    matvec_t(dec_W_, g, out);
    return out;
  }

 private:
  static void matvec(const Tensor& W, const Tensor& b, const Tensor& x, Tensor& y) {
    const auto rows = W.shape()[0], cols = W.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = b[r];
      for (std::size_t c = 0; c < cols; ++c) acc += W[r * cols + c] * x[c];
      y[r] = acc;
    }
  }
  static void matvec_t(const Tensor& W, const Tensor& g, Tensor& y) {
    const auto rows = W.shape()[0], cols = W.shape()[1];
    for (auto& v : y) v = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) y[c] += W[r * cols + c] * g[r];
  }

  Shape shape_;
  Tensor enc_W_, enc_b_, dec_W_, dec_b_;
};

inline DiffOp encode_op(CodecPtr c) {
  return {[c](const Tensor& x) { return encode(*c, x); },
          [c](const Tensor& x, const Tensor& g) { return c->encode_vjp(x, g); }};
}

inline DiffOp decode_op(CodecPtr c) {
  return {[c](const Tensor& z) { return decode(*c, z); },
          [c](const Tensor& z, const Tensor& g) { return c->decode_vjp(z, g); }};
}

}  // namespace dia
