// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "dia/rng.hpp"
#include "dia/tensor.hpp"

namespace dia {

/// A differentiable map with an explicit vector-Jacobian product.
///
/// `vjp(x, g)` returns Jᵀg where J is the Jacobian of `forward` at x. The result
/// has the shape of x and is linear in g.
struct DiffOp {
  std::function<Tensor(const Tensor&)> forward;
  std::function<Tensor(const Tensor& input, const Tensor& cotangent)> vjp;
};

inline DiffOp identity_op() {
  return {[](const Tensor& x) { return x; }, [](const Tensor&, const Tensor& g) { return g; }};
}

inline DiffOp scale_op(double c) {
  return {[c](const Tensor& x) { return x * c; }, [c](const Tensor&, const Tensor& g) { return g * c; }};
}

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient of a scalar function.
inline Tensor finite_difference_grad(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = f(probe);
    probe[i] = x[i] - h;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_difference_grad: non-finite value when perturbing index " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Compares op.vjp(x, g) against the finite-difference gradient of ⟨g, op(x)⟩
/// for a random Gaussian cotangent g. Returns ‖vjp − fd‖∞ / max(‖fd‖∞, 1e-12).
inline double vjp_selftest(const DiffOp& op, const Tensor& x, Rng& rng, double h = 1e-5) {
  const Tensor y = op.forward(x);
  const Tensor g = sample_gaussian(rng, y.shape());
  const Tensor analytic = op.vjp(x, g);
  if (!analytic.same_shape(x))
    throw std::invalid_argument("vjp_selftest: vjp returned shape " + shape_str(analytic.shape()) +
                                " for input shape " + shape_str(x.shape()));
  const Tensor numeric = finite_difference_grad(
      [&](const Tensor& p) {
        const Tensor yp = op.forward(p);
        if (!yp.same_shape(g))
          throw std::invalid_argument("vjp_selftest: forward output shape " + shape_str(yp.shape()) +
                                      " does not match cotangent " + shape_str(g.shape()));
        return dot(g, yp);
      },
      x, h);
  return max_rel_error(analytic, numeric);
}

/// Same as above with a caller-supplied cotangent; shapes are checked.
inline double vjp_selftest(const DiffOp& op, const Tensor& x, const Tensor& cotangent, double h = 1e-5) {
  const Tensor y = op.forward(x);
  if (!y.same_shape(cotangent))
    throw std::invalid_argument("vjp_selftest: forward output shape " + shape_str(y.shape()) +
                                " does not match cotangent " + shape_str(cotangent.shape()));
  const Tensor analytic = op.vjp(x, cotangent);
  const Tensor numeric =
      finite_difference_grad([&](const Tensor& p) { return dot(cotangent, op.forward(p)); }, x, h);
  return max_rel_error(analytic, numeric);
}

}  // namespace dia
