// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "dia/ddim.hpp"
#include "dia/denoiser.hpp"
#include "dia/rng.hpp"
#include "dia/schedule.hpp"

using namespace dia;

namespace {

NoiseSchedule tiny() { return build_schedule(4, 0.1, 0.4); }

// Dense row-major helpers for the closed-form linear oracle.
using Mat = std::vector<double>;

Mat identity(std::size_t n, double c = 1.0) {
  Mat m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = c;
  return m;
}

Mat matmul(const Mat& a, const Mat& b, std::size_t n) {
  Mat c(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * n + k] * b[k * n + j];
  return c;
}

std::vector<double> matvec(const Mat& a, const std::vector<double>& x, std::size_t n) {
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += a[i * n + j] * x[j];
  return y;
}

struct Affine {
  Mat A;
  std::vector<double> c;
};

// One DDIM move with ε = g·W·z + b is z' = (s·I + k·g·W)·z + k·b.
Affine linear_step(const Mat& W, const std::vector<double>& b, double g, double ab_from, double ab_to, bool inverting,
                   std::size_t n) {
  const double s = std::sqrt(ab_to / ab_from);
  const double k = inverting ? std::sqrt(ab_to) * (std::sqrt(1.0 / ab_to - 1.0) - std::sqrt(1.0 / ab_from - 1.0))
                             : std::sqrt(1.0 - ab_to) - std::sqrt(ab_to) * std::sqrt(1.0 - ab_from) / std::sqrt(ab_from);
  Affine out{identity(n, s), std::vector<double>(n)};
  for (std::size_t i = 0; i < n * n; ++i) out.A[i] += k * g * W[i];
  for (std::size_t i = 0; i < n; ++i) out.c[i] = k * b[i];
  return out;
}

Affine compose(const Affine& second, const Affine& first, std::size_t n) {
  Affine out{matmul(second.A, first.A, n), matvec(second.A, first.c, n)};
  for (std::size_t i = 0; i < n; ++i) out.c[i] += second.c[i];
  return out;
}

std::shared_ptr<LinearDenoiser> random_linear(std::size_t n, double time_gain, Rng& r) {
  Tensor W = sample_gaussian(r, {n, n}) * (0.3 / std::sqrt(static_cast<double>(n)));
  Tensor b = sample_gaussian(r, {n}) * 0.1;
  return std::make_shared<LinearDenoiser>(std::move(W), std::move(b), time_gain);
}

}  // namespace

TEST(Schedule, TinyScheduleByHand) {
  const auto s = tiny();
  const double alpha[] = {0.9, 0.8, 0.7, 0.6};
  const double abar[] = {0.9, 0.72, 0.504, 0.3024};
  for (int t = 0; t < 4; ++t) {
    EXPECT_NEAR(s.alpha[t], alpha[t], 1e-15);
    EXPECT_NEAR(s.alpha_bar[t], abar[t], 1e-15);
  }
}

TEST(Schedule, DefaultAlphaBarMatchesProductLoop) {
  const auto s = default_schedule();
  ASSERT_EQ(s.T, 1000);
  double prod = 1.0;
  for (int t = 0; t < 1000; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 999.0);
  EXPECT_NEAR(s.abar(999), prod, 1e-12);
  for (int t = 1; t < s.T; ++t) {
    ASSERT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    ASSERT_NEAR(s.alpha_bar[t], s.alpha_bar[t - 1] * s.alpha[t], 1e-12);
  }
}

TEST(Schedule, BoundsAreChecked) {
  EXPECT_THROW(build_schedule(1, 0.1, 0.2), std::invalid_argument);
  EXPECT_THROW(build_schedule(10, 0.0, 0.2), std::invalid_argument);
  EXPECT_THROW(build_schedule(10, 0.3, 0.2), std::invalid_argument);
  EXPECT_THROW(build_schedule(10, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(tiny().abar(4), std::out_of_range);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = build_schedule(50, 1e-3, 0.05);
  const nlohmann::json j = s;
  EXPECT_EQ(j.at("T"), 50);
  EXPECT_TRUE(j.get<NoiseSchedule>() == s);
}

TEST(Grid, LeadingSpacingCapsAtLastTimestep) {
  const auto g = leading_grid(1000, 10);
  ASSERT_EQ(g.steps(), 10);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(g.taus[k], 100 * k);
  EXPECT_EQ(g.last(), 999);
  const auto g3 = leading_grid(1000, 3);
  EXPECT_EQ(g3.taus, (std::vector<int>{0, 333, 666, 999}));
  const auto s = default_schedule();
  for (int steps : {1, 5, 10, 20, 50}) EXPECT_NO_THROW(validate_grid(leading_grid(1000, steps), s));
  EXPECT_THROW(leading_grid(1000, 0), std::invalid_argument);
  EXPECT_THROW(validate_grid(TimestepGrid{{0, 5, 5}}, s), std::invalid_argument);
  EXPECT_THROW(validate_grid(TimestepGrid{{0, 1000}}, s), std::invalid_argument);
}

TEST(ForwardNoise, HandValues) {
  const auto s = tiny();
  const Tensor one = Tensor::scalar(1.0), zero = Tensor::scalar(0.0);
  EXPECT_NEAR(forward_noise(one, 1, zero, s)[0], 0.84853, 1e-4);
  EXPECT_NEAR(forward_noise(zero, 1, Tensor::scalar(2.0), s)[0], std::sqrt(1 - 0.72) * 2.0, 1e-15);
  EXPECT_THROW(forward_noise(one, 1, Tensor::vector({1, 2}), s), std::invalid_argument);
}

TEST(Lambda, HandValueAndDomain) {
  const auto s = tiny();
  EXPECT_NEAR(lambda_coeff(0, s), 0.29028, 1e-4);
  for (int t = 0; t < 3; ++t) EXPECT_GT(lambda_coeff(t, s), 0.0);
  EXPECT_THROW(lambda_coeff(3, s), std::out_of_range);
}

TEST(DdimStep, SampleHandValue) {
  const auto s = tiny();
  EXPECT_NEAR(ddim_sample_step(Tensor::scalar(1.0), 1, 0, Tensor::scalar(0.5), s)[0], 0.98034, 1e-3);
  const Tensor x = Tensor::vector({0.3, -1.2});
  const Tensor r = ddim_sample_step(x, 2, 0, Tensor::zeros({2}), s);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(r[i], std::sqrt(0.9 / 0.504) * x[i], 1e-15);
  EXPECT_THROW(ddim_sample_step(x, 1, 1, x, s), std::invalid_argument);
}

TEST(DdimStep, InvertHandValue) {
  const auto s = tiny();
  const auto st = ddim_invert_step(Tensor::scalar(1.0), 0, 1, Tensor::scalar(1.0), s);
  EXPECT_NEAR(st.next[0], 1.14073, 1e-3);
  EXPECT_NEAR(st.delta[0], std::sqrt(0.72) * 0.29028, 1e-4);
  const auto z = ddim_invert_step(Tensor::scalar(2.0), 0, 2, Tensor::scalar(0.0), s);
  EXPECT_NEAR(z.next[0], 2.0 * std::sqrt(0.504 / 0.9), 1e-15);
  EXPECT_EQ(z.delta[0], 0.0);
  EXPECT_THROW(ddim_invert_step(Tensor::scalar(1.0), 1, 0, Tensor::scalar(1.0), s), std::invalid_argument);
}

TEST(DdimStep, UnitInvertStepMatchesLambdaForm) {
  // x_{t+1} = √α_{t+1}·x + √ᾱ_{t+1}·λ(t)·ε
  const auto s = default_schedule();
  for (int t : {0, 17, 500, 998}) {
    const auto st = ddim_invert_step(Tensor::scalar(0.7), t, t + 1, Tensor::scalar(-0.4), s);
    const double want = std::sqrt(s.alpha[t + 1]) * 0.7 + std::sqrt(s.abar(t + 1)) * lambda_coeff(t, s) * -0.4;
    EXPECT_NEAR(st.next[0], want, 1e-12);
  }
}

TEST(DdimStep, SharedEpsIsExactInverse) {
  const auto s = default_schedule();
  Rng r(5);
  for (auto [from, to] : {std::pair{0, 100}, {100, 999}, {0, 999}, {333, 334}}) {
    const Tensor x = sample_gaussian(r, {16}), e = sample_gaussian(r, {16});
    const auto up = ddim_invert_step(x, from, to, e, s);
    EXPECT_LT(max_abs(ddim_sample_step(up.next, to, from, e, s) - x), 1e-10);
  }
}

TEST(Rollout, ZeroDenoiserIsPureRescale) {
  const auto s = default_schedule();
  const auto grid = leading_grid(1000, 10);
  Rng r(6);
  const Tensor z = sample_gaussian(r, {8});
  ZeroDenoiser zero(8);
  const auto tr = rollout_invert(z, grid, s, zero, {});
  ASSERT_EQ(tr.states.size(), 11u);
  for (int k = 0; k <= 10; ++k) {
    const double c = std::sqrt(s.abar(grid.taus[k]) / s.abar(0));
    EXPECT_LT(max_abs(tr.states[k] - z * c), 1e-14);
  }
  for (const auto& d : tr.deltas) EXPECT_EQ(max_abs(d), 0.0);
  const auto back = rollout_sample(tr.final_state(), grid, s, zero, {});
  EXPECT_LT(max_abs(back.final_state() - z), 1e-12);
}

TEST(Rollout, SingleStepHasTwoStates) {
  const auto s = default_schedule();
  ZeroDenoiser zero(3);
  const auto tr = rollout_invert(Tensor::ones({3}), leading_grid(1000, 1), s, zero, {});
  EXPECT_EQ(tr.states.size(), 2u);
  EXPECT_EQ(tr.steps(), 1);
}

TEST(Rollout, LinearDenoiserMatchesMatrixComposition) {
  const auto s = default_schedule();
  const auto grid = leading_grid(1000, 10);
  const std::size_t n = 6;
  Rng r(8);
  const auto lin = random_linear(n, 0.7, r);
  const Tensor z = sample_gaussian(r, {n});
  Mat W(lin->matrix(Condition::none()).begin(), lin->matrix(Condition::none()).end());
  std::vector<double> b(lin->bias().begin(), lin->bias().end());
  std::vector<double> zv(z.begin(), z.end());

  for (auto q : {InversionQuery::source, InversionQuery::destination}) {
    Affine inv{identity(n), std::vector<double>(n, 0.0)};
    for (int k = 0; k < 10; ++k) {
      const int from = grid.taus[k], to = grid.taus[k + 1];
      const double g = 1.0 + 0.7 * (q == InversionQuery::source ? from : to) / 1000.0;
      inv = compose(linear_step(W, b, g, s.abar(from), s.abar(to), true, n), inv, n);
    }
    auto want = matvec(inv.A, zv, n);
    for (std::size_t i = 0; i < n; ++i) want[i] += inv.c[i];
    const auto tr = rollout_invert(z, grid, s, *lin, {}, q);
    EXPECT_LT(max_rel_error(tr.final_state(), Tensor({n}, want)), 1e-10);
  }

  Affine smp{identity(n), std::vector<double>(n, 0.0)};
  for (int k = 10; k > 0; --k) {
    const int from = grid.taus[k], to = grid.taus[k - 1];
    smp = compose(linear_step(W, b, 1.0 + 0.7 * from / 1000.0, s.abar(from), s.abar(to), false, n), smp, n);
  }
  auto want = matvec(smp.A, zv, n);
  for (std::size_t i = 0; i < n; ++i) want[i] += smp.c[i];
  EXPECT_LT(max_rel_error(rollout_sample(z, grid, s, *lin, {}).final_state(), Tensor({n}, want)), 1e-10);
}

TEST(Rollout, DenoiserShapeMismatchThrows) {
  const auto s = default_schedule();
  ZeroDenoiser zero(4);
  EXPECT_THROW(rollout_invert(Tensor::ones({3}), leading_grid(1000, 2), s, zero, {}), std::invalid_argument);
}

TEST(Decomposition, ZeroDenoiserHasNoModelTrajectory) {
  const auto s = default_schedule();
  ZeroDenoiser zero(5);
  const auto tr = rollout_invert(Tensor::ones({5}) * 0.4, leading_grid(1000, 10), s, zero, {});
  const auto d = decompose_trajectory(tr, s);
  EXPECT_EQ(max_abs(d.mt), 0.0);
  EXPECT_LT(max_rel_error(d.bias, tr.final_state()), 1e-14);
}

TEST(Decomposition, IdentitiesAndIndependentReaccumulation) {
  const auto s = default_schedule();
  const auto grid = leading_grid(1000, 10);
  Rng r(9);
  MlpConfig cfg;
  cfg.latent_dim = 12;
  cfg.hidden = 16;
  MlpDenoiser mlp = MlpDenoiser::init(cfg, r, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = sample_gaussian(r, {12});
    const auto tr = rollout_invert(z, grid, s, mlp, {Condition::of(trial % 2), 1.0});
    const auto d = decompose_trajectory(tr, s);
    EXPECT_LT(max_rel_error(d.bias + d.mt, tr.final_state()), 1e-10);
    EXPECT_LT(max_rel_error(tr.states.front() + d.pt, tr.final_state()), 1e-10);

    // MT re-accumulated as a running recurrence m_{k+1} = scale_k·m_k + Δ_k
    Tensor m = Tensor::zeros({12});
    for (int k = 0; k < 10; ++k) m = m * std::sqrt(s.abar(grid.taus[k + 1]) / s.abar(grid.taus[k])) + tr.deltas[k];
    EXPECT_LT(max_rel_error(d.mt, m), 1e-10);
  }
}

TEST(Decomposition, RejectsSamplingTrajectory) {
  const auto s = default_schedule();
  ZeroDenoiser zero(2);
  const auto tr = rollout_sample(Tensor::ones({2}), leading_grid(1000, 3), s, zero, {});
  EXPECT_THROW(decompose_trajectory(tr, s), std::invalid_argument);
}
