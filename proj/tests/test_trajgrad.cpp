// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "dia/pipeline.hpp"
#include "dia/selftest.hpp"

using namespace dia;

namespace {

const NoiseSchedule& sched() {
  static const NoiseSchedule s = default_schedule();
  return s;
}

LossValue sq_to_aux(const Tensor& terminal, const Tensor& aux) {
  Tensor r = terminal - aux;
  return {squared_norm(r), r * 2.0};
}

std::shared_ptr<MlpDenoiser> mlp64(std::uint64_t seed) {
  Rng r(seed);
  MlpConfig cfg;
  cfg.latent_dim = 64;
  cfg.hidden = 32;
  return std::make_shared<MlpDenoiser>(MlpDenoiser::init(cfg, r, 1.0));
}

const Shape kImg{8, 8};

}  // namespace

TEST(TrajectoryGrad, ZeroDenoiserClosedForm) {
  const auto id = std::make_shared<IdentityCodec>(kImg);
  const auto zero = std::make_shared<ZeroDenoiser>(64);
  const auto p = make_inversion_pipeline(id, zero, sched(), leading_grid(1000, 10), {});
  Rng r(1);
  const Tensor x = sample_uniform(r, kImg, 0, 1);
  const auto rep = trajectory_grad(p, sq_to_aux, x, x);
  const double c = std::sqrt(sched().abar(999) / sched().abar(0));
  const Tensor want = (x * c - x) * (2.0 * c);
  EXPECT_LT(max_rel_error(rep.grad, want), 1e-10);
  EXPECT_NEAR(rep.loss, (c - 1) * (c - 1) * squared_norm(x), 1e-10 * squared_norm(x));
}

TEST(TrajectoryGrad, ConstantLossHasZeroGradient) {
  const auto p = make_inversion_pipeline(std::make_shared<IdentityCodec>(kImg), mlp64(2), sched(),
                                         leading_grid(1000, 5), {Condition::of(0), 1.0});
  Rng r(3);
  const Tensor x = sample_uniform(r, kImg, 0, 1);
  auto constant = [](const Tensor& t, const Tensor&) { return LossValue{4.2, Tensor::zeros_like(t)}; };
  const auto rep = trajectory_grad(p, constant, x, x);
  EXPECT_EQ(max_abs(rep.grad), 0.0);
  EXPECT_EQ(rep.loss, 4.2);
}

TEST(TrajectoryGrad, RoundTripPlanMatchesFiniteDifferences) {
  const auto p = dia_pipeline(DiaLoss::r, std::make_shared<IdentityCodec>(kImg), mlp64(4), sched(), 10,
                              {Condition::of(1), 1.0});
  Rng r(5);
  const Tensor x = sample_uniform(r, kImg, 0.1, 0.9);
  EXPECT_LT(dia_gradient_error(DiaLoss::r, x, p), 1e-5);
}

TEST(TrajectoryGrad, EveryDiaObjectiveBothCodecsMatchesFiniteDifferences) {
  Rng r(6);
  const auto mlp = mlp64(7);
  const auto id = std::make_shared<IdentityCodec>(kImg);
  const auto lin = random_linear_codec(kImg, 64, r);
  for (DiaLoss l : {DiaLoss::pt, DiaLoss::r, DiaLoss::mt})
    for (CodecPtr codec : {CodecPtr(id), CodecPtr(lin)}) {
      const auto p = dia_pipeline(l, codec, mlp, sched(), 10, {Condition::of(0), 1.0});
      const Tensor x = random_image(r, kImg);
      EXPECT_LT(dia_gradient_error(l, x, p), 1e-5) << dia_loss_name(l) << " / " << codec->kind();
    }
}

TEST(TrajectoryGrad, GuidedAndDestinationQueryPlansMatchFiniteDifferences) {
  Rng r(8);
  const auto p = dia_pipeline(DiaLoss::r, std::make_shared<IdentityCodec>(kImg), mlp64(9), sched(), 6,
                              {Condition::of(1), 2.5}, InversionQuery::destination);
  EXPECT_LT(dia_gradient_error(DiaLoss::r, random_image(r, kImg), p), 1e-5);
}

TEST(TrajectoryGrad, LinearDenoiserFourDimensionalOracle) {
  Rng r(10);
  Tensor W = sample_gaussian(r, {4, 4}) * 0.4;
  const auto lin = std::make_shared<LinearDenoiser>(std::move(W), sample_gaussian(r, {4}) * 0.1, 0.5);
  const auto p = make_inversion_pipeline(std::make_shared<IdentityCodec>(Shape{4}), lin, sched(),
                                         leading_grid(1000, 10), {});
  const Tensor x = sample_uniform(r, {4}, 0.2, 0.8);
  const Tensor fd = finite_difference_grad([&](const Tensor& xp) { return squared_norm(run_pipeline(p, xp) - x); }, x);
  EXPECT_LT(max_rel_error(loss_dia_pt(x, p).grad, fd), 1e-6);
}

TEST(TrajectoryGrad, SplitPlanComposesToTheSameGradient) {
  Rng r(11);
  const auto p = dia_pipeline(DiaLoss::r, random_linear_codec(kImg, 64, r), mlp64(12), sched(), 8,
                              {Condition::of(0), 1.0});
  const Tensor x = random_image(r, kImg);
  const Tensor seed = sample_gaussian(r, kImg);
  const Tensor whole = pullback(p, x, seed);
  const auto hs = pipeline_states(p, x);
  for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{9}, p.stages.size() - 1}) {
    const Tensor tail = pullback(p.slice(k, p.stages.size()), hs[k], seed);
    const Tensor head = pullback(p.slice(0, k), x, tail);
    EXPECT_LT(max_rel_error(head, whole), 1e-10) << "split at " << k;
  }
}

TEST(TrajectoryGrad, NaiveAndDecomposedAgreeExactly) {
  Rng r(13);
  const auto p = dia_pipeline(DiaLoss::pt, std::make_shared<IdentityCodec>(kImg), mlp64(14), sched(), 10,
                              {Condition::of(0), 1.0});
  const Tensor x = random_image(r, kImg);
  EXPECT_TRUE(loss_dia_pt(x, p, GradMode::naive).grad == loss_dia_pt(x, p, GradMode::decomposed).grad);
}

TEST(TrajectoryGrad, CotangentShapeMismatchIsRejected) {
  const auto p = make_inversion_pipeline(std::make_shared<IdentityCodec>(kImg), std::make_shared<ZeroDenoiser>(64),
                                         sched(), leading_grid(1000, 2), {});
  auto bad = [](const Tensor&, const Tensor&) { return LossValue{0.0, Tensor::zeros({3})}; };
  EXPECT_THROW(trajectory_grad(p, bad, Tensor::zeros(kImg), Tensor::zeros(kImg)), std::invalid_argument);
}

TEST(TrajectoryGrad, NonFiniteCotangentNamesStage) {
  const auto p = make_inversion_pipeline(std::make_shared<IdentityCodec>(kImg), std::make_shared<ZeroDenoiser>(64),
                                         sched(), leading_grid(1000, 2), {});
  auto nan_seed = [](const Tensor& t, const Tensor&) {
    return LossValue{0.0, Tensor(t.shape(), std::numeric_limits<double>::quiet_NaN())};
  };
  try {
    trajectory_grad(p, nan_seed, Tensor::zeros(kImg), Tensor::zeros(kImg));
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("stage 3"), std::string::npos) << e.what();
  }
}

TEST(TrajectoryGrad, MismatchedCodecAndDenoiserAreRejected) {
  const auto p = make_inversion_pipeline(std::make_shared<IdentityCodec>(kImg), std::make_shared<ZeroDenoiser>(32),
                                         sched(), leading_grid(1000, 2), {});
  EXPECT_THROW(run_pipeline(p, Tensor::zeros(kImg)), std::invalid_argument);
}

TEST(Memory, ZeroDenoiserPeakIsFlat) {
  const auto id = std::make_shared<IdentityCodec>(kImg);
  const auto zero = std::make_shared<ZeroDenoiser>(64);
  auto make = [&](int s) { return make_inversion_pipeline(id, zero, sched(), leading_grid(1000, s), {}); };
  const Tensor x = Tensor::ones(kImg) * 0.5;
  const auto m = memory_probe(make, sq_to_aux, x, x, GradMode::decomposed);
  EXPECT_NEAR(m.ratio(), 1.0, 0.1);
  EXPECT_GT(m.stored_large, m.stored_small);
}

TEST(Memory, MlpDecomposedBoundedNaiveGrows) {
  const auto id = std::make_shared<IdentityCodec>(kImg);
  const auto mlp = mlp64(15);
  auto make = [&](int s) { return dia_pipeline(DiaLoss::pt, id, mlp, sched(), s, {Condition::of(0), 1.0}); };
  const Tensor x = Tensor::ones(kImg) * 0.5;
  const auto dec = memory_probe(make, sq_to_aux, x, x, GradMode::decomposed);
  const auto naive = memory_probe(make, sq_to_aux, x, x, GradMode::naive);
  EXPECT_LE(dec.ratio(), 1.5);
  EXPECT_GE(naive.ratio(), 5.0);
}

TEST(Memory, PeakCountersAreReported) {
  const auto p = dia_pipeline(DiaLoss::pt, std::make_shared<IdentityCodec>(kImg), mlp64(16), sched(), 3,
                              {Condition::of(0), 1.0});
  const Tensor x = Tensor::ones(kImg) * 0.5;
  const auto rep = trajectory_grad(p, sq_to_aux, x, x);
  EXPECT_GT(rep.peak_live_tensors, 0);
  EXPECT_GT(rep.peak_live_scalars, 0);
  EXPECT_EQ(rep.stored_scalars, 64 * 5);  // input plus four stage outputs
}
