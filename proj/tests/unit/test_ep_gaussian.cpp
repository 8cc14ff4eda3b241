#include <gtest/gtest.h>

#include <cmath>

#include "patchep/ep_gaussian.hpp"
#include "patchep/noise.hpp"
#include "patchep/oracle/exact_posterior.hpp"
#include "support/helpers.hpp"

using namespace patchep;

namespace {

PatchGMM smooth_gmm(CounterRng& rng, std::size_t K, std::size_t patch, double mean_scale = 0.3) {
  return testutil::random_gmm(rng, K, static_cast<Eigen::Index>(patch * patch), mean_scale, 0.05);
}

// The diagonal EP fixed point is exact only while every exact marginal
// variance stays below the noise variance (otherwise the prior factor's
// precision would have to be negative and is floored instead).
bool floor_inactive(const Vector& exact_var, double sigma2) { return (exact_var.array() < sigma2).all(); }

Vector sample_image(CounterRng& rng, std::size_t n) {
  Vector x(static_cast<Eigen::Index>(n));
  for (auto& v : x) v = 0.5 + 0.3 * rng.normal();
  return x;
}

EPConfig tight() {
  EPConfig cfg;
  cfg.stop_tol = 1e-20;
  cfg.max_iters = 60;
  return cfg;
}

}  // namespace

TEST(EpGaussian, DenoisingMatchesExactPosterior) {
  CounterRng rng(1);
  const auto gmm = adapt(smooth_gmm(rng, 3, 2), Theta{0.5, 0.02, 1.0});
  Partition part(8, 8, 2, 1, 1);
  const auto op = DegradationOperator::identity(8, 8);
  const Vector y = simulate(op, sample_image(rng, 64), NoiseModel::gaussian(0.05), 3);
  const auto ep = run_ep_gaussian(y, op, 0.05, gmm, part, tight());
  const auto ex = oracle::exact_diagonal_gaussian_posterior(y, op, 0.05, gmm, part);
  ASSERT_TRUE(floor_inactive(ex.variances, 0.05));
  EXPECT_LT(testutil::max_rel_err(ep.mean, ex.mean), 1e-6);
  EXPECT_LT(testutil::max_rel_err(ep.variances, ex.variances), 1e-6);
}

TEST(EpGaussian, InpaintingMatchesExactPosterior) {
  CounterRng rng(2);
  const auto gmm = adapt(smooth_gmm(rng, 3, 2), Theta{0.5, 0.02, 1.0});
  Partition part(8, 8, 2, 0, 0);
  std::vector<bool> kept(64);
  for (auto&& k : kept) k = rng.uniform() < 0.4;
  const auto op = DegradationOperator::mask(8, 8, kept);
  const Vector y = simulate(op, sample_image(rng, 64), NoiseModel::gaussian(0.01), 4);
  const auto ep = run_ep_gaussian(y, op, 0.01, gmm, part, tight());
  const auto ex = oracle::exact_diagonal_gaussian_posterior(y, op, 0.01, gmm, part);
  EXPECT_LT(testutil::max_rel_err(ep.mean, ex.mean), 1e-6);
  EXPECT_LT(testutil::max_rel_err(ep.variances, ex.variances), 1e-6);
  for (std::size_t n = 0; n < 64; ++n) {
    if (kept[n]) continue;
    const auto j = part.block_of_pixel(n);
    const auto a = static_cast<Eigen::Index>(part.position_in_block(n));
    EXPECT_DOUBLE_EQ(ep.q_x1.precision[j](a, a), 1e-8);
  }
}

TEST(EpGaussian, SingleComponentIsConjugateUpdate) {
  CounterRng rng(3);
  const auto gmm = adapt(smooth_gmm(rng, 1, 2), Theta{0.2, 0.0, 1.0});
  Partition part(4, 4, 2, 0, 0);
  const auto op = DegradationOperator::identity(4, 4);
  const Vector y = sample_image(rng, 16);
  EPConfig cfg;
  cfg.max_iters = 1;
  cfg.structure = CovarianceStructure::BlockDiagonal;
  cfg.block_kl.tol = 0.0;
  cfg.block_kl.grad_tol = 1e-13;
  cfg.block_kl.max_iters = 5000;
  const auto ep = run_ep_gaussian(y, op, 0.05, gmm, part, cfg);
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const Matrix c = gmm.cov(0);
    const Matrix post = (c.inverse() + Matrix::Identity(4, 4) / 0.05).inverse();
    const Vector mean = post * (c.inverse() * gmm.mean(0) + gather(y, part, j) / 0.05);
    EXPECT_LT((ep.cov[j] - post).norm(), 1e-10);
    EXPECT_LT((gather(ep.mean, part, j) - mean).norm(), 1e-10);
  }
}

TEST(EpGaussian, UninformativePriorReturnsData) {
  PatchGMM g;
  g.weights = {1.0};
  g.means = {Vector::Zero(4)};
  g.covs = {1e12 * Matrix::Identity(4, 4)};
  CounterRng rng(4);
  const Vector y = sample_image(rng, 16);
  const auto ep = run_ep_gaussian(y, DegradationOperator::identity(4, 4), 0.01, adapt(g, Theta{}),
                                  Partition(4, 4, 2, 0, 0), EPConfig{});
  EXPECT_LT((ep.mean - y).cwiseAbs().maxCoeff(), 1e-9);
  for (const auto& b : ep.q_x0.precision) EXPECT_LE(b.diagonal().maxCoeff(), 1e-8);
}

TEST(EpGaussian, VanishingNoiseReturnsData) {
  CounterRng rng(5);
  const auto gmm = adapt(smooth_gmm(rng, 3, 2), Theta{0.5, 0.02, 1.0});
  const Vector y = sample_image(rng, 36);
  const auto ep =
      run_ep_gaussian(y, DegradationOperator::identity(6, 6), 1e-12, gmm, Partition(6, 6, 2, 1, 0), EPConfig{});
  EXPECT_LT((ep.mean - y).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EpGaussian, ScalarPatchesMatchGridPosterior) {
  // r = 1: every pixel is its own block with a two-component 1-D prior.
  PatchGMM g;
  g.weights = {0.4, 0.6};
  g.means = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.5)};
  g.covs = {Matrix::Constant(1, 1, 0.5), Matrix::Constant(1, 1, 0.8)};
  Vector y(4);
  y << -0.6, 1.0, 2.0, -1.7;
  const double s2 = 0.2;
  const auto ep = run_ep_gaussian(y, DegradationOperator::identity(2, 2), s2, adapt(g, Theta{}),
                                  Partition(2, 2, 1, 0, 0), tight());
  for (Eigen::Index n = 0; n < 4; ++n) {
    double z = 0, m1 = 0, m2 = 0;
    const int steps = 400000;
    const double lo = -15, h = 30.0 / steps;
    for (int i = 0; i <= steps; ++i) {
      const double x = lo + h * i;
      const double wgt = (i == 0 || i == steps) ? 0.5 : 1.0;
      const double prior = 0.4 * std::exp(-0.5 * (x + 1) * (x + 1) / 0.5) / std::sqrt(0.5) +
                           0.6 * std::exp(-0.5 * (x - 1.5) * (x - 1.5) / 0.8) / std::sqrt(0.8);
      const double f = wgt * prior * std::exp(-0.5 * (y[n] - x) * (y[n] - x) / s2);
      z += f, m1 += f * x, m2 += f * x * x;
    }
    const double mean = m1 / z, var = m2 / z - mean * mean;
    ASSERT_LT(var, s2);
    EXPECT_NEAR(ep.mean[n], mean, 1e-5);
    EXPECT_NEAR(ep.variances[n], var, 1e-5);
  }
}

TEST(EpGaussian, DenoisingConvergesInFewIterations) {
  CounterRng rng(6);
  const auto gmm = adapt(smooth_gmm(rng, 3, 4), Theta{0.5, 0.02, 1.0});
  for (int trial = 0; trial < 3; ++trial) {
    const auto op = DegradationOperator::identity(16, 16);
    const Vector y = simulate(op, sample_image(rng, 256), NoiseModel::gaussian(0.01), 10 + trial);
    const auto ep = run_ep_gaussian(y, op, 0.01, gmm, Partition(16, 16, 4, trial, 1), EPConfig{});
    EXPECT_TRUE(ep.converged);
    EXPECT_LE(ep.iterations, 3u);
  }
}

TEST(EpGaussian, JointMomentsAreConsistent) {
  CounterRng rng(7);
  const auto gmm = adapt(smooth_gmm(rng, 2, 3), Theta{0.5, 0.02, 1.0});
  const auto op = DegradationOperator::conv2d(9, 9, uniform_kernel(3));
  Partition part(9, 9, 3, 1, 2);
  const Vector y = simulate(op, sample_image(rng, 81), NoiseModel::gaussian(0.001), 2);
  EPConfig cfg;
  cfg.max_iters = 4;
  const auto ep = run_ep_gaussian(y, op, 0.001, gmm, part, cfg);
  EXPECT_FALSE(ep.diagonal);
  EXPECT_EQ(ep.failed_blocks, 0u);
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const Matrix prec = ep.q_x0.precision[j] + ep.q_x1.precision[j];
    EXPECT_TRUE(is_spd(ep.q_x0.precision[j]));
    EXPECT_TRUE(is_spd(ep.q_x1.precision[j]));
    EXPECT_LT((prec * ep.cov[j] - Matrix::Identity(prec.rows(), prec.rows())).norm(), 1e-8);
    const Vector h = ep.q_x0.precision[j] * ep.q_x0.mean[j] + ep.q_x1.precision[j] * ep.q_x1.mean[j];
    EXPECT_LT((ep.cov[j] * h - gather(ep.mean, part, j)).norm(), 1e-8 * gather(ep.mean, part, j).norm());
  }
}

TEST(EpGaussian, DeblurringImprovesOnObservation) {
  CounterRng rng(8);
  const auto gmm = adapt(smooth_gmm(rng, 3, 3), Theta{0.5, 0.02, 1.0});
  const auto op = DegradationOperator::conv2d(12, 12, uniform_kernel(3));
  // Draw the truth from the prior itself so the model is well specified.
  Vector x(144);
  Partition part(12, 12, 3, 0, 0);
  const auto prepared = prepare(gmm);
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const Eigen::LLT<Matrix> llt(gmm.cov(1));
    scatter(gmm.mean(1) + llt.matrixL() * testutil::random_vector(rng, 9), part, j, x);
  }
  const Vector y = simulate(op, x, NoiseModel::gaussian(1e-4), 5);
  const auto ep = run_ep_gaussian(y, op, 1e-4, gmm, part, EPConfig{});
  EXPECT_LT((ep.mean - x).norm(), (y - x).norm());
  EXPECT_TRUE((ep.variances.array() > 0).all());
}

TEST(EpGaussian, DampedUpdateIsConvexCombination) {
  Matrix po = Matrix::Identity(2, 2), pn = 3 * Matrix::Identity(2, 2);
  Vector mo = Vector::Constant(2, 1.0), mn = Vector::Constant(2, 2.0);
  detail::damp_into(po, mo, pn, mn, 0.7);
  EXPECT_LT((po - 2.4 * Matrix::Identity(2, 2)).norm(), 1e-15);
  EXPECT_NEAR(mo[0], (0.7 * 6.0 + 0.3 * 1.0) / 2.4, 1e-15);
}

TEST(EpGaussian, RejectsMismatchedInputs) {
  CounterRng rng(9);
  const auto gmm = adapt(smooth_gmm(rng, 2, 2), Theta{});
  const auto op = DegradationOperator::identity(4, 4);
  EXPECT_THROW(run_ep_gaussian(Vector::Zero(15), op, 0.1, gmm, Partition(4, 4, 2, 0, 0), EPConfig{}), InvalidInput);
  EXPECT_THROW(run_ep_gaussian(Vector::Zero(16), op, 0.1, gmm, Partition(4, 4, 4, 0, 0), EPConfig{}), InvalidInput);
  EXPECT_THROW(run_ep_gaussian(Vector::Zero(16), op, -1.0, gmm, Partition(4, 4, 2, 0, 0), EPConfig{}), InvalidInput);
}
