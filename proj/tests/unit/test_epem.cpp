#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "patchep/epem.hpp"
#include "patchep/oracle/epem_reference.hpp"
#include "support/helpers.hpp"

using namespace patchep;

namespace {

/// Image whose blocks (of `p`) are drawn from the adapted GMM, with the true labels as weights.
struct Synthetic {
  Vector x;
  std::vector<std::vector<double>> labels;
  std::vector<Matrix> zero_cov;
};

Synthetic sample_blocks(CounterRng& rng, const AdaptedGMM& g, const Partition& p) {
  Synthetic s;
  s.x = Vector::Zero(static_cast<Eigen::Index>(p.pixel_count()));
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto sub = p.block(j).size() == g.dim() ? g : g.marginalize(p.shape_of(j));
    double u = rng.uniform(), acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < sub.components(); ++k)
      if ((acc += sub.weight(k)) > u) break;
    const auto d = static_cast<Eigen::Index>(p.block(j).size());
    const Matrix l = spd_factor(sub.cov(k), "test").matrixL();
    scatter(sub.mean(k) + l * testutil::random_vector(rng, d), p, j, s.x);
    std::vector<double> w(sub.components(), 0.0);
    w[k] = 1.0;
    s.labels.push_back(w);
    s.zero_cov.push_back(Matrix::Zero(d, d));
  }
  return s;
}

}  // namespace

TEST(EpEm, ScalarCostMatchesHandFormula) {
  PatchGMM g;
  g.weights = {1.0};
  g.means = {Vector::Constant(1, 0.4)};
  g.covs = {Matrix::Constant(1, 1, 2.0)};
  Partition part(1, 1, 1, 0, 0);
  const Vector m = Vector::Constant(1, 1.3);
  const std::vector<Matrix> v = {Matrix::Constant(1, 1, 0.25)};
  const Theta th{0.2, 0.5, 1.5};
  const double a = th.s2 + th.alpha * th.alpha * 2.0, b = th.m0 + th.alpha * 0.4;
  const double expect = -0.5 * std::log(2.0 * std::numbers::pi * a) - ((1.3 - b) * (1.3 - b) + 0.25) / (2.0 * a);
  EXPECT_NEAR(e_cost(em_statistics({{1.0}}, m, v, g, part), th), expect, 1e-12);
}

TEST(EpEm, FastCostMatchesDirectEvaluation) {
  CounterRng rng(31);
  const PatchGMM g = testutil::random_gmm(rng, 3, 9, 0.3, 0.05);
  Partition part(10, 8, 3, 1, 2);  // cut blocks on every side
  std::vector<std::vector<double>> w;
  std::vector<Matrix> cov;
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    std::vector<double> wj = {rng.uniform(), rng.uniform(), rng.uniform()};
    const double s = wj[0] + wj[1] + wj[2];
    for (auto& x : wj) x /= s;
    w.push_back(wj);
    cov.push_back(testutil::random_spd(rng, static_cast<Eigen::Index>(part.block(j).size()), 0.3, 0.01));
  }
  const Vector m = Vector::Constant(80, 0.5) + testutil::random_vector(rng, 80, 0.2);
  const auto st = em_statistics(w, m, cov, g, part);
  for (const Theta th : {Theta{0.0, 0.0, 1.0}, Theta{0.5, 0.02, 1.0}, Theta{-0.3, 1.5, 0.2}, Theta{2.0, 1e-6, 7.0}}) {
    const double direct = oracle::direct_e_cost(w, m, cov, g, part, th);
    EXPECT_NEAR(e_cost(st, th), direct, 1e-9 * std::abs(direct));
  }
}

namespace {

/// Blocks of `part` with a random SPD cavity (precision, shift) and a random
/// q_x0; Q(x_j) is their product, as after an EP update.
struct CavityCase {
  std::vector<std::vector<double>> w;
  std::vector<Matrix> cav, q0p, cov;
  std::vector<Vector> h, q0m;
  Vector mean;
};

CavityCase cavity_case(CounterRng& rng, const Partition& part, std::size_t K) {
  CavityCase c;
  c.mean = Vector::Zero(static_cast<Eigen::Index>(part.pixel_count()));
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const auto d = static_cast<Eigen::Index>(part.block(j).size());
    std::vector<double> wj;
    for (std::size_t k = 0; k < K; ++k) wj.push_back(0.1 + rng.uniform());
    double s = 0.0;
    for (double x : wj) s += x;
    for (auto& x : wj) x /= s;
    c.w.push_back(wj);
    c.cav.push_back(testutil::random_spd(rng, d, 0.5, 20.0));
    c.h.push_back(testutil::random_vector(rng, d, 3.0));
    c.q0p.push_back(testutil::random_spd(rng, d, 0.5, 30.0));
    c.q0m.push_back(Vector::Constant(d, 0.4) + testutil::random_vector(rng, d, 0.1));
    c.cov.push_back(spd_inverse(Matrix(c.q0p.back() + c.cav.back())));
    scatter(c.cov.back() * (c.q0p.back() * c.q0m.back() + c.h.back()), part, j, c.mean);
  }
  return c;
}

}  // namespace

TEST(EpEm, ConditionalCostMatchesDirectEvaluation) {
  CounterRng rng(37);
  const PatchGMM g = testutil::random_gmm(rng, 3, 9, 0.3, 0.05);
  Partition part(8, 7, 3, 2, 1);
  const auto c = cavity_case(rng, part, 3);
  const AdaptedGMM prior = adapt(g, Theta{0.4, 0.03, 1.2});
  std::vector<std::vector<Vector>> ms(part.block_count());
  std::vector<std::vector<Matrix>> cs(part.block_count());
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const AdaptedGMM sub = part.block(j).size() == prior.dim() ? prior : prior.marginalize(part.shape_of(j));
    for (std::size_t k = 0; k < 3; ++k) {
      const Matrix pi = sub.cov(k).inverse();
      const Matrix sig = (pi + c.cav[j]).inverse();
      cs[j].push_back(sig);
      ms[j].push_back(sig * (pi * sub.mean(k) + c.h[j]));
    }
  }
  const auto st = em_statistics_conditional(c.w, c.mean, c.cov, c.q0p, c.q0m, prior, part);
  for (const Theta th : {Theta{0.0, 0.0, 1.0}, Theta{0.5, 0.02, 1.3}, Theta{-0.3, 1.5, 0.2}}) {
    const double direct = oracle::direct_e_cost(c.w, ms, cs, g, part, th);
    EXPECT_NEAR(e_cost(st, th), direct, 1e-8 * std::abs(direct));
  }
}

TEST(EpEm, ConditionalEqualsPosteriorForSingleGaussianSite) {
  // K = 1 and q_x0 equal to the prior: x_j | z_j = 1 is Q(x_j) itself.
  CounterRng rng(41);
  const PatchGMM g = testutil::random_gmm(rng, 1, 4, 0.3, 0.05);
  Partition part(6, 6, 2, 1, 0);
  const AdaptedGMM prior = adapt(g, Theta{0.2, 0.01, 0.9});
  auto c = cavity_case(rng, part, 1);
  for (std::size_t j = 0; j < part.block_count(); ++j) {
    const AdaptedGMM sub = part.block(j).size() == prior.dim() ? prior : prior.marginalize(part.shape_of(j));
    c.q0p[j] = sub.cov(0).inverse();
    c.q0m[j] = sub.mean(0);
  }
  const auto a = em_statistics_conditional(c.w, c.mean, c.cov, c.q0p, c.q0m, prior, part);
  const auto b = em_statistics(c.w, c.mean, c.cov, g, part);
  for (const Theta th : {Theta{0.1, 0.02, 1.0}, Theta{0.3, 0.5, 2.0}})
    EXPECT_NEAR(e_cost(a, th), e_cost(b, th), 1e-9 * std::abs(e_cost(b, th)));
}

TEST(EpEm, ConditionalFallsBackWhenCavityIsImproper) {
  // q_x0 far more precise than Q: the cavity has a huge negative precision.
  CounterRng rng(43);
  const PatchGMM g = testutil::random_gmm(rng, 2, 4, 0.3, 0.05);
  Partition part(4, 4, 2, 0, 0);
  const AdaptedGMM prior = adapt(g, Theta{0.2, 0.01, 1.0});
  auto c = cavity_case(rng, part, 2);
  for (auto& q : c.q0p) q = 1e6 * Matrix::Identity(4, 4);
  const auto a = em_statistics_conditional(c.w, c.mean, c.cov, c.q0p, c.q0m, prior, part);
  const auto b = em_statistics(c.w, c.mean, c.cov, g, part);
  const Theta th{0.2, 0.05, 1.1};
  EXPECT_NEAR(e_cost(a, th), e_cost(b, th), 1e-12 * std::abs(e_cost(b, th)));
}

TEST(EpEm, ClosedFormOffsetIsWeightedMean) {
  // K = 1, mu = 0, C = I, s2 = 0, alpha = 1: m0 is the mean of all pixels.
  PatchGMM g;
  g.weights = {1.0};
  g.means = {Vector::Zero(4)};
  g.covs = {Matrix::Identity(4, 4)};
  Partition part(4, 4, 2, 0, 0);
  CounterRng rng(32);
  const Vector m = testutil::random_vector(rng, 16);
  const auto st = em_statistics(std::vector<std::vector<double>>(4, {1.0}), m, std::vector<Matrix>(4, Matrix::Zero(4, 4)),
                                g, part);
  EXPECT_NEAR(optimal_m0(st, 0.0, 1.0), m.mean(), 1e-12);
}

TEST(EpEm, ClosedFormOffsetMaximizesCost) {
  CounterRng rng(33);
  const PatchGMM g = testutil::random_gmm(rng, 2, 4, 0.3, 0.05);
  Partition part(6, 6, 2, 1, 1);
  const auto s = sample_blocks(rng, adapt(g, Theta{0.4, 0.03, 1.2}), part);
  const auto st = em_statistics(s.labels, s.x, s.zero_cov, g, part);
  const double m0 = optimal_m0(st, 0.03, 1.2);
  const double best = e_cost(st, Theta{m0, 0.03, 1.2});
  for (double d : {-1e-3, 1e-3, -0.1, 0.1}) EXPECT_LT(e_cost(st, Theta{m0 + d, 0.03, 1.2}), best);
}

TEST(EpEm, GeneratingThetaWinsOnCoarseGrid) {
  CounterRng rng(34);
  const PatchGMM g = testutil::random_gmm(rng, 3, 4, 0.3, 0.05);
  const Theta truth{0.5, 0.04, 1.5};
  Partition part(64, 64, 2, 0, 0);
  const auto s = sample_blocks(rng, adapt(g, truth), part);
  const auto st = em_statistics(s.labels, s.x, s.zero_cov, g, part);
  const double at_truth = e_cost(st, truth);
  for (double fm : {-0.2, 0.0, 0.2})
    for (double fs : {0.25, 1.0, 4.0})
      for (double fa : {0.5, 1.0, 2.0}) {
        if (fm == 0.0 && fs == 1.0 && fa == 1.0) continue;
        EXPECT_LT(e_cost(st, Theta{truth.m0 + fm, truth.s2 * fs, truth.alpha * fa}), at_truth);
      }
}

TEST(EpEm, MStepRecoversSyntheticTheta) {
  CounterRng rng(35);
  const PatchGMM g = testutil::random_gmm(rng, 3, 4, 0.3, 0.05);
  const Theta truth{0.5, 0.04, 1.5};
  Partition part(64, 64, 2, 0, 0);
  const auto s = sample_blocks(rng, adapt(g, truth), part);
  const auto st = em_statistics(s.labels, s.x, s.zero_cov, g, part);
  const auto r = m_step(st, Theta{0.0, 1.0, 1.0});
  EXPECT_NEAR(r.theta.m0, truth.m0, 0.02);
  EXPECT_NEAR(r.theta.s2 / truth.s2, 1.0, 0.1);
  EXPECT_NEAR(r.theta.alpha / truth.alpha, 1.0, 0.05);
  EXPECT_FALSE(r.at_boundary);
  EXPECT_GE(r.cost, e_cost(st, truth) - 1e-9);
}

TEST(EpEm, MStepNeverDecreasesCost) {
  CounterRng rng(36);
  const PatchGMM g = testutil::random_gmm(rng, 2, 4, 0.3, 0.05);
  Partition part(16, 16, 2, 1, 0);
  const auto s = sample_blocks(rng, adapt(g, Theta{0.1, 0.2, 0.7}), part);
  const auto st = em_statistics(s.labels, s.x, s.zero_cov, g, part);
  for (const Theta start : {Theta{0.0, 1e-8, 1.0}, Theta{3.0, 5.0, 20.0}, Theta{-1.0, 0.01, 0.01}}) {
    MStepOptions one;
    one.max_rounds = 1;
    const auto a = m_step(st, start, one);
    const auto b = m_step(st, a.theta);
    EXPECT_GE(a.cost, e_cost(st, Theta{start.m0, std::max(start.s2, 1e-8), start.alpha}) - 1e-12);
    EXPECT_GE(b.cost, a.cost - 1e-12);
  }
}

TEST(EpEm, FixedAlphaOnlyMovesOffsetAndSpread) {
  CounterRng rng(37);
  const PatchGMM g = testutil::random_gmm(rng, 2, 4, 0.3, 0.05);
  Partition part(16, 16, 2, 0, 0);
  const auto s = sample_blocks(rng, adapt(g, Theta{0.3, 0.1, 1.0}), part);
  const auto st = em_statistics(s.labels, s.x, s.zero_cov, g, part);
  MStepOptions opt;
  opt.estimate_alpha = false;
  const auto r = m_step(st, Theta{0.0, 1.0, 1.0}, opt);
  EXPECT_EQ(r.theta.alpha, 1.0);
  EXPECT_NE(r.theta.m0, 0.0);
  EXPECT_NE(r.theta.s2, 1.0);
}

TEST(EpEm, ScaledWeightsLeaveArgmaxUnchanged) {
  CounterRng rng(38);
  const PatchGMM g = testutil::random_gmm(rng, 2, 4, 0.3, 0.05);
  Partition part(16, 16, 2, 0, 1);
  auto s = sample_blocks(rng, adapt(g, Theta{0.3, 0.1, 0.8}), part);
  const auto a = m_step(em_statistics(s.labels, s.x, s.zero_cov, g, part), Theta{});
  for (auto& w : s.labels)
    for (auto& v : w) v *= 2.0;
  const auto b = m_step(em_statistics(s.labels, s.x, s.zero_cov, g, part), Theta{});
  EXPECT_NEAR(a.theta.m0, b.theta.m0, 1e-6);
  EXPECT_NEAR(a.theta.s2, b.theta.s2, 1e-6 * a.theta.s2);
  EXPECT_NEAR(a.theta.alpha, b.theta.alpha, 1e-6 * a.theta.alpha);
}

TEST(EpEm, GoldenSectionFindsInteriorMaximum) {
  EXPECT_NEAR(golden_section_max([](double x) { return -(x - 0.3) * (x - 0.3); }, -2.0, 5.0, 1e-10), 0.3, 1e-8);
  EXPECT_NEAR(golden_section_max([](double x) { return x; }, -2.0, 5.0, 1e-10), 5.0, 1e-8);
}

TEST(EpEm, RejectsInconsistentInputs) {
  PatchGMM g;
  g.weights = {1.0};
  g.means = {Vector::Zero(4)};
  g.covs = {Matrix::Identity(4, 4)};
  Partition part(4, 4, 2, 0, 0);
  EXPECT_THROW(em_statistics({{1.0}}, Vector::Zero(16), {Matrix::Identity(4, 4)}, g, part), InvalidInput);
  EXPECT_THROW(em_statistics(std::vector<std::vector<double>>(4, {1.0}), Vector::Zero(15),
                             std::vector<Matrix>(4, Matrix::Zero(4, 4)), g, part),
               InvalidInput);
}
