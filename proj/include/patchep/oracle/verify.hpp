#pragma once

#include <cmath>
#include <string>

#include "json.hpp"
#include "patchep/ep_gaussian.hpp"
#include "patchep/epem.hpp"
#include "patchep/noise.hpp"
#include "patchep/oracle/brute_force.hpp"
#include "patchep/oracle/dense_reference.hpp"
#include "patchep/oracle/epem_reference.hpp"
#include "patchep/oracle/exact_posterior.hpp"
#include "patchep/oracle/naive_ep.hpp"
#include "patchep/rectified_poisson.hpp"

namespace patchep::oracle {

namespace detail {

inline Vector normal_vector(CounterRng& rng, Eigen::Index n, double scale = 1.0) {
  Vector v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline Matrix random_spd(CounterRng& rng, Eigen::Index n, double shift, double scale) {
  Matrix a(n, n);
  for (auto& x : a.reshaped()) x = rng.normal();
  return symmetrized(scale * (a * a.transpose() / static_cast<double>(n) + shift * Matrix::Identity(n, n)));
}

inline PatchGMM random_gmm(CounterRng& rng, std::size_t K, Eigen::Index dim, double mean_scale, double cov_scale) {
  PatchGMM g;
  for (std::size_t k = 0; k < K; ++k) {
    g.weights.push_back(1.0 / static_cast<double>(K));
    g.means.push_back(normal_vector(rng, dim, mean_scale));
    g.covs.push_back(random_spd(rng, dim, 0.3, cov_scale));
  }
  return g;
}

inline double max_rel(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-12));
  return m;
}

inline double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline nlohmann::json check(const std::string& name, double error, double tol) {
  return {{"name", name}, {"error", error}, {"tolerance", tol}, {"passed", std::isfinite(error) && error <= tol}};
}

}  // namespace detail

/// Runs every oracle comparison at small scale (a few seconds) and returns
/// {"checks": [{name, error, tolerance, passed}], "all_passed": bool}.
inline nlohmann::json run_verification(std::uint64_t seed = 1) {
  nlohmann::json checks = nlohmann::json::array();
  CounterRng rng(seed, 0xC0DE);

  {  // EP vs exact posterior, diagonal operator, well inside the exact regime.
    const PatchGMM g = detail::random_gmm(rng, 3, 4, 0.3, 0.05);
    const AdaptedGMM prior = adapt(g, Theta{0.2, 0.01, 1.0});
    Partition p(12, 12, 2, 1, 1);
    const auto op = DegradationOperator::identity(12, 12);
    const Vector x = Vector::Constant(144, 0.2) + detail::normal_vector(rng, 144, 0.3);
    const double s2 = 0.2;
    const Vector y = simulate(op, x, NoiseModel::gaussian(s2), seed);
    EPConfig cfg;
    cfg.stop_tol = 1e-20;
    cfg.max_iters = 200;
    const auto ep = run_ep_gaussian(y, op, s2, prior, p, cfg);
    const auto ex = exact_diagonal_gaussian_posterior(y, op, s2, prior, p);
    const bool exact_regime = (ex.variances.array() < s2).all();
    checks.push_back(detail::check("ep_gaussian_vs_exact_mean", exact_regime ? detail::max_rel(ep.mean, ex.mean) : NAN, 1e-6));
    checks.push_back(
        detail::check("ep_gaussian_vs_exact_variance", exact_regime ? detail::max_rel(ep.variances, ex.variances) : NAN, 1e-6));
  }
  {  // Rectified-Poisson tilted moments vs brute force.
    double worst = 0.0;
    for (int i = 0; i < 40; ++i) {
      const double y = std::floor(std::exp(7.0 * rng.uniform())) - 1.0;
      const double c = std::exp(6.0 * rng.uniform() - 2.0) * std::max(y, 1.0);
      const double mu = std::max(y, 1.0) * (2.0 * rng.uniform() - 0.5);
      const auto a = rectified_poisson_tilted(y, mu, c);
      const auto b = brute_force_rectified_poisson(y, mu, c, 400001);
      worst = std::max({worst, detail::rel(a.mean, b.mean), detail::rel(a.var, b.var)});
    }
    checks.push_back(detail::check("rectified_poisson_vs_brute_force", worst, 1e-7));
    double zero = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double mu = 10.0 * rng.uniform() - 5.0, c = std::exp(4.0 * rng.uniform() - 2.0);
      const auto a = rectified_poisson_tilted(0.0, mu, c);
      const auto b = brute_force_rectified_poisson(0.0, mu, c, 400001);
      zero = std::max({zero, detail::rel(a.mean, b.mean), detail::rel(a.var, b.var)});
    }
    checks.push_back(detail::check("rectified_zero_closed_form_vs_brute_force", zero, 1e-8));
  }
  {  // Block KL projection reaches the unconstrained optimum.
    const Matrix cav = 0.3 * detail::random_spd(rng, 4, 0.5, 1.0);
    const Matrix target = detail::random_spd(rng, 4, 0.5, 1.0);
    const Matrix cov = (target + cav).inverse();
    BlockKLOptions opt;
    opt.tol = 0.0;
    opt.grad_tol = 1e-11;
    opt.max_iters = 5000;
    const auto r = update_block_precision(cov, cav, Matrix::Identity(4, 4), opt);
    checks.push_back(detail::check("block_kl_unconstrained_optimum", (r.omega - target).norm(), 1e-6));
  }
  {  // Dense reference vs PCG mean; naive EP with one component vs dense exact.
    Partition p(8, 8, 2, 1, 0);
    const auto op = DegradationOperator::conv2d(8, 8, uniform_kernel(3));
    BlockFactor q0;
    for (std::size_t j = 0; j < p.block_count(); ++j) {
      const auto d = static_cast<Eigen::Index>(p.block(j).size());
      q0.precision.push_back(detail::random_spd(rng, d, 0.5, 2.0));
      q0.mean.push_back(detail::normal_vector(rng, d));
    }
    const GaussianObservation obs{Vector::Constant(64, 50.0), detail::normal_vector(rng, 64)};
    EPConfig cfg;
    cfg.cg_tol = 1e-12;
    const auto t = likelihood_tilted_moments(op, obs, p, q0, cfg, seed, 1, Vector());
    const Vector rhs = op.apply_adjoint(obs.weights.cwiseProduct(obs.target)) + precision_times_mean(p, q0);
    const auto ref = dense_reference_moments(op, obs.weights, p, q0.precision, rhs);
    checks.push_back(detail::check("pcg_mean_vs_dense", (t.mean - ref.mean).norm() / ref.mean.norm(), 1e-8));

    const PatchGMM g1 = detail::random_gmm(rng, 1, 4, 0.3, 0.1);
    const AdaptedGMM prior = adapt(g1, Theta{0.2, 0.01, 1.0});
    const Vector y = simulate(op, Vector::Constant(64, 0.4) + detail::normal_vector(rng, 64, 0.1), NoiseModel::gaussian(0.01), seed);
    const auto naive = naive_full_ep(y, op, 0.01, prior, p);
    std::vector<Matrix> omega;
    Vector h = op.apply_adjoint(y) / 0.01;
    for (std::size_t j = 0; j < p.block_count(); ++j) {
      const AdaptedGMM sub = p.block(j).size() == prior.dim() ? prior : prior.marginalize(p.shape_of(j));
      omega.push_back(spd_inverse(sub.cov(0), "verify"));
      scatter(gather(h, p, j) + omega.back() * sub.mean(0), p, j, h);
    }
    const auto exact = dense_reference_moments(op, Vector::Constant(64, 100.0), p, omega, h);
    checks.push_back(detail::check("naive_ep_single_component_vs_exact",
                                   std::max((naive.mean - exact.mean).cwiseAbs().maxCoeff(),
                                            (naive.cov - exact.cov).cwiseAbs().maxCoeff()),
                                   1e-8));
  }
  {  // EP-EM cost: O(1) statistics vs direct evaluation.
    const PatchGMM g = detail::random_gmm(rng, 3, 4, 0.3, 0.05);
    Partition p(7, 6, 2, 1, 1);
    std::vector<std::vector<double>> w;
    std::vector<Matrix> cov;
    for (std::size_t j = 0; j < p.block_count(); ++j) {
      w.push_back({0.2, 0.3, 0.5});
      cov.push_back(detail::random_spd(rng, static_cast<Eigen::Index>(p.block(j).size()), 0.3, 0.01));
    }
    const Vector m = Vector::Constant(42, 0.5) + detail::normal_vector(rng, 42, 0.2);
    const auto st = em_statistics(w, m, cov, g, p);
    double worst = 0.0;
    for (const Theta th : {Theta{0.0, 0.0, 1.0}, Theta{0.5, 0.02, 1.3}, Theta{-0.3, 1.5, 0.2}})
      worst = std::max(worst, detail::rel(e_cost(st, th), direct_e_cost(w, m, cov, g, p, th)));
    checks.push_back(detail::check("epem_cost_vs_direct", worst, 1e-9));
  }
  bool all = true;
  for (const auto& c : checks) all = all && c.at("passed").get<bool>();
  return {{"checks", checks}, {"all_passed", all}};
}

}  // namespace patchep::oracle
