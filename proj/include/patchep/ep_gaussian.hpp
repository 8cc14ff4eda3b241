#pragma once

#include <chrono>
#include <memory>

#include "patchep/ep_core.hpp"
#include "patchep/gmm.hpp"
#include "patchep/operators.hpp"

namespace patchep {

/// Output of one EP run for one partition (one expert).
struct EPResult {
  Vector mean;                                 // m*
  Vector variances;                            // diag(Sigma*)
  std::vector<Matrix> cov;                     // blocks of Sigma*
  std::vector<std::vector<double>> weights;    // tilted component probabilities per block
  BlockFactor q_x0, q_x1;
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t failed_blocks = 0;
  bool diagonal = false;

  // Poisson runs only: Q(u) moments and the q_u0 / q_u1 factors.
  Vector u_mean, u_variances;
  Vector u0_mean, u0_var, u1_mean;
  double c1 = 0.0;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Algorithm: alternate the prior-factor and likelihood-factor updates from
/// m = y, Sigma = sigma2 I until the per-pixel squared changes of m* and
/// diag(Sigma*) fall below stop_tol, or max_iters.
inline EPResult run_ep_gaussian(const Vector& y, const DegradationOperator& op, double sigma2, const AdaptedGMM& prior,
                                const Partition& p, const EPConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(p.pixel_count());
  require(y.size() == n && op.size() == p.pixel_count(), "observation, operator and partition sizes differ");
  require(y.allFinite(), "observation must be finite");
  require(sigma2 > 0.0 && std::isfinite(sigma2), "noise variance must be positive");
  require(prior.dim() == p.patch_dim(), "GMM dimension does not match the patch size");

  const auto shapes = prepare_shapes(prior, p);
  const bool diagonal = cfg.diagonal_for(op);
  GaussianObservation obs{Vector::Constant(n, 1.0 / sigma2), y};

  EPResult res;
  res.diagonal = diagonal;
  res.q_x0 = diagonal_factor(p, y, Vector::Constant(n, sigma2));
  res.q_x1 = res.q_x0;
  JointMoments prev = joint_moments(p, res.q_x0, res.q_x1, cfg.threads);
  Vector warm = y;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const double eps = (it == 1 && !cfg.damp_first_iteration) ? 1.0 : cfg.damping;
    const auto s0 = update_prior_factor(p, shapes, res.q_x0, res.q_x1, eps, diagonal, cfg, &res.weights);
    const auto s1 = update_likelihood_factor(op, obs, p, res.q_x0, res.q_x1, eps, diagonal, cfg,
                                             cfg.rbmc_seed(it), warm);
    JointMoments cur = joint_moments(p, res.q_x0, res.q_x1, cfg.threads);
    const double dm = squared_change(cur.mean, prev.mean);
    const double dv = squared_change(cur.variances, prev.variances);
    res.failed_blocks = s0.failures + s1.failures;
    res.iterations = it;
    if (cfg.trace) {
      cfg.trace({{"iteration", it},
                 {"dm2", dm},
                 {"dvar2", dv},
                 {"cg_iterations", s1.cg_iterations},
                 {"cg_residual", s1.cg_residual},
                 {"failed_blocks", res.failed_blocks},
                 {"seconds", detail::seconds_since(t0)}});
    }
    prev = std::move(cur);
    if (dm < cfg.stop_tol * static_cast<double>(n) && dv < cfg.stop_tol * static_cast<double>(n)) {
      res.converged = true;
      break;
    }
  }
  res.mean = std::move(prev.mean);
  res.variances = std::move(prev.variances);
  res.cov = std::move(prev.cov);
  return res;
}

}  // namespace patchep
