#pragma once

#include <functional>
#include <numeric>

#include "patchep/ep_gaussian.hpp"
#include "patchep/rectified_poisson.hpp"

namespace patchep {

/// Tilted moments of one observation's likelihood in u_n = h_n x against the
/// Gaussian cavity N(mu, c).
using ScalarLikelihood = std::function<TiltedScalar(std::size_t n, double mu, double c)>;

/// Factors on the auxiliary variable u = Hx: q_u0 (diagonal, likelihood side)
/// and q_u1 (isotropic variance c1, link to x).
struct AuxFactors {
  Vector mu0, c0;
  Vector m1;
  double c1 = 1.0;
};

inline constexpr double kEscapeVariance = 1e8;

namespace detail {

/// Damped natural-parameter update of a scalar Gaussian factor (mean, variance).
inline void damp_scalar(double& mean, double& var, double new_mean, double new_var, double eps) {
  if (eps >= 1.0) {
    mean = new_mean;
    var = new_var;
    return;
  }
  const double p = eps / new_var + (1.0 - eps) / var;
  const double h = eps * new_mean / new_var + (1.0 - eps) * mean / var;
  var = 1.0 / p;
  mean = h / p;
}

}  // namespace detail

/// q_u0 update: tilted moments against cavity N(m1_n, c1), variance
/// 1/(1/Var - 1/c1) with negative values replaced by a large variance.
/// Returns the number of such escapes.
inline std::size_t update_q_u0(const ScalarLikelihood& lik, AuxFactors& f, double eps, unsigned threads,
                               std::size_t* fallbacks = nullptr) {
  const auto n = static_cast<std::size_t>(f.mu0.size());
  std::vector<char> escaped(n, 0), fell(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto k = static_cast<Eigen::Index>(i);
    const auto t = lik(i, f.m1[k], f.c1);
    fell[i] = t.fallback;
    const double prec = 1.0 / t.var - 1.0 / f.c1;
    double c0 = kEscapeVariance;
    if (prec > 0.0 && 1.0 / prec < kEscapeVariance) {
      c0 = 1.0 / prec;
    } else {
      escaped[i] = 1;
    }
    const double mu0 = c0 * ((1.0 / c0 + 1.0 / f.c1) * t.mean - f.m1[k] / f.c1);
    detail::damp_scalar(f.mu0[k], f.c0[k], mu0, c0, eps);
  });
  if (fallbacks) *fallbacks = static_cast<std::size_t>(std::accumulate(fell.begin(), fell.end(), 0));
  return static_cast<std::size_t>(std::accumulate(escaped.begin(), escaped.end(), 0));
}

/// q_u1 update from the x-side joint (m*, block Sigma*): tilted variances
/// (1/c0 + 1/s_n)^-1 with s_n = h_n Sigma* h_n', one common c1 fitted over the
/// observed rows, then the means. Rows with s_n <= 0 take their cavity moments.
inline void update_q_u1(const DegradationOperator& op, const Partition& p, const JointMoments& joint, AuxFactors& f,
                        double eps, unsigned threads) {
  const auto n = static_cast<std::size_t>(f.mu0.size());
  Vector e(static_cast<Eigen::Index>(n)), v(static_cast<Eigen::Index>(n));
  std::vector<char> used(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double s = row_quadratic_form(op, i, p, joint.cov);
    if (!(s > 0.0)) {
      e[k] = f.mu0[k];
      v[k] = f.c0[k];
      return;
    }
    const double t = row_dot(op, i, joint.mean);
    v[k] = 1.0 / (1.0 / f.c0[k] + 1.0 / s);
    e[k] = v[k] * (f.mu0[k] / f.c0[k] + t / s);
    used[i] = 1;
  });
  std::vector<double> d, pc;
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) continue;
    d.push_back(v[static_cast<Eigen::Index>(i)]);
    pc.push_back(1.0 / f.c0[static_cast<Eigen::Index>(i)]);
  }
  if (d.empty()) return;
  const double c1 = 1.0 / iso_kl_update(d, pc, 1.0 / f.c1);
  // All elements share c1, so damp the precision once and each mean with it.
  const double p_old = 1.0 / f.c1, p_new = 1.0 / c1;
  const double p_damped = eps * p_new + (1.0 - eps) * p_old;
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double m_new = c1 * ((1.0 / c1 + 1.0 / f.c0[k]) * e[k] - f.mu0[k] / f.c0[k]);
    f.m1[k] = (eps * p_new * m_new + (1.0 - eps) * p_old * f.m1[k]) / p_damped;
  }
  f.c1 = 1.0 / p_damped;
}

/// Q(u) ∝ q_u0(u) q_u1(u), element-wise.
inline void aux_moments(const AuxFactors& f, Vector& mean, Vector& var) {
  var = (f.c0.cwiseInverse().array() + 1.0 / f.c1).inverse().matrix();
  mean = var.cwiseProduct(f.mu0.cwiseQuotient(f.c0) + f.m1 / f.c1);
}

/// Data-augmented EP: q_u0 -> q_x1 -> q_u1 -> q_x0 each iteration, all means
/// initialized to `init_mean` and variances to `init_var` (c1 to their average).
inline EPResult run_ep_augmented(const ScalarLikelihood& lik, const Vector& init_mean, const Vector& init_var,
                                 const DegradationOperator& op, const AdaptedGMM& prior, const Partition& p,
                                 const EPConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(p.pixel_count());
  require(init_mean.size() == n && init_var.size() == n && op.size() == p.pixel_count(),
          "observation, operator and partition sizes differ");
  require((init_var.array() > 0.0).all(), "initial variances must be positive");
  require(prior.dim() == p.patch_dim(), "GMM dimension does not match the patch size");

  const auto shapes = prepare_shapes(prior, p);
  const bool diagonal = cfg.diagonal_for(op);

  EPResult res;
  res.diagonal = diagonal;
  res.q_x0 = diagonal_factor(p, init_mean, init_var);
  res.q_x1 = res.q_x0;
  AuxFactors f{init_mean, init_var, init_mean, init_var.mean()};
  JointMoments prev = joint_moments(p, res.q_x0, res.q_x1, cfg.threads);
  Vector warm = init_mean;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const double eps = (it == 1 && !cfg.damp_first_iteration) ? 1.0 : cfg.damping;
    std::size_t fallbacks = 0;
    const std::size_t escapes = update_q_u0(lik, f, eps, cfg.threads, &fallbacks);
    const GaussianObservation obs{f.c0.cwiseInverse(), f.mu0};
    const auto s1 = update_likelihood_factor(op, obs, p, res.q_x0, res.q_x1, eps, diagonal, cfg,
                                             cfg.rbmc_seed(it), warm);
    update_q_u1(op, p, joint_moments(p, res.q_x0, res.q_x1, cfg.threads), f, eps, cfg.threads);
    const auto s0 = update_prior_factor(p, shapes, res.q_x0, res.q_x1, eps, diagonal, cfg, &res.weights);
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
                 {"c1", f.c1},
                 {"negative_precision_escapes", escapes},
                 {"quadrature_fallbacks", fallbacks},
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
  aux_moments(f, res.u_mean, res.u_variances);
  res.c1 = f.c1;
  res.u0_mean = std::move(f.mu0);
  res.u0_var = std::move(f.c0);
  res.u1_mean = std::move(f.m1);
  return res;
}

/// EP for y ~ Poisson(Hx) under the rectified likelihood, started from y + 1.
inline EPResult run_ep_poisson(const Vector& y, const DegradationOperator& op, const AdaptedGMM& prior,
                               const Partition& p, const EPConfig& cfg) {
  require(y.size() == static_cast<Eigen::Index>(p.pixel_count()), "observation and partition sizes differ");
  for (double v : y) require(v >= 0.0 && std::floor(v) == v, "Poisson observations must be nonnegative integers");
  const ScalarLikelihood lik = [&y](std::size_t n, double mu, double c) {
    return rectified_poisson_tilted(y[static_cast<Eigen::Index>(n)], mu, c);
  };
  const Vector init = y.array() + 1.0;
  return run_ep_augmented(lik, init, init, op, prior, p, cfg);
}

}  // namespace patchep
