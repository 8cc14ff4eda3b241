#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

inline constexpr double kMinPrecision = 1e-8;

/// -log det(Omega + Omega_cav) + tr((Omega + Omega_cav) Cov_P)
inline double kl_block_loss(const Matrix& omega, const Matrix& omega_cav, const Matrix& cov_p) {
  const Matrix total = omega + omega_cav;
  const auto llt = try_cholesky(total);
  if (!llt) throw NumericalError("kl_block_loss: Omega + Omega_cav is not positive definite");
  return -log_det(*llt) + (total.cwiseProduct(cov_p)).sum();
}

struct BlockKLOptions {
  std::size_t max_iters = 200;
  double tol = 1e-8;            // relative loss change
  double grad_tol = 0.0;        // optional Frobenius gradient stop (0 disables)
  std::size_t max_halvings = 50;
  bool diagonal_only = false;   // keep only the gradient's diagonal
  bool closed_form_when_spd = false; // return Cov_P^-1 - Omega_cav directly when its eigenvalues clear kMinPrecision
};

struct BlockKLResult {
  Matrix omega;
  std::vector<double> losses;   // loss of every accepted iterate, starting with the initial one
  std::size_t iterations = 0;
  bool stalled = false;         // backtracking exhausted
};

// Gradient descent on the loss above with a Barzilai-Borwein initial step and
// halving backtracking; an iterate is accepted only if Omega stays SPD and the
// loss does not increase.
inline BlockKLResult update_block_precision(const Matrix& cov_p, const Matrix& omega_cav, const Matrix& omega_init,
                                            const BlockKLOptions& opt = {}) {
  const auto n = cov_p.rows();
  require(cov_p.cols() == n && omega_cav.rows() == n && omega_cav.cols() == n && omega_init.rows() == n &&
              omega_init.cols() == n,
          "block KL problem has inconsistent dimensions");
  BlockKLResult res;
  Matrix x = symmetrized(omega_init);
  auto gradient = [&](const Eigen::LLT<Matrix>& llt) {
    Matrix g = cov_p - spd_inverse(llt);
    if (opt.diagonal_only) g = Matrix(g.diagonal().asDiagonal());
    return Matrix(symmetrized(g));
  };
  auto total_llt = try_cholesky(x + omega_cav);
  if (!total_llt || !is_spd(x)) throw NumericalError("update_block_precision: initial precision is not SPD");
  double f = -log_det(*total_llt) + ((x + omega_cav).cwiseProduct(cov_p)).sum();
  Matrix g = gradient(*total_llt);
  res.losses.push_back(f);
  if (opt.closed_form_when_spd && !opt.diagonal_only) {
    // The loss is convex with stationary point Cov_P^-1 - Omega_cav; when that is
    // feasible it is the minimizer and no descent is needed.
    if (const auto cp = try_cholesky(cov_p)) {
      const Matrix cand = symmetrized(spd_inverse(*cp) - omega_cav);
      const Eigen::SelfAdjointEigenSolver<Matrix> es(cand, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() >= kMinPrecision) {
        const double f_cand = kl_block_loss(cand, omega_cav, cov_p);
        if (f_cand <= f) {
          res.omega = cand;
          res.losses.push_back(f_cand);
          res.iterations = 1;
        } else {
          res.omega = std::move(x);  // already optimal to rounding
        }
        return res;
      }
    }
  }
  Matrix x_prev, g_prev;
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    if (opt.grad_tol > 0.0 && g.norm() <= opt.grad_tol) break;
    double lambda = 1.0;
    if (it > 0) {
      const Matrix dx = x - x_prev;
      const Matrix dg = g - g_prev;
      const double num = (dx.cwiseProduct(dg)).sum();
      const double den = dg.squaredNorm();
      if (den > 0.0 && num > 0.0 && std::isfinite(num / den)) lambda = num / den;
    }
    bool accepted = false;
    Matrix x_new;
    double f_new = 0.0, delta = 0.0;
    std::optional<Eigen::LLT<Matrix>> llt_new;
    for (std::size_t h = 0; h <= opt.max_halvings; ++h, lambda *= 0.5) {
      x_new = symmetrized(x - lambda * g);
      if (!is_spd(x_new)) continue;
      llt_new = try_cholesky(x_new + omega_cav);
      if (!llt_new) continue;
      // Loss change evaluated directly, -log det(I + L^-1 D L^-T) + <D, Cov_P>,
      // so steps far below the loss's rounding level are still ranked correctly.
      const Matrix step = x_new - x;
      const Matrix lower = total_llt->matrixL();
      Matrix m = lower.triangularView<Eigen::Lower>().solve(step);
      m = lower.triangularView<Eigen::Lower>().solve(Matrix(m.transpose()));
      const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(m), Eigen::EigenvaluesOnly);
      delta = (step.cwiseProduct(cov_p)).sum();
      bool feasible = true;
      for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        if (!(es.eigenvalues()[i] > -1.0)) feasible = false;
        else delta -= std::log1p(es.eigenvalues()[i]);
      }
      f_new = f + delta;
      if (feasible && std::isfinite(delta) && delta <= 0.0) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      res.stalled = true;
      break;
    }
    x_prev = std::move(x);
    g_prev = std::move(g);
    x = std::move(x_new);
    total_llt = std::move(llt_new);
    g = gradient(*total_llt);
    const double change = std::abs(delta);
    f = f_new;
    res.losses.push_back(f);
    res.iterations = it + 1;
    if (change <= opt.tol * std::max(std::abs(f), 1.0)) break;
  }
  res.omega = std::move(x);
  return res;
}

/// Per-element optimum 1/d - p_cav, floored at a small positive precision.
inline double diag_kl_update(double d, double p_cav) {
  require(d > 0.0 && std::isfinite(d), "diag_kl_update: tilted variance must be positive");
  const double p = 1.0 / d - p_cav;
  return p > kMinPrecision ? p : kMinPrecision;
}

/// Common precision p minimizing sum_n -log(p + p_n) + (p + p_n) d_n, by Newton-Raphson.
inline double iso_kl_update(const std::vector<double>& d, const std::vector<double>& p_cav, double p_init) {
  require(d.size() == p_cav.size() && !d.empty(), "iso_kl_update: inputs must be non-empty and equally long");
  double sum_d = 0.0;
  for (double v : d) {
    require(v > 0.0 && std::isfinite(v), "iso_kl_update: tilted variances must be positive");
    sum_d += v;
  }
  double p = std::max(std::isfinite(p_init) ? p_init : 1.0, kMinPrecision);
  for (int it = 0; it < 100; ++it) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t n = 0; n < d.size(); ++n) {
      const double inv = 1.0 / (p + p_cav[n]);
      s1 += inv;
      s2 += inv * inv;
    }
    const double next = std::max(p + (s1 - sum_d) / s2, kMinPrecision);
    const double rel = std::abs(next - p) / p;
    p = next;
    if (rel < 1e-10) break;
  }
  return p;
}

/// Omega_i^-1 ((Omega_i + Omega_cav) E_P - Omega_cav m_cav)
inline Vector factor_mean_update(const Vector& tilted_mean, const Matrix& omega_i, const Matrix& omega_cav,
                                 const Vector& cavity_mean) {
  const auto llt = try_cholesky(omega_i);
  if (!llt) throw NumericalError("factor_mean_update: factor precision is singular");
  return llt->solve((omega_i + omega_cav) * tilted_mean - omega_cav * cavity_mean);
}

}  // namespace patchep
