#pragma once

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <cmath>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/gmm.hpp"
#include "patchep/oracle/dense_reference.hpp"
#include "patchep/tilted_gmm.hpp"

namespace patchep::oracle {

struct NaiveEpOptions {
  double damping = 0.7;
  std::size_t max_sweeps = 50;
  double stop_tol = 1e-8;  // per-pixel squared change of mean and variances
};

struct NaiveEpResult {
  Vector mean, variances;
  Matrix cov;
  std::size_t sweeps = 0;
  bool converged = false;
};

/// EP with J + 1 factors that all carry full N x N Gaussians: the exact
/// Gaussian likelihood and one factor per prior block. Each prior factor is
/// updated sequentially by moment matching the full N-dimensional tilted
/// distribution (cavity and tilted covariances inverted densely). N <= 1024.
inline NaiveEpResult naive_full_ep(const Vector& y, const DegradationOperator& op, double sigma2,
                                   const AdaptedGMM& prior, const Partition& p, const NaiveEpOptions& opt = {}) {
  const std::size_t n = p.pixel_count();
  require(n <= 1024, "naive EP limited to 1024 pixels");
  require(y.size() == static_cast<Eigen::Index>(n) && op.size() == n && sigma2 > 0.0, "naive EP: bad inputs");
  const auto N = static_cast<Eigen::Index>(n);
  const Matrix h = op.dense();
  const auto shapes = prepare_shapes(prior, p);
  const std::size_t J = p.block_count();
  const Matrix eye = Matrix::Identity(N, N);

  // Sites start at the moment-matched prior of each block, embedded in N x N.
  std::vector<Matrix> site_prec(J, Matrix::Zero(N, N));
  std::vector<Vector> site_h(J, Vector::Zero(N));
  Matrix q = h.transpose() * h / sigma2;
  Vector r = h.transpose() * y / sigma2;
  for (std::size_t j = 0; j < J; ++j) {
    const auto& g = shapes[p.shape_id(j)];
    Vector mu = Vector::Zero(static_cast<Eigen::Index>(g.dim()));
    for (std::size_t k = 0; k < g.components(); ++k) mu += std::exp(g.log_weights[k]) * g.means[k];
    Matrix c = Matrix::Zero(mu.size(), mu.size());
    for (std::size_t k = 0; k < g.components(); ++k)
      c += std::exp(g.log_weights[k]) * (g.covs[k] + (g.means[k] - mu) * (g.means[k] - mu).transpose());
    const Matrix lam = spd_inverse(c, "naive EP initial site");
    const Vector eta = lam * mu;
    const auto& idx = p.block(j);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      site_h[j][static_cast<Eigen::Index>(idx[a])] = eta[static_cast<Eigen::Index>(a)];
      for (std::size_t b = 0; b < idx.size(); ++b)
        site_prec[j](static_cast<Eigen::Index>(idx[a]), static_cast<Eigen::Index>(idx[b])) =
            lam(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    q += site_prec[j];
    r += site_h[j];
  }
  auto moments = [&](Matrix& cov, Vector& mean) {
    const Eigen::LLT<Matrix> llt(q);
    if (llt.info() != Eigen::Success) throw NumericalError("naive EP: posterior precision is not positive definite");
    cov = llt.solve(eye);
    mean = cov * r;
  };

  NaiveEpResult res;
  Matrix cov;
  Vector mean;
  moments(cov, mean);
  for (res.sweeps = 1; res.sweeps <= opt.max_sweeps; ++res.sweeps) {
    const Vector mean0 = mean, var0 = cov.diagonal();
    const double eps = res.sweeps == 1 ? 1.0 : opt.damping;
    for (std::size_t j = 0; j < J; ++j) {
      const auto& idx = p.block(j);
      const auto d = static_cast<Eigen::Index>(idx.size());
      // Cavity N(m_c, S_c): remove site j from the full posterior.
      const Matrix cav_prec = symmetrized(q - site_prec[j]);
      const Vector cav_h = r - site_h[j];
      const Eigen::LLT<Matrix> cav_llt(cav_prec);
      if (cav_llt.info() != Eigen::Success) continue;  // improper cavity: skip this site
      const Matrix s_c = cav_llt.solve(eye);
      const Vector m_c = s_c * cav_h;
      // Tilted: GMM_j(x_j) N(x; m_c, S_c), moments via the block marginal.
      Matrix s_cols(N, d);
      for (Eigen::Index a = 0; a < d; ++a) s_cols.col(a) = s_c.col(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(a)]));
      Matrix s_jj(d, d);
      for (Eigen::Index a = 0; a < d; ++a) s_jj.row(a) = s_cols.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(a)]));
      const Vector m_cj = gather(m_c, p, j);
      const auto t = tilted_gmm_moments(shapes[p.shape_id(j)], m_cj, symmetrized(s_jj));
      const Eigen::LLT<Matrix> jj_llt(symmetrized(s_jj));
      const Matrix gain = jj_llt.solve(s_cols.transpose()).transpose();  // S_c[:, j] S_jj^-1
      const Vector m_t = m_c + gain * (t.mean - m_cj);
      const Matrix s_t = symmetrized(s_c + gain * (t.cov - s_jj) * gain.transpose());
      const Eigen::LLT<Matrix> t_llt(s_t);
      if (t_llt.info() != Eigen::Success) continue;
      const Matrix t_prec = t_llt.solve(eye);
      const Matrix new_prec = symmetrized(t_prec - cav_prec);
      const Vector new_h = t_prec * m_t - cav_h;
      // Damped update; shrink the step while the posterior would lose definiteness.
      for (double e = eps; e >= 1e-6; e *= 0.5) {
        const Matrix lam = e * new_prec + (1.0 - e) * site_prec[j];
        const Matrix q_new = cav_prec + lam;
        if (Eigen::LLT<Matrix>(q_new).info() != Eigen::Success) continue;
        site_h[j] = e * new_h + (1.0 - e) * site_h[j];
        site_prec[j] = lam;
        q = q_new;
        r = cav_h + site_h[j];
        break;
      }
    }
    moments(cov, mean);
    const double dm = (mean - mean0).squaredNorm(), dv = (Vector(cov.diagonal()) - var0).squaredNorm();
    if (dm < opt.stop_tol * static_cast<double>(n) && dv < opt.stop_tol * static_cast<double>(n)) {
      res.converged = true;
      break;
    }
  }
  res.sweeps = std::min(res.sweeps, opt.max_sweeps);
  res.mean = mean;
  res.variances = cov.diagonal();
  res.cov = std::move(cov);
  return res;
}

}  // namespace patchep::oracle
