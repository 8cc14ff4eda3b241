#pragma once

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/gmm.hpp"
#include "patchep/operators.hpp"
#include "patchep/partition.hpp"

namespace patchep::oracle {

struct ExactPosterior {
  Vector mean;
  Vector variances;
  std::vector<Matrix> cov;                   // per block
  std::vector<std::vector<double>> weights;  // per block component probabilities
};

/// Exact posterior of y = Hx + n, n ~ N(0, sigma2 I), H diagonal, under the
/// block-independent GMM prior: each block is a GMM posterior, computed here
/// in covariance (Kalman-gain) form on the observed pixels only.
inline ExactPosterior exact_diagonal_gaussian_posterior(const Vector& y, const DegradationOperator& op, double sigma2,
                                                        const AdaptedGMM& prior, const Partition& p) {
  require(op.is_diagonal(), "exact posterior oracle needs a diagonal operator");
  require(sigma2 > 0.0, "noise variance must be positive");
  const Vector hd = op.diagonal();
  ExactPosterior out;
  out.mean.resize(y.size());
  out.variances.resize(y.size());
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto& idx = p.block(j);
    const AdaptedGMM g = idx.size() == prior.dim() ? prior : prior.marginalize(p.shape_of(j));
    const auto m = static_cast<Eigen::Index>(idx.size());
    std::vector<Eigen::Index> obs;
    for (Eigen::Index a = 0; a < m; ++a)
      if (hd[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(a)])] != 0.0) obs.push_back(a);
    const auto o = static_cast<Eigen::Index>(obs.size());
    Matrix hs = Matrix::Zero(o, m);
    Vector yo(o);
    for (Eigen::Index r = 0; r < o; ++r) {
      const auto n = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(obs[static_cast<std::size_t>(r)])]);
      hs(r, obs[static_cast<std::size_t>(r)]) = hd[n];
      yo[r] = y[n];
    }
    const std::size_t K = g.components();
    std::vector<double> logw(K);
    std::vector<Vector> mk(K);
    std::vector<Matrix> ck(K);
    for (std::size_t k = 0; k < K; ++k) {
      if (o == 0) {
        logw[k] = std::log(g.weight(k));
        mk[k] = g.mean(k);
        ck[k] = g.cov(k);
        continue;
      }
      const Matrix s = hs * g.cov(k) * hs.transpose() + sigma2 * Matrix::Identity(o, o);
      const Eigen::LDLT<Matrix> ldlt(s);
      const Vector r = yo - hs * g.mean(k);
      const Matrix gain = ldlt.solve(hs * g.cov(k)).transpose();  // C H' S^-1
      mk[k] = g.mean(k) + gain * r;
      ck[k] = g.cov(k) - gain * hs * g.cov(k);
      ck[k] = 0.5 * (ck[k] + ck[k].transpose()).eval();
      const double logdet = ldlt.vectorD().array().log().sum();
      logw[k] = std::log(g.weight(k)) -
                0.5 * (r.dot(ldlt.solve(r)) + logdet + static_cast<double>(o) * std::log(2.0 * std::numbers::pi));
    }
    double mx = logw[0];
    for (double v : logw) mx = std::max(mx, v);
    std::vector<double> w(K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += (w[k] = std::exp(logw[k] - mx));
    Vector mean = Vector::Zero(m);
    for (std::size_t k = 0; k < K; ++k) mean += (w[k] /= total) * mk[k];
    Matrix cov = Matrix::Zero(m, m);
    for (std::size_t k = 0; k < K; ++k) cov += w[k] * (ck[k] + (mk[k] - mean) * (mk[k] - mean).transpose());
    scatter(mean, p, j, out.mean);
    scatter(Vector(cov.diagonal()), p, j, out.variances);
    out.cov.push_back(cov);
    out.weights.push_back(w);
  }
  return out;
}

}  // namespace patchep::oracle
