#pragma once

#include <vector>

#include "patchep/gmm.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

/// Moments of GMM(x) * N(x; m, Omega^-1) for one block.
struct TiltedGMMMoments {
  std::vector<double> weights;      // posterior component probabilities
  std::vector<Vector> comp_means;   // empty unless requested
  std::vector<Matrix> comp_covs;
  Vector mean;
  Matrix cov;
};

// Works in precision form so that nearly flat cavities (tiny Omega entries,
// e.g. masked pixels) stay well conditioned. With A_k = Omega + C_k^-1:
//   C_hat = A_k^-1,  mu_hat = mu_k + A_k^-1 Omega (m - mu_k),
//   log N(m; mu_k, Sigma + C_k) = const - 1/2 [log|C_k| + log|A_k| + (m - mu_k)' C_k^-1 (mu_hat - mu_k)]
// where const collects -1/2 log|Sigma| and is shared by all components.
inline TiltedGMMMoments tilted_gmm_moments_precision(const PreparedGMM& g, const Vector& cavity_mean,
                                                     const Matrix& cavity_precision, bool keep_components = false) {
  const auto d = static_cast<Eigen::Index>(g.dim());
  require(cavity_mean.size() == d && cavity_precision.rows() == d && cavity_precision.cols() == d,
          "cavity block does not match GMM dimension");
  const std::size_t K = g.components();
  std::vector<double> logw(K);
  std::vector<Vector> mu_hat(K);
  std::vector<Matrix> c_hat(K);
  for (std::size_t k = 0; k < K; ++k) {
    const Matrix a = cavity_precision + g.precisions[k];
    const auto llt = spd_factor(a, "tilted GMM precision");
    const Vector r = cavity_mean - g.means[k];
    const Vector shift = llt.solve(cavity_precision * r);
    mu_hat[k] = g.means[k] + shift;
    c_hat[k] = spd_inverse(llt);
    logw[k] = g.log_weights[k] - 0.5 * (g.log_dets[k] + log_det(llt) + r.dot(g.precisions[k] * shift));
  }
  const double norm = log_sum_exp(logw);
  TiltedGMMMoments out;
  out.weights.resize(K);
  out.mean = Vector::Zero(d);
  for (std::size_t k = 0; k < K; ++k) {
    out.weights[k] = std::exp(logw[k] - norm);
    out.mean += out.weights[k] * mu_hat[k];
  }
  out.cov = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < K; ++k) {
    const Vector c = mu_hat[k] - out.mean;
    out.cov += out.weights[k] * (c_hat[k] + c * c.transpose());
  }
  out.cov = symmetrized(out.cov);
  if (keep_components) {
    out.comp_means = std::move(mu_hat);
    out.comp_covs = std::move(c_hat);
  }
  return out;
}

/// Covariance-form entry point.
inline TiltedGMMMoments tilted_gmm_moments(const PreparedGMM& g, const Vector& cavity_mean, const Matrix& cavity_cov,
                                           bool keep_components = false) {
  const auto llt = try_cholesky(cavity_cov);
  require(llt.has_value(), "cavity covariance block is not positive definite");
  return tilted_gmm_moments_precision(g, cavity_mean, spd_inverse(*llt), keep_components);
}

inline TiltedGMMMoments tilted_gmm_moments(const AdaptedGMM& g, const Vector& cavity_mean, const Matrix& cavity_cov,
                                           bool keep_components = false) {
  return tilted_gmm_moments(prepare(g), cavity_mean, cavity_cov, keep_components);
}

}  // namespace patchep
