#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"
#include "patchep/partition.hpp"

namespace patchep {

/// K-component Gaussian mixture over vectorized patches.
struct PatchGMM {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<Matrix> covs;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : static_cast<std::size_t>(means.front().size()); }

  void validate() const {
    require(!weights.empty(), "GMM needs at least one component");
    require(means.size() == weights.size() && covs.size() == weights.size(), "GMM component arrays differ in length");
    const auto d = static_cast<Eigen::Index>(dim());
    require(d > 0, "GMM dimension must be positive");
    double total = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      require(weights[k] > 0.0 && std::isfinite(weights[k]), "GMM weights must be positive");
      require(means[k].size() == d && means[k].allFinite(), "GMM mean has wrong length or non-finite entries");
      require(covs[k].rows() == d && covs[k].cols() == d, "GMM covariance has wrong shape");
      require(is_spd(covs[k]), "GMM covariance is not positive definite");
      total += weights[k];
    }
    require(std::abs(total - 1.0) <= 1e-12 * static_cast<double>(weights.size()) + 1e-12, "GMM weights must sum to 1");
  }

  /// Restriction to a subset of coordinates (the marginal mixture).
  PatchGMM marginalize(const std::vector<std::size_t>& subset) const {
    require(!subset.empty(), "marginalization subset is empty");
    for (auto i : subset) require(i < dim(), "marginalization index out of range");
    PatchGMM out;
    out.weights = weights;
    const auto m = static_cast<Eigen::Index>(subset.size());
    for (std::size_t k = 0; k < components(); ++k) {
      Vector mu(m);
      Matrix c(m, m);
      for (Eigen::Index a = 0; a < m; ++a) {
        mu[a] = means[k][static_cast<Eigen::Index>(subset[a])];
        for (Eigen::Index b = 0; b < m; ++b)
          c(a, b) = covs[k](static_cast<Eigen::Index>(subset[a]), static_cast<Eigen::Index>(subset[b]));
      }
      out.means.push_back(std::move(mu));
      out.covs.push_back(std::move(c));
    }
    return out;
  }
};

/// Offset / patch-mean variance / scale applied to a trained mixture.
struct Theta {
  double m0 = 0.0;
  double s2 = 0.0;
  double alpha = 1.0;

  bool operator==(const Theta&) const = default;
};

/// GMM with effective means m0*1 + alpha*mu_k and covariances s2*11' + alpha^2*C_k.
class AdaptedGMM {
 public:
  AdaptedGMM(PatchGMM base, Theta theta) : base_(std::move(base)), theta_(theta) {
    require(theta.alpha > 0.0 && std::isfinite(theta.alpha), "alpha must be positive");
    require(theta.s2 >= 0.0 && std::isfinite(theta.s2), "s2 must be non-negative");
    require(std::isfinite(theta.m0), "m0 must be finite");
    const auto d = static_cast<Eigen::Index>(base_.dim());
    for (std::size_t k = 0; k < base_.components(); ++k) {
      means_.push_back(Vector::Constant(d, theta.m0) + theta.alpha * base_.means[k]);
      covs_.push_back(Matrix::Constant(d, d, theta.s2) + theta.alpha * theta.alpha * base_.covs[k]);
    }
  }

  const PatchGMM& base() const { return base_; }
  const Theta& theta() const { return theta_; }
  std::size_t components() const { return base_.components(); }
  std::size_t dim() const { return base_.dim(); }
  double weight(std::size_t k) const { return base_.weights[k]; }
  const Vector& mean(std::size_t k) const { return means_[k]; }
  const Matrix& cov(std::size_t k) const { return covs_[k]; }

  AdaptedGMM marginalize(const std::vector<std::size_t>& subset) const {
    return AdaptedGMM(base_.marginalize(subset), theta_);
  }

 private:
  PatchGMM base_;
  Theta theta_;
  std::vector<Vector> means_;
  std::vector<Matrix> covs_;
};

inline AdaptedGMM adapt(const PatchGMM& gmm, const Theta& theta) { return AdaptedGMM(gmm, theta); }

inline AdaptedGMM marginalize(const AdaptedGMM& gmm, const std::vector<std::size_t>& subset) {
  return gmm.marginalize(subset);
}

/// Component precisions and log-determinants, factored once per mixture.
struct PreparedGMM {
  std::vector<double> log_weights;
  std::vector<Vector> means;
  std::vector<Matrix> covs;
  std::vector<Matrix> precisions;
  std::vector<double> log_dets;

  std::size_t components() const { return means.size(); }
  std::size_t dim() const { return means.empty() ? 0 : static_cast<std::size_t>(means.front().size()); }
};

inline PreparedGMM prepare(const AdaptedGMM& gmm) {
  PreparedGMM out;
  for (std::size_t k = 0; k < gmm.components(); ++k) {
    const auto llt = spd_factor(gmm.cov(k), "adapted GMM covariance");
    out.log_weights.push_back(std::log(gmm.weight(k)));
    out.means.push_back(gmm.mean(k));
    out.covs.push_back(gmm.cov(k));
    out.precisions.push_back(spd_inverse(llt));
    out.log_dets.push_back(log_det(llt));
  }
  return out;
}

/// Prepared (marginalized) priors for every block shape of a partition.
inline std::vector<PreparedGMM> prepare_shapes(const AdaptedGMM& gmm, const Partition& p) {
  require(gmm.dim() == p.patch_dim(), "GMM dimension does not match patch size");
  std::vector<PreparedGMM> out;
  out.reserve(p.shape_count());
  for (std::size_t s = 0; s < p.shape_count(); ++s) {
    const auto& shape = p.shape(s);
    out.push_back(shape.size() == gmm.dim() ? prepare(gmm) : prepare(gmm.marginalize(shape)));
  }
  return out;
}

/// Log density of a Gaussian evaluated with a prepared precision.
inline double gaussian_log_density(const Vector& x, const Vector& mean, const Matrix& precision, double log_det_cov) {
  const Vector d = x - mean;
  return -0.5 * (d.dot(precision * d) + log_det_cov + static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi));
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double gmm_log_density(const PreparedGMM& g, const Vector& x) {
  std::vector<double> terms(g.components());
  for (std::size_t k = 0; k < g.components(); ++k)
    terms[k] = g.log_weights[k] + gaussian_log_density(x, g.means[k], g.precisions[k], g.log_dets[k]);
  return log_sum_exp(terms);
}

}  // namespace patchep
