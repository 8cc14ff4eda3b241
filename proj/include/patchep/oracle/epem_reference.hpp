#pragma once

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>
#include <vector>

#include "patchep/gmm.hpp"
#include "patchep/partition.hpp"

namespace patchep::oracle {

/// E-step cost evaluated term by term: for every block and component, the
/// expected Gaussian log-density under N(m_j, Sigma_j), with an explicit
/// factorization of s2 11' + alpha^2 C_k.
inline double direct_e_cost(const std::vector<std::vector<double>>& weights, const Vector& mean,
                            const std::vector<Matrix>& cov, const PatchGMM& base, const Partition& p,
                            const Theta& th) {
  double c = 0.0;
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto& shape = p.shape_of(j);
    const PatchGMM g = shape.size() == base.dim() ? base : base.marginalize(shape);
    const auto d = static_cast<Eigen::Index>(shape.size());
    Vector mj(d);
    for (Eigen::Index a = 0; a < d; ++a) mj[a] = mean[static_cast<Eigen::Index>(p.block(j)[static_cast<std::size_t>(a)])];
    for (std::size_t k = 0; k < g.components(); ++k) {
      const Matrix a = Matrix::Constant(d, d, th.s2) + th.alpha * th.alpha * g.covs[k];
      const Eigen::LDLT<Matrix> ldlt(a);
      const Vector r = mj - Vector::Constant(d, th.m0) - th.alpha * g.means[k];
      const double logdet = ldlt.vectorD().array().log().sum();
      const double tr = ldlt.solve(cov[j]).trace();
      c += weights[j][k] *
           (-0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + logdet + tr + r.dot(ldlt.solve(r))));
    }
  }
  return c;
}

/// Same cost with component k of block j scored under N(means[j][k], covs[j][k]).
inline double direct_e_cost(const std::vector<std::vector<double>>& weights,
                            const std::vector<std::vector<Vector>>& means, const std::vector<std::vector<Matrix>>& covs,
                            const PatchGMM& base, const Partition& p, const Theta& th) {
  double c = 0.0;
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto& shape = p.shape_of(j);
    const PatchGMM g = shape.size() == base.dim() ? base : base.marginalize(shape);
    const auto d = static_cast<Eigen::Index>(shape.size());
    for (std::size_t k = 0; k < g.components(); ++k) {
      const Matrix a = Matrix::Constant(d, d, th.s2) + th.alpha * th.alpha * g.covs[k];
      const Eigen::LDLT<Matrix> ldlt(a);
      const Vector r = means[j][k] - Vector::Constant(d, th.m0) - th.alpha * g.means[k];
      const double logdet = ldlt.vectorD().array().log().sum();
      c += weights[j][k] * (-0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + logdet +
                                    ldlt.solve(covs[j][k]).trace() + r.dot(ldlt.solve(r))));
    }
  }
  return c;
}

}  // namespace patchep::oracle
