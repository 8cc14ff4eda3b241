#pragma once

#include <Eigen/Cholesky>

#include <vector>

#include "patchep/errors.hpp"
#include "patchep/operators.hpp"
#include "patchep/partition.hpp"

namespace patchep::oracle {

struct DenseMoments {
  Vector mean;
  Matrix cov;  // full N x N
};

/// Exact moments of N(x; Q^-1 rhs, Q^-1) with Q = H' diag(w) H + blockdiag(omega0),
/// assembled and factored densely. N <= 1024.
inline DenseMoments dense_reference_moments(const DegradationOperator& op, const Vector& weights, const Partition& p,
                                            const std::vector<Matrix>& omega0, const Vector& rhs) {
  const std::size_t n = p.pixel_count();
  require(n <= 1024, "dense reference limited to 1024 pixels");
  require(op.size() == n && weights.size() == static_cast<Eigen::Index>(n) && rhs.size() == weights.size() &&
              omega0.size() == p.block_count(),
          "dense reference: inconsistent sizes");
  const Matrix h = op.dense();
  Matrix q = h.transpose() * weights.asDiagonal() * h;
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto& idx = p.block(j);
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = 0; b < idx.size(); ++b)
        q(static_cast<Eigen::Index>(idx[a]), static_cast<Eigen::Index>(idx[b])) +=
            omega0[j](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  }
  const Eigen::LLT<Matrix> llt(q);
  if (llt.info() != Eigen::Success) throw NumericalError("dense reference: precision is not positive definite");
  DenseMoments out;
  out.cov = llt.solve(Matrix::Identity(q.rows(), q.cols()));
  out.mean = llt.solve(rhs);
  return out;
}

/// Block j of a full covariance.
inline Matrix dense_block(const Matrix& cov, const Partition& p, std::size_t j) {
  const auto& idx = p.block(j);
  const auto m = static_cast<Eigen::Index>(idx.size());
  Matrix out(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b)
      out(a, b) = cov(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(a)]),
                      static_cast<Eigen::Index>(idx[static_cast<std::size_t>(b)]));
  return out;
}

}  // namespace patchep::oracle
