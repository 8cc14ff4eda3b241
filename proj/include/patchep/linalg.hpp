#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <string>

#include "patchep/errors.hpp"

namespace patchep {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// Cholesky factor of a symmetric matrix, or nullopt when it is not
/// numerically positive definite.
inline std::optional<Eigen::LLT<Matrix>> try_cholesky(const Matrix& m) {
  if (m.rows() != m.cols() || m.rows() == 0) return std::nullopt;
  if (!m.allFinite()) return std::nullopt;
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) return std::nullopt;
  // LLT accepts some numerically indefinite inputs; reject a degenerate pivot.
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!(l(i, i) > 0.0) || !std::isfinite(l(i, i))) return std::nullopt;
  }
  return llt;
}

inline bool is_spd(const Matrix& m) { return try_cholesky(m).has_value(); }

/// Symmetric factorization with one retry: on failure a jitter of
/// 1e-10 * trace / n is added to the diagonal. Failure after jitter throws.
inline Eigen::LLT<Matrix> spd_factor(const Matrix& m, const std::string& what = "matrix") {
  if (auto llt = try_cholesky(m)) return *llt;
  const double n = static_cast<double>(m.rows());
  double jitter = 1e-10 * std::abs(m.trace()) / std::max(n, 1.0);
  if (!(jitter > 0.0)) jitter = 1e-300;
  Matrix shifted = m;
  shifted.diagonal().array() += jitter;
  if (auto llt = try_cholesky(shifted)) return *llt;
  throw NumericalError(what + " is not symmetric positive definite");
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline Matrix spd_inverse(const Eigen::LLT<Matrix>& llt) {
  const auto n = llt.matrixLLT().rows();
  return symmetrized(llt.solve(Matrix::Identity(n, n)));
}

inline Matrix spd_inverse(const Matrix& m, const std::string& what = "matrix") {
  return spd_inverse(spd_factor(m, what));
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues.
inline Matrix clip_eigenvalues(const Matrix& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m));
  Vector values = eig.eigenvalues().cwiseMax(floor);
  return symmetrized(eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose());
}

}  // namespace patchep
