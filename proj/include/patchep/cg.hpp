#pragma once

#include <cmath>
#include <functional>

#include "patchep/linalg.hpp"

namespace patchep {

struct CgResult {
  Vector x;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
};

/// Preconditioned conjugate gradients for SPD systems given only products.
/// Stops when ||b - Ax|| <= tol ||b||. `x0` warm-starts the iteration.
inline CgResult pcg(const std::function<Vector(const Vector&)>& apply, const Vector& b,
                    const std::function<Vector(const Vector&)>& precondition, const Vector& x0, double tol,
                    std::size_t max_iters) {
  CgResult out;
  out.x = x0.size() == b.size() ? x0 : Vector::Zero(b.size());
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    out.x.setZero();
    out.converged = true;
    return out;
  }
  Vector r = b - apply(out.x);
  double rnorm = r.norm();
  if (rnorm <= tol * bnorm) {
    out.relative_residual = rnorm / bnorm;
    out.converged = true;
    return out;
  }
  Vector z = precondition(r);
  Vector p = z;
  double rz = r.dot(z);
  for (std::size_t it = 0; it < max_iters; ++it) {
    const Vector ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) break;  // lost positive definiteness numerically
    const double a = rz / pap;
    out.x += a * p;
    r -= a * ap;
    out.iterations = it + 1;
    rnorm = r.norm();
    if (rnorm <= tol * bnorm) {
      out.converged = true;
      break;
    }
    z = precondition(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  // Report the true residual rather than the recursively updated one.
  out.relative_residual = (b - apply(out.x)).norm() / bnorm;
  out.converged = out.converged || out.relative_residual <= tol;
  return out;
}

}  // namespace patchep
