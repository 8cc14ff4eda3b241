#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "patchep/cg.hpp"
#include "patchep/ep_config.hpp"
#include "patchep/gmm.hpp"
#include "patchep/kl_updates.hpp"
#include "patchep/linalg.hpp"
#include "patchep/operators.hpp"
#include "patchep/parallel.hpp"
#include "patchep/partition.hpp"
#include "patchep/random.hpp"
#include "patchep/tilted_gmm.hpp"

// Shared machinery of the Gaussian and Poisson EP loops: block-structured
// factors over x, their joint moments, the GMM-prior factor update and the
// Gaussian-likelihood factor update (CG mean + RBMC block covariances).

namespace patchep {

/// One Gaussian EP factor over x, stored per block of a partition as
/// (precision, mean). Diagonal factors simply keep diagonal blocks.
struct BlockFactor {
  std::vector<Matrix> precision;
  std::vector<Vector> mean;
};

/// Moments of Q(x) = q_x0 q_x1 restricted to the block diagonal.
struct JointMoments {
  Vector mean;
  Vector variances;
  std::vector<Matrix> cov;
};

/// Observation model as seen by q_x1: N(target; Hx, diag(1/weights)).
/// Gaussian noise: weights = 1/sigma2, target = y. Poisson: q_u0's moments.
struct GaussianObservation {
  Vector weights;
  Vector target;
};

/// Moments of q_x0(x) N(target; Hx, W^-1), the tilted distribution of q_x1.
struct LikelihoodTilted {
  Vector mean;
  std::vector<Matrix> cov;
  CgResult cg;  // mean solve (empty for diagonal operators)
  std::size_t sample_cg_iterations = 0;
};

struct UpdateStats {
  std::size_t failures = 0;
  std::size_t cg_iterations = 0;
  double cg_residual = 0.0;
  bool cg_converged = true;
};

inline BlockFactor diagonal_factor(const Partition& p, const Vector& mean, const Vector& variances) {
  BlockFactor f;
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const Vector v = gather(variances, p, j);
    require((v.array() > 0.0).all(), "factor variances must be positive");
    f.precision.push_back(Matrix(v.cwiseInverse().asDiagonal()));
    f.mean.push_back(gather(mean, p, j));
  }
  return f;
}

/// Global vector of Omega m.
inline Vector precision_times_mean(const Partition& p, const BlockFactor& f) {
  Vector out(static_cast<Eigen::Index>(p.pixel_count()));
  for (std::size_t j = 0; j < p.block_count(); ++j) scatter(f.precision[j] * f.mean[j], p, j, out);
  return out;
}

/// blockdiag(m_j) v without per-block allocations.
inline Vector block_matvec(const Partition& p, const std::vector<Matrix>& m, const Vector& v) {
  Vector out(v.size()), a(static_cast<Eigen::Index>(p.max_block_size())), b(a.size());
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const auto& idx = p.block(j);
    const auto d = static_cast<Eigen::Index>(idx.size());
    for (Eigen::Index i = 0; i < d; ++i) a[i] = v[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)])];
    b.head(d).noalias() = m[j] * a.head(d);
    for (Eigen::Index i = 0; i < d; ++i) out[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)])] = b[i];
  }
  return out;
}

inline Vector apply_precision(const Partition& p, const BlockFactor& f, const Vector& v) {
  return block_matvec(p, f.precision, v);
}

inline Vector factor_mean(const Partition& p, const BlockFactor& f) {
  Vector out(static_cast<Eigen::Index>(p.pixel_count()));
  for (std::size_t j = 0; j < p.block_count(); ++j) scatter(f.mean[j], p, j, out);
  return out;
}

inline JointMoments joint_moments(const Partition& p, const BlockFactor& q0, const BlockFactor& q1, unsigned threads) {
  JointMoments out;
  const auto n = static_cast<Eigen::Index>(p.pixel_count());
  out.mean.resize(n);
  out.variances.resize(n);
  out.cov.resize(p.block_count());
  parallel_for(p.block_count(), threads, [&](std::size_t j) {
    const auto llt = spd_factor(q0.precision[j] + q1.precision[j], "joint block precision");
    out.cov[j] = spd_inverse(llt);
  });
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    const Vector h = q0.precision[j] * q0.mean[j] + q1.precision[j] * q1.mean[j];
    scatter(out.cov[j] * h, p, j, out.mean);
    scatter(Vector(out.cov[j].diagonal()), p, j, out.variances);
  }
  return out;
}

namespace detail {

inline bool is_diagonal_matrix(const Matrix& m) {
  return (m - Matrix(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
}

/// Convex combination eps * new + (1 - eps) * old in (Omega, Omega m).
inline void damp_into(Matrix& prec, Vector& mean, const Matrix& new_prec, const Vector& new_mean, double eps) {
  if (eps >= 1.0) {
    prec = new_prec;
    mean = new_mean;
    return;
  }
  const Vector h = eps * (new_prec * new_mean) + (1.0 - eps) * (prec * mean);
  const Matrix p = symmetrized(eps * new_prec + (1.0 - eps) * prec);
  mean = spd_factor(p, "damped precision").solve(h);
  prec = p;
}

/// Projects a tilted covariance onto the factor family given the cavity:
/// diagonal closed form or block gradient descent, then the mean update.
inline void project_block(const Matrix& tilted_cov, const Vector& tilted_mean, const Matrix& cav_prec,
                          const Vector& cav_mean, bool diagonal, const BlockKLOptions& kl, const Matrix& old_prec,
                          Matrix& new_prec, Vector& new_mean) {
  if (diagonal) {
    const auto m = tilted_cov.rows();
    Vector p(m), mu(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      p[i] = diag_kl_update(tilted_cov(i, i), cav_prec(i, i));
      mu[i] = ((p[i] + cav_prec(i, i)) * tilted_mean[i] - cav_prec(i, i) * cav_mean[i]) / p[i];
    }
    new_prec = p.asDiagonal();
    new_mean = mu;
    return;
  }
  new_prec = update_block_precision(tilted_cov, cav_prec, old_prec, kl).omega;
  new_mean = factor_mean_update(tilted_mean, new_prec, cav_prec, cav_mean);
}

}  // namespace detail

/// EP update of the prior factor q_x0 with cavity q_x1 (one tilted GMM per
/// block). Blocks whose update fails numerically keep their old value.
/// Stores the tilted component probabilities in `weights` when non-null.
inline UpdateStats update_prior_factor(const Partition& p, const std::vector<PreparedGMM>& shapes, BlockFactor& q0,
                                       const BlockFactor& q1, double eps, bool diagonal, const EPConfig& cfg,
                                       std::vector<std::vector<double>>* weights = nullptr) {
  const std::size_t J = p.block_count();
  std::vector<char> failed(J, 0);
  if (weights) weights->resize(J);
  parallel_for(J, cfg.threads, [&](std::size_t j) {
    try {
      const auto t = tilted_gmm_moments_precision(shapes[p.shape_id(j)], q1.mean[j], q1.precision[j]);
      Matrix prec;
      Vector mean;
      detail::project_block(t.cov, t.mean, q1.precision[j], q1.mean[j], diagonal, cfg.block_kl, q0.precision[j], prec,
                            mean);
      require(prec.allFinite() && mean.allFinite(), "non-finite prior factor block");
      detail::damp_into(q0.precision[j], q0.mean[j], prec, mean, eps);
      if (weights) (*weights)[j] = t.weights;
    } catch (const std::exception&) {
      failed[j] = 1;
    }
  });
  UpdateStats st;
  for (char f : failed) st.failures += static_cast<std::size_t>(f);
  return st;
}

/// Moments of q_x0(x) N(target; Hx, W^-1). Diagonal operators are handled
/// exactly per block; otherwise the mean comes from block-Jacobi PCG and the
/// block covariances from Rao-Blackwellized Monte Carlo with `samples` draws.
inline LikelihoodTilted likelihood_tilted_moments(const DegradationOperator& op, const GaussianObservation& obs,
                                                  const Partition& p, const BlockFactor& q0, const EPConfig& cfg,
                                                  std::uint64_t seed, std::size_t samples, const Vector& warm_start) {
  const std::size_t J = p.block_count();
  LikelihoodTilted out;
  out.cov.resize(J);
  const Vector h0 = precision_times_mean(p, q0);
  if (op.is_diagonal()) {
    const Vector hd = op.diagonal();
    const Vector d = obs.weights.cwiseProduct(hd.cwiseAbs2());
    const Vector rhs = hd.cwiseProduct(obs.weights).cwiseProduct(obs.target) + h0;
    out.mean.resize(rhs.size());
    for (std::size_t j = 0; j < J; ++j) {
      Matrix q = q0.precision[j];
      q.diagonal() += gather(d, p, j);
      const auto llt = spd_factor(q, "tilted likelihood block");
      out.cov[j] = spd_inverse(llt);
      scatter(llt.solve(gather(rhs, p, j)), p, j, out.mean);
    }
    out.cg.converged = true;
    return out;
  }

  // Q = H' W H + Omega_0 and its diagonal blocks (preconditioner and RBMC).
  std::vector<Eigen::LLT<Matrix>> qjj(J);
  std::vector<Matrix> qjj_mat(J), qjj_inv(J);
  parallel_for(J, cfg.threads, [&](std::size_t j) {
    qjj_mat[j] = gram_block(op, obs.weights, p, j) + q0.precision[j];
    qjj[j] = spd_factor(qjj_mat[j], "likelihood block precision");
    qjj_inv[j] = spd_inverse(qjj[j]);
  });
  auto apply_q = [&](const Vector& v) -> Vector {
    return op.apply_adjoint(obs.weights.cwiseProduct(op.apply(v))) + apply_precision(p, q0, v);
  };
  auto precond = [&](const Vector& r) -> Vector { return block_matvec(p, qjj_inv, r); };
  const Vector rhs = op.apply_adjoint(obs.weights.cwiseProduct(obs.target)) + h0;
  out.cg = pcg(apply_q, rhs, precond, warm_start, cfg.cg_tol, cfg.cg_max_iters);
  out.mean = out.cg.x;

  // x ~ N(0, Q^-1) from w = H' W^1/2 e1 + L0 e2, Q x = w.
  std::vector<Matrix> l0(J);
  for (std::size_t j = 0; j < J; ++j) l0[j] = spd_factor(q0.precision[j], "prior factor precision").matrixL();
  const Vector sqrt_w = obs.weights.cwiseSqrt();
  const auto n = static_cast<Eigen::Index>(p.pixel_count());
  std::vector<Vector> xs(samples), qxs(samples);
  std::vector<std::size_t> iters(samples, 0);
  parallel_for(samples, cfg.threads, [&](std::size_t s) {
    CounterRng rng(seed, s);
    Vector e1(n), e2(n);
    for (Eigen::Index i = 0; i < n; ++i) e1[i] = rng.normal();
    for (Eigen::Index i = 0; i < n; ++i) e2[i] = rng.normal();
    Vector w = op.apply_adjoint(sqrt_w.cwiseProduct(e1));
    for (std::size_t j = 0; j < J; ++j) scatter(gather(w, p, j) + l0[j] * gather(e2, p, j), p, j, w);
    const auto sol = pcg(apply_q, w, precond, Vector(), cfg.cg_tol, cfg.cg_max_iters);
    xs[s] = sol.x;
    qxs[s] = apply_q(sol.x);
    iters[s] = sol.iterations;
  });
  for (auto it : iters) out.sample_cg_iterations += it;

  parallel_for(J, cfg.threads, [&](std::size_t j) {
    const auto m = qjj_mat[j].rows();
    Matrix acc = Matrix::Zero(m, m);
    for (std::size_t s = 0; s < samples; ++s) {
      const Vector v = gather(qxs[s], p, j) - qjj_mat[j] * gather(xs[s], p, j);
      acc.noalias() += v * v.transpose();
    }
    const Matrix& inv = qjj_inv[j];
    const Matrix cov = inv + inv * (acc / static_cast<double>(samples)) * inv;
    out.cov[j] = clip_eigenvalues(cov, 1e-10);
  });
  return out;
}

/// EP update of the likelihood factor q_x1 with cavity q_x0. For diagonal
/// operators the factor is set directly to the likelihood (H'WH diagonal),
/// with the 1e-8 precision floor on pixels that carry no data.
inline UpdateStats update_likelihood_factor(const DegradationOperator& op, const GaussianObservation& obs,
                                            const Partition& p, const BlockFactor& q0, BlockFactor& q1, double eps,
                                            bool diagonal, const EPConfig& cfg, std::uint64_t seed, Vector& warm_start) {
  const std::size_t J = p.block_count();
  UpdateStats st;
  if (op.is_diagonal()) {
    const Vector hd = op.diagonal();
    for (std::size_t j = 0; j < J; ++j) {
      const auto& idx = p.block(j);
      const auto m = static_cast<Eigen::Index>(idx.size());
      Vector prec(m), mean = q1.mean[j];
      for (Eigen::Index a = 0; a < m; ++a) {
        const auto n = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(a)]);
        if (hd[n] != 0.0) {
          prec[a] = std::max(obs.weights[n] * hd[n] * hd[n], kMinPrecision);
          mean[a] = obs.target[n] / hd[n];
        } else {
          prec[a] = kMinPrecision;  // no data: keep the old mean
        }
      }
      detail::damp_into(q1.precision[j], q1.mean[j], Matrix(prec.asDiagonal()), mean, eps);
    }
    return st;
  }
  const auto tilted = likelihood_tilted_moments(op, obs, p, q0, cfg, seed, cfg.rbmc_samples, warm_start);
  warm_start = tilted.mean;
  st.cg_iterations = tilted.cg.iterations + tilted.sample_cg_iterations;
  st.cg_residual = tilted.cg.relative_residual;
  st.cg_converged = tilted.cg.converged;
  std::vector<char> failed(J, 0);
  parallel_for(J, cfg.threads, [&](std::size_t j) {
    try {
      Matrix prec;
      Vector mean;
      detail::project_block(tilted.cov[j], gather(tilted.mean, p, j), q0.precision[j], q0.mean[j], diagonal,
                            cfg.block_kl, q1.precision[j], prec, mean);
      require(prec.allFinite() && mean.allFinite(), "non-finite likelihood factor block");
      detail::damp_into(q1.precision[j], q1.mean[j], prec, mean, eps);
    } catch (const std::exception&) {
      failed[j] = 1;
    }
  });
  for (char f : failed) st.failures += static_cast<std::size_t>(f);
  return st;
}

inline double squared_change(const Vector& a, const Vector& b) { return (a - b).squaredNorm(); }

}  // namespace patchep
