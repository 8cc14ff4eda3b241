#pragma once

#include <Eigen/Cholesky>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/gmm.hpp"
#include "patchep/operators.hpp"
#include "patchep/random.hpp"

namespace patchep::oracle {

/// log p(y_n | u_n) for the observation of row n.
using PixelLogLikelihood = std::function<double(std::size_t n, double u)>;

struct McmcOptions {
  std::size_t samples = 1000000;  // sweeps kept after burn-in
  std::size_t burn_in = 0;        // 0 = samples / 10
  std::size_t batches = 100;      // batch means for the standard errors
  std::uint64_t seed = 7;
};

/// Per-pixel Gaussian stand-in N(mean_n, 1/precision_n) for p(y_n | u_n),
/// used only to build mode-jumping proposals (precision 0 = unobserved).
struct PixelGaussianApprox {
  Vector mean, precision;
};

struct McmcMoments {
  Vector mean, variances, std_error;
  double acceptance = 0.0;
  double jump_acceptance = 0.0;  // independence moves, when enabled
};

namespace detail {

/// GMM log density with its own factorizations (kept apart from the EP path).
struct BlockDensity {
  std::vector<double> log_w;
  std::vector<Vector> mu;
  std::vector<Eigen::LLT<Matrix>> llt;
  std::vector<double> log_norm;

  explicit BlockDensity(const AdaptedGMM& g) {
    for (std::size_t k = 0; k < g.components(); ++k) {
      log_w.push_back(std::log(g.weight(k)));
      mu.push_back(g.mean(k));
      llt.emplace_back(g.cov(k));
      if (llt.back().info() != Eigen::Success) throw NumericalError("MCMC: GMM covariance is not positive definite");
      const Matrix l = llt.back().matrixL();
      log_norm.push_back(-l.diagonal().array().log().sum() -
                         0.5 * static_cast<double>(g.dim()) * std::log(2.0 * std::numbers::pi));
    }
  }

  double operator()(const Vector& x) const {
    double top = -std::numeric_limits<double>::infinity();
    std::vector<double> t(mu.size());
    for (std::size_t k = 0; k < mu.size(); ++k) {
      const Vector z = llt[k].matrixL().solve(x - mu[k]);
      t[k] = log_w[k] + log_norm[k] - 0.5 * z.squaredNorm();
      top = std::max(top, t[k]);
    }
    double s = 0.0;
    for (double v : t) s += std::exp(v - top);
    return top + std::log(s);
  }
};

/// Mixture proposal for one block: component k's prior times the Gaussian
/// stand-in of the likelihood, weighted by its evidence.
struct JumpProposal {
  std::vector<double> log_w;
  std::vector<Vector> mean;
  std::vector<Eigen::LLT<Matrix>> llt;  // of the covariance
  std::vector<double> log_norm;

  JumpProposal(const AdaptedGMM& g, const Vector& lik_prec, const Vector& lik_h) {
    const auto d = static_cast<Eigen::Index>(g.dim());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < g.components(); ++k) {
      const Eigen::LLT<Matrix> a(g.cov(k));
      const Matrix lam = a.solve(Matrix::Identity(d, d));
      const Eigen::LLT<Matrix> post(Matrix(lam + Matrix(lik_prec.asDiagonal())));
      const Vector eta = lam * g.mean(k);
      const Vector m = post.solve(eta + lik_h);
      const Matrix cov = post.solve(Matrix::Identity(d, d));
      llt.emplace_back(0.5 * (cov + cov.transpose()));
      if (a.info() != Eigen::Success || post.info() != Eigen::Success || llt.back().info() != Eigen::Success)
        throw NumericalError("MCMC: jump proposal is not positive definite");
      const double ld_a = 2.0 * Matrix(a.matrixL()).diagonal().array().log().sum();
      const double ld_post = 2.0 * Matrix(post.matrixL()).diagonal().array().log().sum();
      log_w.push_back(std::log(g.weight(k)) - 0.5 * ld_a - 0.5 * ld_post - 0.5 * g.mean(k).dot(eta) +
                      0.5 * m.dot(eta + lik_h));
      top = std::max(top, log_w.back());
      mean.push_back(m);
      const Matrix l = llt.back().matrixL();
      log_norm.push_back(-l.diagonal().array().log().sum() - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
    }
    double s = 0.0;
    for (double v : log_w) s += std::exp(v - top);
    for (auto& v : log_w) v -= top + std::log(s);
  }

  double log_density(const Vector& x) const {
    double top = -std::numeric_limits<double>::infinity();
    std::vector<double> t(mean.size());
    for (std::size_t k = 0; k < mean.size(); ++k) {
      t[k] = log_w[k] + log_norm[k] - 0.5 * llt[k].matrixL().solve(x - mean[k]).squaredNorm();
      top = std::max(top, t[k]);
    }
    double s = 0.0;
    for (double v : t) s += std::exp(v - top);
    return top + std::log(s);
  }

  Vector draw(CounterRng& rng) const {
    double u = rng.uniform(), acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < mean.size(); ++k)
      if ((acc += std::exp(log_w[k])) > u) break;
    Vector e(mean[k].size());
    for (auto& v : e) v = rng.normal();
    return mean[k] + llt[k].matrixL() * e;
  }
};

}  // namespace detail

/// Metropolis-within-Gibbs on the exact posterior prod_n p(y_n | (Hx)_n) prod_j GMM_j(x_j):
/// one Gaussian random-walk proposal per block and sweep. Proposal covariances
/// are tuned during burn-in only (scaled empirical block covariance, aiming at
/// ~25% acceptance) and frozen afterwards. With `approx` (diagonal operators
/// only) every sweep also makes one independence move per block from a
/// mixture built on that stand-in, so the chain can jump between mixture
/// components. Standard errors by batch means.
inline McmcMoments mcmc_reference(const PixelLogLikelihood& loglik, const DegradationOperator& op,
                                  const AdaptedGMM& prior, const Partition& p, const Vector& start,
                                  const McmcOptions& opt = {}, const PixelGaussianApprox* approx = nullptr) {
  const std::size_t n = p.pixel_count();
  require(n <= 4096, "MCMC reference is meant for small images");
  require(op.size() == n && start.size() == static_cast<Eigen::Index>(n), "MCMC: inconsistent sizes");
  require(opt.samples >= opt.batches && opt.batches >= 2, "MCMC: need at least two batches");
  const std::size_t J = p.block_count();
  std::vector<detail::BlockDensity> dens;
  for (std::size_t s = 0; s < p.shape_count(); ++s)
    dens.emplace_back(p.shape(s).size() == prior.dim() ? prior : prior.marginalize(p.shape(s)));

  // Rows touched by each block, and per block the column entries.
  Vector x = start, u = op.apply(start);
  std::vector<std::vector<std::size_t>> rows(J);
  for (std::size_t j = 0; j < J; ++j) {
    std::vector<char> seen(n, 0);
    for (auto px : p.block(j))
      for (const auto& [r, v] : op.column(px))
        if (!seen[r]) seen[r] = 1, rows[j].push_back(r);
  }
  auto block_target = [&](std::size_t j, const Vector& xj, const Vector& uu) {
    double l = dens[p.shape_id(j)](xj);
    for (auto r : rows[j]) l += loglik(r, uu[static_cast<Eigen::Index>(r)]);
    return l;
  };

  std::vector<detail::JumpProposal> jumps;
  if (approx) {
    require(op.is_diagonal(), "MCMC: jump proposals need a diagonal operator");
    require(approx->mean.size() == static_cast<Eigen::Index>(n) && approx->precision.size() == static_cast<Eigen::Index>(n),
            "MCMC: likelihood stand-in has the wrong size");
    const Vector h = op.diagonal();
    for (std::size_t j = 0; j < J; ++j) {
      const Vector hj = gather(h, p, j), pj = gather(approx->precision, p, j), mj = gather(approx->mean, p, j);
      const Vector lp = hj.cwiseAbs2().cwiseProduct(pj);
      jumps.emplace_back(p.block(j).size() == prior.dim() ? prior : prior.marginalize(p.shape_of(j)), lp,
                         hj.cwiseProduct(pj).cwiseProduct(mj));
    }
  }

  CounterRng rng(opt.seed, 0);
  std::vector<Matrix> chol(J);
  std::vector<double> scale(J, 1.0);
  for (std::size_t j = 0; j < J; ++j) {
    const auto d = static_cast<Eigen::Index>(p.block(j).size());
    chol[j] = 0.1 * Matrix::Identity(d, d);
  }
  const std::size_t burn = opt.burn_in ? opt.burn_in : std::max<std::size_t>(opt.samples / 10, 1000);
  std::vector<Vector> s1(J);
  std::vector<Matrix> s2(J);
  std::vector<std::size_t> acc(J, 0), tried(J, 0);
  auto reset_stats = [&] {
    for (std::size_t j = 0; j < J; ++j) {
      const auto d = static_cast<Eigen::Index>(p.block(j).size());
      s1[j] = Vector::Zero(d);
      s2[j] = Matrix::Zero(d, d);
    }
  };
  reset_stats();

  const std::size_t batch_len = opt.samples / opt.batches;
  const std::size_t kept = batch_len * opt.batches;
  Vector sum = Vector::Zero(static_cast<Eigen::Index>(n)), sum_sq = sum, batch = sum;
  Matrix batch_means(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(opt.batches));
  std::size_t accepted = 0, proposals = 0, stats_count = 0, jumped = 0, jump_tries = 0;

  for (std::size_t sweep = 0; sweep < burn + kept; ++sweep) {
    for (std::size_t j = 0; j < J; ++j) {
      const auto& idx = p.block(j);
      const auto d = static_cast<Eigen::Index>(idx.size());
      Vector e(d);
      for (auto& v : e) v = rng.normal();
      const Vector xj = gather(x, p, j);
      const Vector step = scale[j] * (chol[j] * e);
      Vector uu = u;
      for (Eigen::Index a = 0; a < d; ++a)
        for (const auto& [r, v] : op.column(idx[static_cast<std::size_t>(a)])) uu[static_cast<Eigen::Index>(r)] += v * step[a];
      const double cur = block_target(j, xj, u);
      const double prop = block_target(j, xj + step, uu);
      ++tried[j];
      if (std::log(rng.uniform()) < prop - cur) {
        scatter(xj + step, p, j, x);
        u = std::move(uu);
        ++acc[j];
        if (sweep >= burn) ++accepted;
      }
      if (sweep >= burn) ++proposals;
      if (jumps.empty()) continue;
      const Vector xc = gather(x, p, j), xn = jumps[j].draw(rng);
      Vector un = u;
      for (Eigen::Index a = 0; a < d; ++a)
        for (const auto& [r, v] : op.column(idx[static_cast<std::size_t>(a)]))
          un[static_cast<Eigen::Index>(r)] += v * (xn[a] - xc[a]);
      const double log_ratio = block_target(j, xn, un) - block_target(j, xc, u) + jumps[j].log_density(xc) -
                               jumps[j].log_density(xn);
      if (sweep >= burn) ++jump_tries;
      if (std::log(rng.uniform()) < log_ratio) {
        scatter(xn, p, j, x);
        u = std::move(un);
        if (sweep >= burn) ++jumped;
      }
    }
    if (sweep < burn) {
      // Accumulate block covariances over the second half of each adaptation window.
      for (std::size_t j = 0; j < J; ++j) {
        const Vector xj = gather(x, p, j);
        s1[j] += xj;
        s2[j] += xj * xj.transpose();
      }
      ++stats_count;
      const std::size_t window = std::max<std::size_t>(burn / 20, 50);
      if ((sweep + 1) % window == 0 && sweep + 1 < burn) {
        for (std::size_t j = 0; j < J; ++j) {
          const double rate = static_cast<double>(acc[j]) / static_cast<double>(tried[j]);
          scale[j] *= std::exp(rate - 0.25);
          const Vector m = s1[j] / static_cast<double>(stats_count);
          Matrix c = s2[j] / static_cast<double>(stats_count) - m * m.transpose();
          const auto d = c.rows();
          c = 0.5 * (c + c.transpose()) + 1e-10 * Matrix::Identity(d, d);
          const Eigen::LLT<Matrix> l(c * (2.38 * 2.38 / static_cast<double>(d)));
          if (l.info() == Eigen::Success && stats_count > 20) {
            chol[j] = l.matrixL();
            scale[j] = std::clamp(scale[j], 0.05, 20.0);
          }
          acc[j] = tried[j] = 0;
        }
        reset_stats();
        stats_count = 0;
      }
      continue;
    }
    sum += x;
    sum_sq += x.cwiseAbs2();
    batch += x;
    const std::size_t k = sweep - burn + 1;
    if (k % batch_len == 0) {
      batch_means.col(static_cast<Eigen::Index>(k / batch_len - 1)) = batch / static_cast<double>(batch_len);
      batch.setZero();
    }
  }
  McmcMoments out;
  const double m = static_cast<double>(kept);
  out.mean = sum / m;
  out.variances = (sum_sq / m - out.mean.cwiseAbs2()).cwiseMax(0.0);
  const double b = static_cast<double>(opt.batches);
  out.std_error.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.std_error.size(); ++i) {
    const double bm = batch_means.row(i).mean();
    const double bv = (batch_means.row(i).array() - bm).square().sum() / (b - 1.0);
    out.std_error[i] = std::sqrt(bv / b);
  }
  out.acceptance = static_cast<double>(accepted) / static_cast<double>(std::max<std::size_t>(proposals, 1));
  out.jump_acceptance = static_cast<double>(jumped) / static_cast<double>(std::max<std::size_t>(jump_tries, 1));
  return out;
}

/// MCMC on the rectified-Poisson posterior.
inline McmcMoments mcmc_poisson_reference(const Vector& y, const DegradationOperator& op, const AdaptedGMM& prior,
                                          const Partition& p, const McmcOptions& opt = {}) {
  const PixelLogLikelihood lik = [&y](std::size_t n, double u) {
    const double yn = y[static_cast<Eigen::Index>(n)];
    if (u <= 0.0) return yn == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    return yn * std::log(u) - u - std::lgamma(yn + 1.0);
  };
  // Start from the counts (a positive rate everywhere).
  Vector start = y.array() + 0.5;
  if (!op.is_diagonal()) return mcmc_reference(lik, op, prior, p, Vector::Constant(y.size(), y.mean() + 0.5), opt);
  // Jump proposals from N(u; y, max(y, 1)), the Laplace form of the Poisson term.
  PixelGaussianApprox approx{y, y.cwiseMax(1.0).cwiseInverse()};
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (op.diagonal()[i] == 0.0) approx.precision[i] = 0.0;
  return mcmc_reference(lik, op, prior, p, start, opt, &approx);
}

}  // namespace patchep::oracle
