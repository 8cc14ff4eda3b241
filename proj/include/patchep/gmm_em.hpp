#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "patchep/gmm.hpp"
#include "patchep/image.hpp"
#include "patchep/parallel.hpp"
#include "patchep/random.hpp"

namespace patchep {

struct EmOptions {
  std::size_t components = 5;
  std::size_t max_iters = 50;
  std::uint64_t seed = 1;
  double cov_floor = 1e-4;     // added (in effect) to each covariance diagonal
  double tol = 1e-8;           // relative objective change for early stop
  unsigned threads = 1;
};

struct EmResult {
  PatchGMM gmm;
  std::vector<double> objective;  // penalized log-likelihood, one entry per parameter state
  std::size_t iterations = 0;
  bool degenerate = false;
};

namespace detail {

// Each covariance carries an inverse-Wishart-style penalty -lambda/2 tr(C_k^-1),
// whose M-step is C_k = (S_k + lambda I) / N_k. With lambda = floor * n / K the
// ridge is about cov_floor per component, and EM stays monotone in the
// penalized objective.
struct EmStats {
  double objective = 0.0;
  std::vector<double> nk;
  std::vector<Vector> sx;
  std::vector<Matrix> sxx;
};

inline EmStats em_e_step(const Matrix& x, const PreparedGMM& g, unsigned threads) {
  const auto d = x.rows();
  const auto n = static_cast<std::size_t>(x.cols());
  const std::size_t K = g.components();
  std::vector<Eigen::LLT<Matrix>> factors;
  for (std::size_t k = 0; k < K; ++k) factors.push_back(spd_factor(g.covs[k], "EM covariance"));
  constexpr std::size_t chunk = 512;
  const std::size_t chunks = (n + chunk - 1) / chunk;
  std::vector<EmStats> partial(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const auto begin = static_cast<Eigen::Index>(c * chunk);
    const auto count = static_cast<Eigen::Index>(std::min(chunk, n - c * chunk));
    const Matrix xs = x.middleCols(begin, count);
    Matrix logp(count, static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) {
      Matrix z = xs.colwise() - g.means[k];
      factors[k].matrixL().solveInPlace(z);
      const double cst = g.log_weights[k] - 0.5 * (g.log_dets[k] + static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
      logp.col(static_cast<Eigen::Index>(k)) = (-0.5 * z.colwise().squaredNorm().transpose()).array() + cst;
    }
    auto& st = partial[c];
    st.nk.assign(K, 0.0);
    st.sx.assign(K, Vector::Zero(d));
    st.sxx.assign(K, Matrix::Zero(d, d));
    Matrix resp(count, static_cast<Eigen::Index>(K));
    for (Eigen::Index i = 0; i < count; ++i) {
      const double m = logp.row(i).maxCoeff();
      const double s = (logp.row(i).array() - m).exp().sum();
      st.objective += m + std::log(s);
      resp.row(i) = (logp.row(i).array() - m).exp() / s;
    }
    for (std::size_t k = 0; k < K; ++k) {
      const auto rk = resp.col(static_cast<Eigen::Index>(k));
      st.nk[k] = rk.sum();
      st.sx[k] = xs * rk;
      st.sxx[k] = xs * rk.asDiagonal() * xs.transpose();
    }
  });
  EmStats total;
  total.nk.assign(K, 0.0);
  total.sx.assign(K, Vector::Zero(d));
  total.sxx.assign(K, Matrix::Zero(d, d));
  for (const auto& st : partial) {  // fixed order: thread-count independent
    total.objective += st.objective;
    for (std::size_t k = 0; k < K; ++k) {
      total.nk[k] += st.nk[k];
      total.sx[k] += st.sx[k];
      total.sxx[k] += st.sxx[k];
    }
  }
  return total;
}

inline double em_penalty(const PreparedGMM& g, double lambda) {
  double p = 0.0;
  for (const auto& prec : g.precisions) p += prec.trace();
  return -0.5 * lambda * p;
}

inline PreparedGMM prepare_plain(const PatchGMM& gmm) { return prepare(AdaptedGMM(gmm, Theta{})); }

}  // namespace detail

/// Desk-scale EM for a patch GMM. Samples are the columns of `x`.
inline EmResult train_em(const Matrix& x, const EmOptions& opt) {
  require(opt.components > 0, "number of components must be positive");
  require(opt.cov_floor > 0.0, "covariance floor must be positive");
  const auto d = x.rows();
  const auto n = static_cast<std::size_t>(x.cols());
  require(d > 0, "samples must have positive dimension");
  require(n >= opt.components, "need at least K samples");
  require(x.allFinite(), "samples must be finite");

  EmResult res;
  const Vector global_mean = x.rowwise().mean();
  const Matrix centered = x.colwise() - global_mean;
  const Matrix global_cov = centered * centered.transpose() / static_cast<double>(n);
  if (centered.cwiseAbs().maxCoeff() == 0.0) {
    res.degenerate = true;
    res.gmm.weights = {1.0};
    res.gmm.means = {global_mean};
    res.gmm.covs = {opt.cov_floor * Matrix::Identity(d, d)};
    return res;
  }

  // k-means++ seeding of the means; shared initial covariance.
  const std::size_t K = opt.components;
  CounterRng rng(opt.seed, 0xE3);
  std::vector<Eigen::Index> centers{static_cast<Eigen::Index>(rng() % n)};
  Vector dist = (x.colwise() - x.col(centers[0])).colwise().squaredNorm().transpose();
  while (centers.size() < K) {
    const double total = dist.sum();
    Eigen::Index pick = static_cast<Eigen::Index>(rng() % n);
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (Eigen::Index i = 0; i < dist.size(); ++i) {
        target -= dist[i];
        if (target <= 0.0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pick);
    dist = dist.cwiseMin((x.colwise() - x.col(pick)).colwise().squaredNorm().transpose());
  }
  const Matrix init_cov = global_cov + opt.cov_floor * Matrix::Identity(d, d);
  for (auto c : centers) {
    res.gmm.weights.push_back(1.0 / static_cast<double>(K));
    res.gmm.means.push_back(x.col(c));
    res.gmm.covs.push_back(init_cov);
  }

  const double lambda = opt.cov_floor * static_cast<double>(n) / static_cast<double>(K);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    const auto g = detail::prepare_plain(res.gmm);
    const auto st = detail::em_e_step(x, g, opt.threads);
    res.objective.push_back(st.objective + detail::em_penalty(g, lambda));
    PatchGMM next = res.gmm;
    for (std::size_t k = 0; k < K; ++k) {
      if (!(st.nk[k] > 1e-300)) continue;  // empty component keeps its parameters
      next.weights[k] = st.nk[k] / static_cast<double>(n);
      next.means[k] = st.sx[k] / st.nk[k];
      const Matrix s = st.sxx[k] - st.nk[k] * next.means[k] * next.means[k].transpose();
      next.covs[k] = symmetrized((s + lambda * Matrix::Identity(d, d)) / st.nk[k]);
    }
    double wsum = 0.0;
    for (double w : next.weights) wsum += w;
    for (double& w : next.weights) w /= wsum;
    res.gmm = std::move(next);
    res.iterations = it + 1;
    const std::size_t t = res.objective.size();
    if (t >= 2 && std::abs(res.objective[t - 1] - res.objective[t - 2]) <= opt.tol * std::abs(res.objective[t - 1])) break;
  }
  const auto g = detail::prepare_plain(res.gmm);
  res.objective.push_back(detail::em_e_step(x, g, opt.threads).objective + detail::em_penalty(g, lambda));
  return res;
}

/// Extracts square patches on a regular stride, optionally removing each patch's mean.
inline Matrix extract_patches(const Image& img, std::size_t patch_size, std::size_t stride, bool remove_mean) {
  require(patch_size >= 1 && stride >= 1, "patch size and stride must be positive");
  require(img.width >= patch_size && img.height >= patch_size, "image smaller than patch");
  std::vector<std::pair<std::size_t, std::size_t>> corners;
  for (std::size_t r = 0; r + patch_size <= img.height; r += stride)
    for (std::size_t c = 0; c + patch_size <= img.width; c += stride) corners.emplace_back(r, c);
  const auto d = static_cast<Eigen::Index>(patch_size * patch_size);
  Matrix out(d, static_cast<Eigen::Index>(corners.size()));
  for (std::size_t i = 0; i < corners.size(); ++i) {
    for (std::size_t a = 0; a < patch_size; ++a)
      for (std::size_t b = 0; b < patch_size; ++b)
        out(static_cast<Eigen::Index>(a * patch_size + b), static_cast<Eigen::Index>(i)) =
            img.at(corners[i].first + a, corners[i].second + b);
    if (remove_mean) out.col(static_cast<Eigen::Index>(i)).array() -= out.col(static_cast<Eigen::Index>(i)).mean();
  }
  return out;
}

}  // namespace patchep
