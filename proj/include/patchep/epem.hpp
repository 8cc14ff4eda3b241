#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/gmm.hpp"
#include "patchep/linalg.hpp"
#include "patchep/partition.hpp"

namespace patchep {

/// Everything the E-step cost needs from one EP run, reduced to scalars per
/// (block shape, component). With A = s2 11' + alpha^2 C, v = C^-1 1 and
/// beta = s2 / alpha^2, Sherman-Morrison gives A^-1 = alpha^-2 (C^-1 - beta v v' / (1 + beta 1'v)),
/// so the cost is O(1) per evaluation of theta.
struct EmStatistics {
  struct Term {
    double w = 0.0;        // sum_j omega_jk
    double dim = 0.0;
    double gamma = 0.0;    // 1' C^-1 1
    double logdet = 0.0;   // log |C|
    double tr_cs = 0.0;    // tr(C^-1 S), S = sum_j omega_jk (Sigma_j + m_j m_j')
    double v_s_v = 0.0;    // v' S v
    double v_m = 0.0;      // v' M, M = sum_j omega_jk m_j
    double mu_c_m = 0.0;   // mu' C^-1 M
    double v_mu = 0.0;     // v' mu
    double mu_c_mu = 0.0;  // mu' C^-1 mu
  };
  std::vector<Term> terms;
  double blocks_dim = 0.0;  // sum over blocks of their size (for the 2 pi constant)
};

namespace detail {

/// Accumulates the statistics; moments(j, k, m, c) yields the mean and
/// covariance of x_j under which component k of block j is scored.
template <class Moments>
EmStatistics build_em_statistics(const std::vector<std::vector<double>>& weights, const PatchGMM& base,
                                 const Partition& p, Moments moments) {
  const std::size_t J = p.block_count(), K = base.components();
  require(weights.size() == J, "EM statistics: one weight vector per block");
  EmStatistics out;
  for (std::size_t s = 0; s < p.shape_count(); ++s) {
    const auto& shape = p.shape(s);
    const PatchGMM g = shape.size() == base.dim() ? base : base.marginalize(shape);
    const auto d = static_cast<Eigen::Index>(shape.size());
    std::vector<double> w(K, 0.0);
    std::vector<Vector> m(K, Vector::Zero(d));
    std::vector<Matrix> sm(K, Matrix::Zero(d, d));
    Vector mjk(d);
    Matrix cjk(d, d);
    for (std::size_t j = 0; j < J; ++j) {
      if (p.shape_id(j) != s) continue;
      require(weights[j].size() == K, "EM statistics: weight vector length differs from K");
      for (std::size_t k = 0; k < K; ++k) {
        const double o = weights[j][k];
        moments(j, k, mjk, cjk);
        w[k] += o;
        m[k] += o * mjk;
        sm[k] += o * (cjk + mjk * mjk.transpose());
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      const auto llt = spd_factor(g.covs[k], "base GMM covariance");
      const Matrix ci = spd_inverse(llt);
      const Vector v = ci * Vector::Ones(d);
      EmStatistics::Term t;
      t.w = w[k];
      t.dim = static_cast<double>(d);
      t.gamma = v.sum();
      t.logdet = log_det(llt);
      t.tr_cs = ci.cwiseProduct(sm[k]).sum();
      t.v_s_v = v.dot(sm[k] * v);
      t.v_m = v.dot(m[k]);
      t.mu_c_m = g.means[k].dot(ci * m[k]);
      t.v_mu = v.dot(g.means[k]);
      t.mu_c_mu = g.means[k].dot(ci * g.means[k]);
      out.terms.push_back(t);
    }
  }
  for (std::size_t j = 0; j < J; ++j) out.blocks_dim += static_cast<double>(p.block(j).size());
  return out;
}

}  // namespace detail

/// Builds the statistics from per-block tilted weights, the joint mean and the
/// block covariances of one expert: every component is scored under Q(x_j).
/// Cut blocks use the marginalized base GMM.
inline EmStatistics em_statistics(const std::vector<std::vector<double>>& weights, const Vector& mean,
                                  const std::vector<Matrix>& cov, const PatchGMM& base, const Partition& p) {
  require(weights.size() == p.block_count() && cov.size() == p.block_count(),
          "EM statistics: one weight vector and covariance per block");
  require(mean.size() == static_cast<Eigen::Index>(p.pixel_count()), "EM statistics: mean has the wrong size");
  return detail::build_em_statistics(weights, base, p, [&](std::size_t j, std::size_t, Vector& m, Matrix& c) {
    m = gather(mean, p, j);
    c = cov[j];
  });
}

/// Component-conditional variant: component k of block j is scored under
/// x_j | z_j = k, the product of the block's cavity (Q(x_j) / q_x0(x_j)) and
/// N(b_k, A_k) of the prior the EP run used. Where that product is not a
/// proper Gaussian the block falls back to Q(x_j).
/// q0_precision / q0_mean are the block parameters of q_x0.
inline EmStatistics em_statistics_conditional(const std::vector<std::vector<double>>& weights, const Vector& mean,
                                              const std::vector<Matrix>& cov, const std::vector<Matrix>& q0_precision,
                                              const std::vector<Vector>& q0_mean, const AdaptedGMM& prior,
                                              const Partition& p) {
  const std::size_t J = p.block_count(), K = prior.components();
  require(weights.size() == J && cov.size() == J && q0_precision.size() == J && q0_mean.size() == J,
          "EM statistics: one weight vector, covariance and q_x0 block per block");
  require(mean.size() == static_cast<Eigen::Index>(p.pixel_count()), "EM statistics: mean has the wrong size");
  std::vector<std::vector<Matrix>> prec(p.shape_count());
  std::vector<std::vector<Vector>> eta(p.shape_count());
  for (std::size_t s = 0; s < p.shape_count(); ++s) {
    const AdaptedGMM g = p.shape(s).size() == prior.dim() ? prior : prior.marginalize(p.shape(s));
    for (std::size_t k = 0; k < K; ++k) {
      prec[s].push_back(spd_inverse(g.cov(k), "adapted GMM covariance"));
      eta[s].push_back(prec[s].back() * g.mean(k));
    }
  }
  std::size_t cached = J;
  Matrix cav;
  Vector hc, mj;
  std::vector<Vector> cm(K);
  std::vector<Matrix> cc(K);
  return detail::build_em_statistics(weights, prior.base(), p, [&](std::size_t j, std::size_t k, Vector& m, Matrix& c) {
    if (cached != j) {
      cached = j;
      mj = gather(mean, p, j);
      const auto s = p.shape_id(j);
      const Eigen::LLT<Matrix> q(cov[j]);
      bool ok = q.info() == Eigen::Success;
      if (ok) {
        const auto d = cov[j].rows();
        cav = q.solve(Matrix::Identity(d, d)) - q0_precision[j];
        hc = q.solve(mj) - q0_precision[j] * q0_mean[j];
      }
      for (std::size_t kk = 0; kk < K; ++kk) {
        Eigen::LLT<Matrix> t;
        if (ok) t.compute(symmetrized(prec[s][kk] + cav));
        if (ok && t.info() == Eigen::Success) {
          cm[kk] = t.solve(eta[s][kk] + hc);
          cc[kk] = t.solve(Matrix::Identity(cav.rows(), cav.cols()));
        } else {
          cm[kk] = mj;
          cc[kk] = cov[j];
        }
      }
    }
    m = cm[k];
    c = cc[k];
  });
}

/// E-step cost C(theta): sum_jk omega_jk E_Q[log N(x_j; m0 1 + alpha mu_k, s2 11' + alpha^2 C_k)].
inline double e_cost(const EmStatistics& st, const Theta& th) {
  require(th.alpha > 0.0 && th.s2 >= 0.0, "e_cost: needs alpha > 0 and s2 >= 0");
  const double a2 = th.alpha * th.alpha, beta = th.s2 / a2;
  double c = 0.0;
  for (const auto& t : st.terms) {
    if (t.w == 0.0) continue;
    const double den = 1.0 + beta * t.gamma;
    const double b_c_m = th.m0 * t.v_m + th.alpha * t.mu_c_m;
    const double b_c_b = th.m0 * th.m0 * t.gamma + 2.0 * th.m0 * th.alpha * t.v_mu + a2 * t.mu_c_mu;
    const double v_b = th.m0 * t.gamma + th.alpha * t.v_mu;
    const double tr_ct = t.tr_cs - 2.0 * b_c_m + t.w * b_c_b;
    const double v_t_v = t.v_s_v - 2.0 * v_b * t.v_m + t.w * v_b * v_b;
    const double tr_at = (tr_ct - beta * v_t_v / den) / a2;
    const double logdet_a = t.dim * std::log(a2) + t.logdet + std::log(den);
    c += -0.5 * t.w * logdet_a - 0.5 * tr_at;
  }
  return c - 0.5 * st.blocks_dim * std::log(2.0 * std::numbers::pi);
}

/// Closed-form maximizer of C over m0 for fixed (s2, alpha).
inline double optimal_m0(const EmStatistics& st, double s2, double alpha) {
  const double beta = s2 / (alpha * alpha);
  double num = 0.0, den = 0.0;
  for (const auto& t : st.terms) {
    const double f = 1.0 / (1.0 + beta * t.gamma);
    num += f * (t.v_m - t.w * alpha * t.v_mu);
    den += f * t.w * t.gamma;
  }
  require(den > 0.0, "optimal_m0: no block carries weight");
  return num / den;
}

struct MStepOptions {
  bool estimate_alpha = true;
  double s2_min = 1e-8, s2_max = 1e6;  // wide enough for count-scale images
  double alpha_min = 1e-3, alpha_max = 1e3;
  double tol = 1e-4;          // relative change of all three parameters
  std::size_t max_rounds = 20;
  double search_tol = 1e-7;   // golden-section bracket width in log space
};

struct MStepResult {
  Theta theta;
  double cost = 0.0;
  std::size_t rounds = 0;
  bool at_boundary = false;  // a search ended on its interval's end
};

/// Maximizer of f over [lo, hi] by golden-section search (f assumed unimodal).
template <class F>
double golden_section_max(F f, double lo, double hi, double tol) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double x1 = b - g * (b - a), x2 = a + g * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + g * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - g * (b - a);
      f1 = f(x1);
    }
  }
  return 0.5 * (a + b);
}

namespace detail {

inline double rel_change(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-8); }

}  // namespace detail

/// Coordinate ascent: m0 in closed form, then s2 (golden section on log s2,
/// m0 profiled out), then alpha likewise; a move is kept only if the cost
/// does not decrease.
inline MStepResult m_step(const EmStatistics& st, const Theta& prev, const MStepOptions& opt = {}) {
  require(opt.s2_min > 0.0 && opt.s2_max > opt.s2_min, "m_step: invalid s2 interval");
  require(opt.alpha_min > 0.0 && opt.alpha_max > opt.alpha_min, "m_step: invalid alpha interval");
  MStepResult res;
  Theta th = prev;
  th.s2 = std::clamp(th.s2, opt.s2_min, opt.s2_max);
  if (opt.estimate_alpha) th.alpha = std::clamp(th.alpha, opt.alpha_min, opt.alpha_max);
  th.m0 = optimal_m0(st, th.s2, th.alpha);
  double cost = e_cost(st, th);
  auto profiled = [&](double s2, double alpha) {
    return e_cost(st, Theta{optimal_m0(st, s2, alpha), s2, alpha});
  };
  const double ls_lo = std::log(opt.s2_min), ls_hi = std::log(opt.s2_max);
  const double la_lo = std::log(opt.alpha_min), la_hi = std::log(opt.alpha_max);
  auto near_end = [](double x, double lo, double hi) { return x - lo < 1e-4 * (hi - lo) || hi - x < 1e-4 * (hi - lo); };
  for (res.rounds = 1; res.rounds <= opt.max_rounds; ++res.rounds) {
    const Theta before = th;
    bool boundary = false;
    const double ls = golden_section_max([&](double l) { return profiled(std::exp(l), th.alpha); }, ls_lo, ls_hi,
                                         opt.search_tol);
    boundary |= near_end(ls, ls_lo, ls_hi);
    if (const double c = profiled(std::exp(ls), th.alpha); c >= cost) {
      th.s2 = std::exp(ls);
      th.m0 = optimal_m0(st, th.s2, th.alpha);
      cost = c;
    }
    if (opt.estimate_alpha) {
      const double la = golden_section_max([&](double l) { return profiled(th.s2, std::exp(l)); }, la_lo, la_hi,
                                           opt.search_tol);
      boundary |= near_end(la, la_lo, la_hi);
      if (const double c = profiled(th.s2, std::exp(la)); c >= cost) {
        th.alpha = std::exp(la);
        th.m0 = optimal_m0(st, th.s2, th.alpha);
        cost = c;
      }
    }
    res.at_boundary = boundary;
    if (detail::rel_change(th.m0, before.m0) < opt.tol && detail::rel_change(th.s2, before.s2) < opt.tol &&
        detail::rel_change(th.alpha, before.alpha) < opt.tol)
      break;
  }
  res.rounds = std::min(res.rounds, opt.max_rounds);
  res.theta = th;
  res.cost = cost;
  return res;
}

}  // namespace patchep
