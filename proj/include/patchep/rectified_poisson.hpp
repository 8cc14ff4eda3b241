#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "patchep/errors.hpp"

namespace patchep {

/// Moments of P0(u) ∝ Pbar_y(u) N(u; mu, c), Pbar_y the rectified Poisson
/// likelihood (Poisson p.m.f. for u > 0, [y == 0] for u <= 0).
struct TiltedScalar {
  double log_z = 0.0;  // log of the normalizer (Poisson p.m.f. and Gaussian density included)
  double mean = 0.0;
  double var = 0.0;
  bool fallback = false;  // evidence underflowed; cavity moments returned
};

namespace detail {

/// phi(z) / Phi(z), stable for very negative z (continued fraction of the
/// Mills ratio there).
inline double inverse_mills(double z) {
  if (z > -5.0) {
    const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    return phi / (0.5 * std::erfc(-z / std::numbers::sqrt2));
  }
  // R(x) = Phi(-x) / phi(x) = 1/(x + 1/(x + 2/(x + 3/(x + ...)))), modified Lentz.
  const double x = -z;
  const double tiny = 1e-300;
  double f = x, c = x, d = 0.0;
  for (int k = 1; k < 500; ++k) {
    d = x + k * d;
    d = std::abs(d) < tiny ? tiny : d;
    c = x + k / c;
    c = std::abs(c) < tiny ? tiny : c;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return f;  // 1 / R(x)
}

inline double log_normal_cdf(double z) {
  if (z > -5.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  return -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi) - std::log(inverse_mills(z));
}

/// Mean and variance of N(a, c) truncated to u > 0.
inline void truncated_positive(double a, double c, double& mean, double& var) {
  const double s = std::sqrt(c);
  const double z = a / s;
  const double lam = inverse_mills(z);
  mean = a + s * lam;
  var = std::max(c * (1.0 - lam * (lam + z)), 0.0);
}

/// y = 0: mixture of e^-u N(u; mu, c) on u > 0 (= shifted Gaussian) and N(u; mu, c) on u <= 0.
inline TiltedScalar rectified_zero(double mu, double c) {
  const double s = std::sqrt(c);
  const double log_a = -mu + 0.5 * c + log_normal_cdf((mu - c) / s);
  const double log_b = log_normal_cdf(-mu / s);
  double ma, va, mb, vb;
  truncated_positive(mu - c, c, ma, va);
  truncated_positive(-mu, c, mb, vb);
  mb = -mb;
  const double top = std::max(log_a, log_b);
  const double ea = std::exp(log_a - top), eb = std::exp(log_b - top);
  const double wa = ea / (ea + eb), wb = eb / (ea + eb);
  TiltedScalar out;
  out.log_z = top + std::log(ea + eb);
  out.mean = wa * ma + wb * mb;
  out.var = wa * va + wb * vb + wa * wb * (ma - mb) * (ma - mb);
  return out;
}

struct QuadratureMoments {
  double log_z = 0.0;  // log of the integral of exp(g)
  double mean = 0.0;   // of transform(t)
  double var = 0.0;
  bool ok = false;
};

/// Moments of transform(t) under density ∝ exp(g(t)), g smooth and unimodal:
/// safeguarded Newton to the mode from `start`, then composite Simpson on
/// mode +-10 effective std (widened until g is 50 below its maximum).
template <class G, class G1, class G2, class T>
QuadratureMoments mode_centered_simpson(G g, G1 g1, G2 g2, double start, std::size_t points, T transform) {
  double t = start;
  for (int it = 0; it < 100; ++it) {
    const double d1 = g1(t), d2 = g2(t);
    double step = d2 < 0.0 ? -d1 / d2 : (d1 > 0.0 ? 1.0 : -1.0);
    step = std::clamp(step, -2.0, 2.0);
    const double g0 = g(t);
    while (g(t + step) < g0 - 1e-12 * std::abs(g0) && std::abs(step) > 1e-14) step *= 0.5;
    t += step;
    if (std::abs(step) < 1e-12 * std::max(1.0, std::abs(t))) break;
  }
  const double g_mode = g(t);
  const double curv = -g2(t);
  const double sd = curv > 0.0 ? 1.0 / std::sqrt(curv) : 1.0;
  double lo = t - 10.0 * sd, hi = t + 10.0 * sd;
  for (int k = 0; k < 60 && g(lo) > g_mode - 50.0; ++k) lo -= 2.0 * sd;
  for (int k = 0; k < 60 && g(hi) > g_mode - 50.0; ++k) hi += 2.0 * sd;
  const std::size_t n = points % 2 == 1 ? points : points + 1;
  const double h = (hi - lo) / static_cast<double>(n - 1);
  std::vector<double> w(n), v(n);
  double z = 0.0, m1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ti = lo + h * static_cast<double>(i);
    const double simpson = (i == 0 || i == n - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    v[i] = transform(ti);
    w[i] = simpson * std::exp(g(ti) - g_mode);
    z += w[i];
    m1 += w[i] * v[i];
  }
  QuadratureMoments out;
  if (!(z > 1e-300) || !std::isfinite(z)) return out;
  out.mean = m1 / z;
  double m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) m2 += w[i] * (v[i] - out.mean) * (v[i] - out.mean);
  out.var = m2 / z;
  out.log_z = g_mode + std::log(z * h / 3.0);
  out.ok = true;
  return out;
}

/// y > 0 by quadrature in t = log u: the integrand exp((y + 1) t - e^t - (e^t - mu)^2 / 2c)
/// is smooth and near-Gaussian around its mode even when u is close to 0.
inline TiltedScalar rectified_positive(double y, double mu, double c, std::size_t points) {
  auto g = [&](double t) {
    const double u = std::exp(t);
    return (y + 1.0) * t - u - (u - mu) * (u - mu) / (2.0 * c);
  };
  auto g1 = [&](double t) {
    const double u = std::exp(t);
    return (y + 1.0) - u - u * (u - mu) / c;
  };
  auto g2 = [&](double t) {
    const double u = std::exp(t);
    return -u - (2.0 * u * u - mu * u) / c;
  };
  // Start from the mode in t (root of u^2 + (c - mu) u - (y + 1) c = 0).
  const double b = mu - c, disc = std::sqrt(b * b + 4.0 * (y + 1.0) * c);
  const double start = std::log(b >= 0.0 ? 0.5 * (b + disc) : 2.0 * (y + 1.0) * c / (disc - b));
  const auto q = mode_centered_simpson(g, g1, g2, start, points, [](double t) { return std::exp(t); });
  TiltedScalar out;
  if (!q.ok) {
    out.fallback = true;
    return out;
  }
  out.mean = q.mean;
  out.var = q.var;
  out.log_z = q.log_z - std::lgamma(y + 1.0) - 0.5 * std::log(2.0 * std::numbers::pi * c);
  return out;
}

}  // namespace detail

/// Tilted moments of the rectified Poisson likelihood for count y and
/// Gaussian cavity N(mu, c). y = 0 is closed form; y > 0 uses quadrature.
inline TiltedScalar rectified_poisson_tilted(double y, double mu, double c, std::size_t points = 513) {
  require(y >= 0.0 && std::floor(y) == y, "rectified_poisson_tilted: count must be a nonnegative integer");
  require(c > 0.0 && std::isfinite(c) && std::isfinite(mu), "rectified_poisson_tilted: invalid cavity");
  TiltedScalar out = y == 0.0 ? detail::rectified_zero(mu, c) : detail::rectified_positive(y, mu, c, points);
  if (out.fallback || !std::isfinite(out.mean) || !std::isfinite(out.var) || !(out.var > 0.0)) {
    out.fallback = true;
    out.mean = mu;
    out.var = c;
    out.log_z = -std::numeric_limits<double>::infinity();
  }
  return out;
}

}  // namespace patchep
