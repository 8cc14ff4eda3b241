#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "patchep/rectified_poisson.hpp"

namespace patchep::oracle {

/// Rectified-Poisson tilted moments by plain u-space Simpson on a fine grid
/// (split at u = 0 where the likelihood has its kink).
inline TiltedScalar brute_force_rectified_poisson(double y, double mu, double c, std::size_t points = 1000001) {
  const double s = std::sqrt(c);
  // Generous range: the cavity +-60 std and, for y > 0, the Gamma(y+1) bulk.
  double lo = mu - 60.0 * s, hi = mu + 60.0 * s;
  if (y > 0.0) {
    lo = 0.0;
    hi = std::min(hi, y + 1.0 + 60.0 * std::sqrt(y + 1.0) + 60.0);
    hi = std::max(hi, 1.0);
  }
  const double log_norm = std::lgamma(y + 1.0);
  auto logf = [&](double u) {
    const double gauss = -0.5 * (u - mu) * (u - mu) / c;
    if (u <= 0.0) return y == 0.0 ? gauss : -std::numeric_limits<double>::infinity();
    return y * std::log(u) - u - log_norm + gauss;
  };
  auto run = [&](double a, double b, std::size_t count, auto&& body) {
    if (!(b > a)) return;
    const std::size_t n = count | 1;
    const double h = (b - a) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = a + h * static_cast<double>(i);
      const double wt = ((i == 0 || i == n - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0)) * h / 3.0;
      body(u, wt);
    }
  };
  const double cut = std::clamp(0.0, lo, hi);
  // Coarse pass: a reference level against overflow and a shift near the mean
  // so that the second moment is accumulated without cancellation.
  double top = -std::numeric_limits<double>::infinity(), cz = 0.0, cm = 0.0;
  auto coarse = [&](double u, double) { top = std::max(top, logf(u)); };
  run(lo, cut, 4001, coarse);
  run(cut, hi, 4001, coarse);
  auto centre = [&](double u, double wt) {
    const double f = wt * std::exp(logf(u) - top);
    cz += f;
    cm += f * u;
  };
  run(lo, cut, 4001, centre);
  run(cut, hi, 4001, centre);
  const double shift = cz > 0.0 ? cm / cz : mu;
  // Fine pass.
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  auto fine = [&](double u, double wt) {
    const double l = logf(u) - top;
    const double f = wt * std::exp(l);
    const double d = u - shift;
    z += f;
    m1 += f * d;
    m2 += f * d * d;
  };
  run(lo, cut, points, fine);
  run(cut, hi, points, fine);
  TiltedScalar out;
  const double dm = m1 / z;
  out.mean = shift + dm;
  out.var = m2 / z - dm * dm;
  out.log_z = top + std::log(z) - 0.5 * std::log(2.0 * std::numbers::pi * c);
  return out;
}

}  // namespace patchep::oracle
