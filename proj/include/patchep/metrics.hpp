#pragma once

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

/// 10 log10(max(x)^2 / MSE); +inf when the estimate is exact.
inline double psnr(const Vector& reference, const Vector& estimate) {
  require(reference.size() == estimate.size() && reference.size() > 0, "psnr: sizes differ or are empty");
  const double peak = reference.maxCoeff();
  require(peak != 0.0, "psnr: reference maximum is zero");
  const double mse = (reference - estimate).squaredNorm() / static_cast<double>(reference.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct CoverageReport {
  std::vector<std::uint8_t> outside;  // 1 where the truth falls outside the interval
  double fraction = 0.0;              // share of pixels inside
  double level = 0.0;
};

/// Central Gaussian intervals mean +- z sqrt(var), z the (1 + level)/2 quantile.
inline CoverageReport coverage(const Vector& reference, const Vector& mean, const Vector& variances, double level) {
  require(level > 0.0 && level < 1.0, "coverage: level must lie in (0, 1)");
  require(reference.size() == mean.size() && mean.size() == variances.size() && mean.size() > 0,
          "coverage: sizes differ or are empty");
  require((variances.array() > 0.0).all(), "coverage: variances must be positive");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 * (1.0 + level));
  CoverageReport r;
  r.level = level;
  r.outside.resize(static_cast<std::size_t>(mean.size()));
  std::size_t out = 0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const bool o = std::abs(reference[i] - mean[i]) > z * std::sqrt(variances[i]);
    r.outside[static_cast<std::size_t>(i)] = o ? 1 : 0;
    out += o ? 1 : 0;
  }
  r.fraction = 1.0 - static_cast<double>(out) / static_cast<double>(mean.size());
  return r;
}

inline std::vector<double> coverage_curve(const Vector& reference, const Vector& mean, const Vector& variances,
                                          const std::vector<double>& levels) {
  for (std::size_t i = 1; i < levels.size(); ++i) require(levels[i - 1] <= levels[i], "coverage_curve: levels must be sorted");
  std::vector<double> out;
  for (double l : levels) out.push_back(coverage(reference, mean, variances, l).fraction);
  return out;
}

}  // namespace patchep
