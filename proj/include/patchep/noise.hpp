#pragma once

#include <boost/random/poisson_distribution.hpp>

#include <cmath>
#include <string>

#include "patchep/errors.hpp"
#include "patchep/operators.hpp"
#include "patchep/random.hpp"

namespace patchep {

struct NoiseModel {
  enum class Kind { Gaussian, Poisson };
  Kind kind = Kind::Gaussian;
  double sigma2 = 1.0;  // Gaussian only

  static NoiseModel gaussian(double sigma2) {
    require(sigma2 > 0.0 && std::isfinite(sigma2), "Gaussian noise variance must be positive");
    return {Kind::Gaussian, sigma2};
  }
  static NoiseModel poisson() { return {Kind::Poisson, 0.0}; }

  bool is_poisson() const { return kind == Kind::Poisson; }
  std::string name() const { return is_poisson() ? "poisson" : "gaussian"; }
};

/// y = Hx + noise. Pixel n draws from its own counter stream, so the result
/// does not depend on evaluation order.
inline Vector simulate(const DegradationOperator& op, const Vector& x, const NoiseModel& noise, std::uint64_t seed) {
  const Vector hx = op.apply(x);
  Vector y(hx.size());
  for (Eigen::Index n = 0; n < hx.size(); ++n) {
    CounterRng rng(seed, static_cast<std::uint64_t>(n));
    if (noise.is_poisson()) {
      const double rate = hx[n];
      require(rate >= -1e-12, "Poisson simulation needs a non-negative rate");
      if (rate <= 0.0) {
        y[n] = 0.0;
      } else {
        boost::random::poisson_distribution<long, double> dist(rate);
        y[n] = static_cast<double>(dist(rng));
      }
    } else {
      y[n] = hx[n] + std::sqrt(noise.sigma2) * rng.normal();
    }
  }
  return y;
}

}  // namespace patchep
