#pragma once

#include <filesystem>
#include <string>

#include "patchep/gmm.hpp"
#include "patchep/linalg.hpp"
#include "patchep/random.hpp"

namespace testutil {

using patchep::Matrix;
using patchep::Vector;

inline Vector random_vector(patchep::CounterRng& rng, Eigen::Index n, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

/// A A' / n + shift * I with Gaussian A.
inline Matrix random_spd(patchep::CounterRng& rng, Eigen::Index n, double shift = 0.5, double scale = 1.0) {
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  return patchep::symmetrized(scale * (a * a.transpose() / static_cast<double>(n) + shift * Matrix::Identity(n, n)));
}

inline patchep::PatchGMM random_gmm(patchep::CounterRng& rng, std::size_t K, Eigen::Index dim, double mean_scale = 1.0,
                                    double cov_scale = 1.0) {
  patchep::PatchGMM g;
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double w = 0.5 + rng.uniform();
    g.weights.push_back(w);
    total += w;
    g.means.push_back(random_vector(rng, dim, mean_scale));
    g.covs.push_back(random_spd(rng, dim, 0.3, cov_scale));
  }
  for (auto& w : g.weights) w /= total;
  return g;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

inline double max_rel_err(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-12));
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("patchep_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
