#pragma once

#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

struct FusedPosterior {
  Vector mean;
  Vector variances;
};

/// Product of experts from marginals only: per pixel, the fused precision is
/// the average expert precision and the fused mean the precision-weighted average.
inline FusedPosterior fuse_poe(const std::vector<Vector>& means, const std::vector<Vector>& variances) {
  require(!means.empty() && means.size() == variances.size(), "fuse_poe: need at least one expert with variances");
  const auto n = means.front().size();
  Vector prec = Vector::Zero(n), h = Vector::Zero(n);
  for (std::size_t i = 0; i < means.size(); ++i) {
    require(means[i].size() == n && variances[i].size() == n, "fuse_poe: experts differ in size");
    require((variances[i].array() > 0.0).all(), "fuse_poe: variances must be positive");
    prec += variances[i].cwiseInverse();
    h += means[i].cwiseQuotient(variances[i]);
  }
  FusedPosterior out;
  if (means.size() == 1) return {means.front(), variances.front()};
  const double r = static_cast<double>(means.size());
  out.variances = (prec / r).cwiseInverse();
  out.mean = out.variances.cwiseProduct(h / r);
  return out;
}

}  // namespace patchep
