#pragma once

#include <memory>
#include <variant>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"
#include "patchep/partition.hpp"

namespace patchep {

struct DiagonalCov {
  Vector variances;
};

struct BlockDiagonalCov {
  std::shared_ptr<const Partition> partition;
  std::vector<Matrix> blocks;  // one per partition block, in block order
};

struct IsotropicCov {
  double variance = 1.0;
};

using CovStructure = std::variant<DiagonalCov, BlockDiagonalCov, IsotropicCov>;

/// Gaussian with a structured covariance. Construction validates positivity.
class StructuredGaussian {
 public:
  StructuredGaussian(Vector mean, CovStructure cov) : mean_(std::move(mean)), cov_(std::move(cov)) { validate(); }

  static StructuredGaussian diagonal(Vector mean, Vector variances) {
    return StructuredGaussian(std::move(mean), DiagonalCov{std::move(variances)});
  }
  static StructuredGaussian isotropic(Vector mean, double variance) {
    return StructuredGaussian(std::move(mean), IsotropicCov{variance});
  }
  static StructuredGaussian block_diagonal(Vector mean, std::shared_ptr<const Partition> p, std::vector<Matrix> blocks) {
    return StructuredGaussian(std::move(mean), BlockDiagonalCov{std::move(p), std::move(blocks)});
  }

  const Vector& mean() const { return mean_; }
  const CovStructure& cov() const { return cov_; }
  std::size_t size() const { return static_cast<std::size_t>(mean_.size()); }

  Vector marginal_variances() const {
    const auto n = mean_.size();
    return std::visit(
        [n](const auto& c) -> Vector {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, DiagonalCov>) {
            return c.variances;
          } else if constexpr (std::is_same_v<T, IsotropicCov>) {
            return Vector::Constant(n, c.variance);
          } else {
            Vector out(n);
            for (std::size_t j = 0; j < c.blocks.size(); ++j) scatter(c.blocks[j].diagonal(), *c.partition, j, out);
            return out;
          }
        },
        cov_);
  }

 private:
  void validate() const {
    require(mean_.allFinite(), "Gaussian mean must be finite");
    std::visit(
        [this](const auto& c) {
          using T = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<T, DiagonalCov>) {
            require(c.variances.size() == mean_.size(), "diagonal variance length mismatch");
            for (Eigen::Index i = 0; i < c.variances.size(); ++i)
              require(c.variances[i] > 0.0 && std::isfinite(c.variances[i]), "variances must be positive and finite");
          } else if constexpr (std::is_same_v<T, IsotropicCov>) {
            require(c.variance > 0.0 && std::isfinite(c.variance), "isotropic variance must be positive and finite");
          } else {
            require(c.partition != nullptr, "block-diagonal covariance needs a partition");
            require(c.partition->pixel_count() == static_cast<std::size_t>(mean_.size()), "partition size mismatch");
            require(c.blocks.size() == c.partition->block_count(), "block count does not match partition");
            for (std::size_t j = 0; j < c.blocks.size(); ++j) {
              const auto sz = static_cast<Eigen::Index>(c.partition->block(j).size());
              require(c.blocks[j].rows() == sz && c.blocks[j].cols() == sz, "block shape does not match partition");
              require(is_spd(c.blocks[j]), "covariance block is not positive definite");
            }
          }
        },
        cov_);
  }

  Vector mean_;
  CovStructure cov_;
};

inline Vector marginal_variances(const StructuredGaussian& g) { return g.marginal_variances(); }

}  // namespace patchep
