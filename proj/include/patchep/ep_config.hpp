#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "json.hpp"
#include "patchep/errors.hpp"
#include "patchep/kl_updates.hpp"
#include "patchep/operators.hpp"
#include "patchep/random.hpp"

namespace patchep {

enum class CovarianceStructure { Auto, Diagonal, BlockDiagonal };

inline std::string to_string(CovarianceStructure s) {
  switch (s) {
    case CovarianceStructure::Diagonal: return "diagonal";
    case CovarianceStructure::BlockDiagonal: return "block";
    default: return "auto";
  }
}

inline CovarianceStructure parse_structure(const std::string& s) {
  if (s == "auto") return CovarianceStructure::Auto;
  if (s == "diagonal") return CovarianceStructure::Diagonal;
  if (s == "block") return CovarianceStructure::BlockDiagonal;
  throw InvalidInput("unknown covariance structure '" + s + "' (expected auto, diagonal or block)");
}

/// Receives one record per EP iteration.
using TraceSink = std::function<void(const nlohmann::json&)>;

struct EPConfig {
  double damping = 0.7;           // weight of the new natural parameters
  bool damp_first_iteration = false;
  double stop_tol = 1e-8;         // per-pixel squared change of m* and diag(Sigma*)
  std::size_t max_iters = 50;
  double cg_tol = 1e-8;
  std::size_t cg_max_iters = 500;
  std::size_t rbmc_samples = 20;
  bool resample_rbmc = false;     // fresh RBMC draws every iteration (off: same draws, so EP can settle)
  CovarianceStructure structure = CovarianceStructure::Auto;
  BlockKLOptions block_kl{};
  std::uint64_t seed = 1;         // RBMC noise
  unsigned threads = 1;
  TraceSink trace;

  void validate() const {
    require(damping > 0.0 && damping <= 1.0, "damping must lie in (0, 1]");
    require(stop_tol > 0.0, "stop tolerance must be positive");
    require(max_iters >= 1, "max_iters must be at least 1");
    require(cg_tol > 0.0 && cg_max_iters >= 1, "CG tolerance and iteration budget must be positive");
    require(rbmc_samples >= 1, "RBMC needs at least one sample");
  }

  std::uint64_t rbmc_seed(std::size_t iteration) const { return derive_seed(seed, resample_rbmc ? iteration : 0); }

  /// Diagonal factors for identity and mask operators, blocks for convolution.
  bool diagonal_for(const DegradationOperator& op) const {
    if (structure == CovarianceStructure::Auto) return op.is_diagonal();
    return structure == CovarianceStructure::Diagonal;
  }
};

}  // namespace patchep
