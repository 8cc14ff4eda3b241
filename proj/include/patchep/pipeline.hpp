#pragma once

#include <chrono>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchep/ep_gaussian.hpp"
#include "patchep/ep_poisson.hpp"
#include "patchep/epem.hpp"
#include "patchep/noise.hpp"
#include "patchep/poe.hpp"

namespace patchep {

/// Moments the EP-EM E-step scores component k of block j under: the joint
/// Q(x_j) for every k, or x_j | z_j = k (see em_statistics_conditional).
enum class EmMoments { Posterior, Conditional };

inline std::string to_string(EmMoments m) { return m == EmMoments::Posterior ? "posterior" : "conditional"; }

inline EmMoments parse_em_moments(const std::string& s) {
  if (s == "posterior") return EmMoments::Posterior;
  if (s == "conditional") return EmMoments::Conditional;
  throw InvalidInput("unknown em_moments '" + s + "' (posterior|conditional)");
}

struct PipelineConfig {
  EPConfig ep{};
  std::vector<std::size_t> experts;   // shift indices i -> (i % p, i / p); empty = all p^2
  bool estimate_theta = true;         // EP-EM; off = run EP once with theta_init
  std::optional<Theta> theta_init;    // default: initial_theta
  std::optional<bool> estimate_alpha; // default: off for Gaussian noise, on for Poisson
  EmMoments em_moments = EmMoments::Conditional;
  MStepOptions mstep{};
  std::size_t max_outer = 10;
  double outer_tol = 1e-3;            // relative change of every theta entry
  bool share_theta = false;           // estimate on the first expert, reuse for the rest
  unsigned expert_threads = 1;
  bool report_timings = false;        // wall-clock fields make reports non-reproducible
};

struct ExpertResult {
  std::size_t index = 0;
  std::size_t shift_x = 0, shift_y = 0;
  Vector mean, variances;
  std::vector<std::vector<double>> weights;
  Theta theta;
  std::size_t iterations = 0;      // EP iterations of the final run
  std::size_t outer_rounds = 0;
  bool converged = false;
  std::size_t failed_blocks = 0;
  double seconds = 0.0;
  std::string error;               // non-empty: excluded from fusion
  EPResult ep;                     // last EP run
};

struct PipelineResult {
  FusedPosterior fused;
  std::vector<ExpertResult> experts;
  nlohmann::json report;
};

/// m0 = mean(y), s2 = variance of the block means of y, alpha = 1.
inline Theta default_theta(const Vector& y, const Partition& p) {
  std::vector<double> bm;
  for (std::size_t j = 0; j < p.block_count(); ++j) bm.push_back(gather(y, p, j).mean());
  double mu = 0.0, var = 0.0;
  for (double v : bm) mu += v / static_cast<double>(bm.size());
  for (double v : bm) var += (v - mu) * (v - mu) / static_cast<double>(bm.size());
  return Theta{y.mean(), std::max(var, 1e-8), 1.0};
}

/// Starting point of EP-EM. alpha = 1 when it is not estimated; otherwise the
/// alpha that matches the within-block variance of the observed pixels of y,
/// less the noise variance, to that of the base GMM.
inline Theta initial_theta(const Vector& y, const DegradationOperator& op, const NoiseModel& noise,
                           const PatchGMM& base, const Partition& p, bool estimate_alpha) {
  Theta t = default_theta(y, p);
  if (!estimate_alpha) return t;
  const Vector seen = op.is_diagonal() ? op.diagonal() : Vector::Ones(y.size());
  double within = 0.0, level = 0.0, blocks = 0.0, pixels = 0.0;
  for (std::size_t j = 0; j < p.block_count(); ++j) {
    double n = 0.0, s1 = 0.0, s2 = 0.0;
    for (auto i : p.block(j)) {
      const auto e = static_cast<Eigen::Index>(i);
      if (seen[e] == 0.0) continue;
      n += 1.0;
      s1 += y[e];
      s2 += y[e] * y[e];
    }
    level += s1;
    pixels += n;
    if (n < 2.0) continue;
    within += s2 / n - (s1 / n) * (s1 / n);
    blocks += 1.0;
  }
  if (blocks == 0.0) return t;
  within /= blocks;
  const double noise_var = noise.is_poisson() ? std::max(level / pixels, 0.0) : noise.sigma2;
  const auto d = static_cast<double>(base.dim());
  double prior_within = 0.0;
  for (std::size_t k = 0; k < base.components(); ++k) {
    const Vector mu = base.means[k].array() - base.means[k].mean();
    prior_within += base.weights[k] * (base.covs[k].trace() - base.covs[k].sum() / d + mu.squaredNorm()) / d;
  }
  const double excess = within - noise_var;
  if (prior_within > 0.0 && excess > 0.0) t.alpha = std::sqrt(excess / prior_within);
  return t;
}

inline nlohmann::json to_json(const Theta& t) { return {{"m0", t.m0}, {"s2", t.s2}, {"alpha", t.alpha}}; }

namespace detail {

inline double max_rel_theta_change(const Theta& a, const Theta& b) {
  return std::max({rel_change(a.m0, b.m0), rel_change(a.s2, b.s2), rel_change(a.alpha, b.alpha)});
}

}  // namespace detail

/// One expert: EP on partition `part`, alternated with the M-step until theta
/// settles (or only EP when `estimate` is false).
inline ExpertResult run_expert(const Vector& y, const DegradationOperator& op, const NoiseModel& noise,
                               const PatchGMM& base, const Partition& part, std::size_t index, const Theta& start,
                               bool estimate, const PipelineConfig& cfg, const EPConfig& ep_cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExpertResult r;
  r.index = index;
  r.shift_x = part.shift_x();
  r.shift_y = part.shift_y();
  MStepOptions mopt = cfg.mstep;
  mopt.estimate_alpha = cfg.estimate_alpha.value_or(noise.is_poisson());
  Theta theta = start;
  const std::size_t rounds = estimate ? cfg.max_outer : 1;
  for (std::size_t round = 1; round <= rounds; ++round) {
    const AdaptedGMM prior = adapt(base, theta);
    r.ep = noise.is_poisson() ? run_ep_poisson(y, op, prior, part, ep_cfg)
                              : run_ep_gaussian(y, op, noise.sigma2, prior, part, ep_cfg);
    r.theta = theta;
    r.outer_rounds = round;
    if (!estimate) break;
    const auto st = cfg.em_moments == EmMoments::Posterior
                        ? em_statistics(r.ep.weights, r.ep.mean, r.ep.cov, base, part)
                        : em_statistics_conditional(r.ep.weights, r.ep.mean, r.ep.cov, r.ep.q_x0.precision,
                                                    r.ep.q_x0.mean, prior, part);
    const Theta next = m_step(st, theta, mopt).theta;
    const bool settled = detail::max_rel_theta_change(next, theta) < cfg.outer_tol;
    theta = next;
    if (settled) break;
  }
  r.mean = r.ep.mean;
  r.variances = r.ep.variances;
  r.weights = r.ep.weights;
  r.iterations = r.ep.iterations;
  r.converged = r.ep.converged;
  r.failed_blocks = r.ep.failed_blocks;
  r.seconds = detail::seconds_since(t0);
  return r;
}

/// Runs every expert (shifted partition), optionally with EP-EM, and fuses
/// them. Expert i uses seed derive_seed(ep.seed, i), so results do not depend
/// on scheduling. Experts that throw are reported and left out of the fusion.
inline PipelineResult run_pipeline(const Vector& y, const DegradationOperator& op, const NoiseModel& noise,
                                   const PatchGMM& base, std::size_t width, std::size_t height,
                                   const PipelineConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  require(base.components() > 0, "pipeline: empty GMM");
  const auto patch = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(base.dim()))));
  require(patch * patch == base.dim(), "pipeline: GMM dimension is not a square patch");
  require(width * height == static_cast<std::size_t>(y.size()) && op.size() == width * height,
          "pipeline: image, operator and observation sizes differ");
  std::vector<std::size_t> indices = cfg.experts;
  if (indices.empty())
    for (std::size_t i = 0; i < patch * patch; ++i) indices.push_back(i);
  for (auto i : indices) require(i < patch * patch, "pipeline: expert index exceeds patch_size^2 - 1");

  auto partition_of = [&](std::size_t i) { return Partition(width, height, patch, i % patch, i / patch); };
  std::mutex trace_mutex;
  auto expert_cfg = [&](std::size_t i) {
    EPConfig c = cfg.ep;
    c.seed = derive_seed(cfg.ep.seed, i);
    if (indices.size() > 1 && cfg.expert_threads > 1) c.threads = 1;
    if (cfg.ep.trace) {
      c.trace = [&, i](const nlohmann::json& rec) {
        nlohmann::json r = rec;
        r["expert"] = i;
        std::lock_guard lock(trace_mutex);
        cfg.ep.trace(r);
      };
    }
    return c;
  };

  std::vector<ExpertResult> results(indices.size());
  auto run_one = [&](std::size_t e, const Theta& start, bool estimate) {
    const std::size_t i = indices[e];
    try {
      results[e] = run_expert(y, op, noise, base, partition_of(i), i, start, estimate, cfg, expert_cfg(i));
    } catch (const std::exception& ex) {
      results[e].index = i;
      results[e].error = ex.what();
    }
  };
  const bool estimate_alpha = cfg.estimate_alpha.value_or(noise.is_poisson());
  auto start_of = [&](std::size_t e) {
    return cfg.theta_init ? *cfg.theta_init
                          : initial_theta(y, op, noise, base, partition_of(indices[e]), cfg.estimate_theta && estimate_alpha);
  };
  std::size_t first = 0;
  std::optional<Theta> shared;
  if (cfg.share_theta && cfg.estimate_theta) {
    run_one(0, start_of(0), true);
    if (results[0].error.empty()) shared = results[0].theta;
    first = 1;
  }
  parallel_for(indices.size() - first, cfg.expert_threads, [&](std::size_t k) {
    const std::size_t e = k + first;
    if (shared) {
      run_one(e, *shared, false);
    } else {
      run_one(e, start_of(e), cfg.estimate_theta);
    }
  });

  std::vector<Vector> means, vars;
  nlohmann::json experts = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json j{{"index", r.index}, {"shift", {r.shift_x, r.shift_y}}};
    if (!r.error.empty()) {
      j["status"] = "failed";
      j["error"] = r.error;
    } else {
      means.push_back(r.mean);
      vars.push_back(r.variances);
      j["status"] = r.converged ? "converged" : "max_iterations";
      j["theta"] = to_json(r.theta);
      j["iterations"] = r.iterations;
      j["outer_rounds"] = r.outer_rounds;
      j["failed_blocks"] = r.failed_blocks;
      if (cfg.report_timings) j["seconds"] = r.seconds;
    }
    experts.push_back(j);
  }
  if (means.empty()) throw NumericalError("pipeline: every expert failed (" + results.front().error + ")");
  PipelineResult out;
  out.fused = fuse_poe(means, vars);
  out.experts = std::move(results);
  out.report = {{"experts", experts},
                {"fused_experts", means.size()},
                {"noise", noise.name()},
                {"all_converged", std::all_of(out.experts.begin(), out.experts.end(),
                                              [](const ExpertResult& r) { return r.error.empty() && r.converged; })}};
  if (cfg.report_timings) out.report["seconds"] = detail::seconds_since(t0);
  return out;
}

}  // namespace patchep
