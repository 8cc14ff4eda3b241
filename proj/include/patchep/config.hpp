#pragma once

#include <string>

#include "json.hpp"
#include "patchep/errors.hpp"
#include "patchep/pipeline.hpp"

namespace patchep {

// JSON view of PipelineConfig. Keys mirror the C++ fields one to one:
//   {"ep": {..., "block_kl": {...}}, "pipeline": {...}, "mstep": {...}}
// Unknown keys are rejected so that typos do not pass silently.

inline nlohmann::json to_json(const PipelineConfig& c) {
  const auto& e = c.ep;
  nlohmann::json ep{{"damping", e.damping},
                    {"damp_first_iteration", e.damp_first_iteration},
                    {"stop_tol", e.stop_tol},
                    {"max_iters", e.max_iters},
                    {"cg_tol", e.cg_tol},
                    {"cg_max_iters", e.cg_max_iters},
                    {"rbmc_samples", e.rbmc_samples},
                    {"resample_rbmc", e.resample_rbmc},
                    {"structure", to_string(e.structure)},
                    {"seed", e.seed},
                    {"threads", e.threads},
                    {"block_kl",
                     {{"max_iters", e.block_kl.max_iters},
                      {"tol", e.block_kl.tol},
                      {"grad_tol", e.block_kl.grad_tol},
                      {"max_halvings", e.block_kl.max_halvings},
                      {"closed_form_when_spd", e.block_kl.closed_form_when_spd}}}};
  nlohmann::json pl{{"experts", c.experts},
                    {"estimate_theta", c.estimate_theta},
                    {"theta_init", c.theta_init ? to_json(*c.theta_init) : nlohmann::json(nullptr)},
                    {"estimate_alpha", c.estimate_alpha ? nlohmann::json(*c.estimate_alpha) : nlohmann::json(nullptr)},
                    {"em_moments", to_string(c.em_moments)},
                    {"max_outer", c.max_outer},
                    {"outer_tol", c.outer_tol},
                    {"share_theta", c.share_theta},
                    {"expert_threads", c.expert_threads},
                    {"report_timings", c.report_timings}};
  const auto& m = c.mstep;
  nlohmann::json ms{{"s2_min", m.s2_min},   {"s2_max", m.s2_max},         {"alpha_min", m.alpha_min},
                    {"alpha_max", m.alpha_max}, {"tol", m.tol},           {"max_rounds", m.max_rounds},
                    {"search_tol", m.search_tol}};
  return {{"ep", ep}, {"pipeline", pl}, {"mstep", ms}};
}

namespace detail {

template <class T>
void read_field(const nlohmann::json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidInput("config: '" + path + key + "' has the wrong type");
  }
}

inline void check_keys(const nlohmann::json& obj, const nlohmann::json& reference, const std::string& path) {
  if (!obj.is_object()) throw InvalidInput("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    if (!reference.contains(k)) throw InvalidInput("config: unknown key '" + path + k + "'");
    if (reference.at(k).is_object() && !reference.at(k).empty() && !v.is_null()) check_keys(v, reference.at(k), path + k + ".");
  }
}

inline Theta theta_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw InvalidInput("config: '" + path + "' must be an object {m0, s2, alpha}");
  Theta t;
  read_field(j, path + ".", "m0", t.m0);
  read_field(j, path + ".", "s2", t.s2);
  read_field(j, path + ".", "alpha", t.alpha);
  for (const auto& [k, v] : j.items())
    if (k != "m0" && k != "s2" && k != "alpha") throw InvalidInput("config: unknown key '" + path + "." + k + "'");
  require(t.s2 >= 0.0 && t.alpha > 0.0, "config: theta needs s2 >= 0 and alpha > 0");
  return t;
}

}  // namespace detail

/// Reads a (possibly partial) config on top of the defaults.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  nlohmann::json reference = to_json(c);
  reference["pipeline"]["theta_init"] = nlohmann::json::object();  // checked separately
  detail::check_keys(j, reference, "");
  if (j.contains("ep")) {
    const auto& e = j.at("ep");
    detail::read_field(e, "ep.", "damping", c.ep.damping);
    detail::read_field(e, "ep.", "damp_first_iteration", c.ep.damp_first_iteration);
    detail::read_field(e, "ep.", "stop_tol", c.ep.stop_tol);
    detail::read_field(e, "ep.", "max_iters", c.ep.max_iters);
    detail::read_field(e, "ep.", "cg_tol", c.ep.cg_tol);
    detail::read_field(e, "ep.", "cg_max_iters", c.ep.cg_max_iters);
    detail::read_field(e, "ep.", "rbmc_samples", c.ep.rbmc_samples);
    detail::read_field(e, "ep.", "resample_rbmc", c.ep.resample_rbmc);
    std::string structure = to_string(c.ep.structure);
    detail::read_field(e, "ep.", "structure", structure);
    c.ep.structure = parse_structure(structure);
    detail::read_field(e, "ep.", "seed", c.ep.seed);
    detail::read_field(e, "ep.", "threads", c.ep.threads);
    if (e.contains("block_kl")) {
      const auto& b = e.at("block_kl");
      detail::read_field(b, "ep.block_kl.", "max_iters", c.ep.block_kl.max_iters);
      detail::read_field(b, "ep.block_kl.", "tol", c.ep.block_kl.tol);
      detail::read_field(b, "ep.block_kl.", "grad_tol", c.ep.block_kl.grad_tol);
      detail::read_field(b, "ep.block_kl.", "max_halvings", c.ep.block_kl.max_halvings);
      detail::read_field(b, "ep.block_kl.", "closed_form_when_spd", c.ep.block_kl.closed_form_when_spd);
    }
  }
  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    detail::read_field(p, "pipeline.", "experts", c.experts);
    detail::read_field(p, "pipeline.", "estimate_theta", c.estimate_theta);
    if (p.contains("theta_init") && !p.at("theta_init").is_null())
      c.theta_init = detail::theta_from_json(p.at("theta_init"), "pipeline.theta_init");
    if (p.contains("estimate_alpha") && !p.at("estimate_alpha").is_null()) {
      bool v = false;
      detail::read_field(p, "pipeline.", "estimate_alpha", v);
      c.estimate_alpha = v;
    }
    std::string moments = to_string(c.em_moments);
    detail::read_field(p, "pipeline.", "em_moments", moments);
    c.em_moments = parse_em_moments(moments);
    detail::read_field(p, "pipeline.", "max_outer", c.max_outer);
    detail::read_field(p, "pipeline.", "outer_tol", c.outer_tol);
    detail::read_field(p, "pipeline.", "share_theta", c.share_theta);
    detail::read_field(p, "pipeline.", "expert_threads", c.expert_threads);
    detail::read_field(p, "pipeline.", "report_timings", c.report_timings);
  }
  if (j.contains("mstep")) {
    const auto& m = j.at("mstep");
    detail::read_field(m, "mstep.", "s2_min", c.mstep.s2_min);
    detail::read_field(m, "mstep.", "s2_max", c.mstep.s2_max);
    detail::read_field(m, "mstep.", "alpha_min", c.mstep.alpha_min);
    detail::read_field(m, "mstep.", "alpha_max", c.mstep.alpha_max);
    detail::read_field(m, "mstep.", "tol", c.mstep.tol);
    detail::read_field(m, "mstep.", "max_rounds", c.mstep.max_rounds);
    detail::read_field(m, "mstep.", "search_tol", c.mstep.search_tol);
  }
  c.ep.validate();
  require(c.max_outer >= 1 && c.outer_tol > 0.0, "config: max_outer must be >= 1 and outer_tol > 0");
  require(c.expert_threads >= 1, "config: expert_threads must be >= 1");
  return c;
}

/// Applies "a.b.c=value" to a JSON document. The value is parsed as JSON when
/// possible (numbers, booleans, null, arrays, objects) and kept as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), "override key '" + key + "' has an empty component");
    if (node->is_null()) *node = nlohmann::json::object();
    require(node->is_object(), "override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace patchep
