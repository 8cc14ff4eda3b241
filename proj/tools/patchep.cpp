// patchep: degrade / restore / evaluate / train-gmm / verify.
// Exit codes: 0 success, 1 verification checks failed, 2 input error, 3 internal error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchep/config.hpp"
#include "patchep/gmm_em.hpp"
#include "patchep/gmm_io.hpp"
#include "patchep/image.hpp"
#include "patchep/metrics.hpp"
#include "patchep/noise.hpp"
#include "patchep/oracle/verify.hpp"
#include "patchep/pipeline.hpp"
#include "patchep/synthetic.hpp"

using namespace patchep;
using nlohmann::json;

namespace {

constexpr int kInputError = 2;
constexpr int kInternalError = 3;

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw IoError("'" + path + "' is not valid JSON");
  return j;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

/// PGM samples are mapped to [0, 1]; float rasters are taken as they are.
Image load_intensities(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file '" + path + "'");
  const auto bytes = detail::read_all(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
    auto pgm = read_pgm(path);
    for (auto& v : pgm.image.data) v /= static_cast<double>(pgm.maxval);
    return pgm.image;
  }
  return read_pepf(path);
}

void write_preview(const std::string& path, const Image& img, double scale) {
  Image out(img.width, img.height);
  for (std::size_t i = 0; i < img.size(); ++i) out.data[i] = 255.0 * img.data[i] / scale;
  write_pgm(path, out, 255);
}

std::string mask_bits(const std::vector<bool>& kept) {
  std::string s(kept.size(), '1');
  for (std::size_t i = 0; i < kept.size(); ++i) s[i] = kept[i] ? '1' : '0';
  return s;
}

json operator_to_json(const DegradationOperator& op) {
  switch (op.kind()) {
    case DegradationOperator::Kind::Identity: return {{"kind", "identity"}};
    case DegradationOperator::Kind::Mask: return {{"kind", "mask"}, {"kept", mask_bits(op.kept())}};
    default: {
      std::vector<std::vector<double>> k;
      for (Eigen::Index a = 0; a < op.kernel().rows(); ++a) {
        k.emplace_back();
        for (Eigen::Index b = 0; b < op.kernel().cols(); ++b) k.back().push_back(op.kernel()(a, b));
      }
      return {{"kind", "conv2d"}, {"kernel", k}};
    }
  }
}

DegradationOperator operator_from_json(const json& j, std::size_t w, std::size_t h) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "identity") return DegradationOperator::identity(w, h);
  if (kind == "mask") {
    const auto bits = j.at("kept").get<std::string>();
    require(bits.size() == w * h, "sidecar mask length does not match the image");
    std::vector<bool> kept(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) kept[i] = bits[i] == '1';
    return DegradationOperator::mask(w, h, kept);
  }
  if (kind == "conv2d") {
    const auto rows = j.at("kernel").get<std::vector<std::vector<double>>>();
    require(!rows.empty(), "sidecar kernel is empty");
    Matrix k(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t a = 0; a < rows.size(); ++a) {
      require(rows[a].size() == rows.size(), "sidecar kernel must be square");
      for (std::size_t b = 0; b < rows.size(); ++b) k(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = rows[a][b];
    }
    return DegradationOperator::conv2d(w, h, k);
  }
  throw InvalidInput("unknown operator kind '" + kind + "' in sidecar");
}

NoiseModel noise_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "poisson") return NoiseModel::poisson();
  if (kind == "gaussian") return NoiseModel::gaussian(j.at("sigma2").get<double>());
  throw InvalidInput("unknown noise kind '" + kind + "' in sidecar");
}

// ---- degrade ----

struct DegradeArgs {
  std::string input, output, sidecar, op = "identity", mask, kernel, save_clean;
  std::int64_t scene = -1;
  std::size_t size = 64;
  double missing = 0.6, sigma = 25.0 / 255.0, peak = 30.0;
  std::size_t blur = 3;
  bool poisson = false;
  std::uint64_t seed = 1;
};

int cmd_degrade(const DegradeArgs& a) {
  require(a.input.empty() != (a.scene < 0), "give either an input image or --scene");
  const Image clean = a.scene >= 0 ? synthetic_scene(a.size, a.size, static_cast<std::uint64_t>(a.scene))
                                   : load_intensities(a.input);
  if (!a.save_clean.empty()) write_pgm(a.save_clean, Image::from_vector(clean.width, clean.height, 255.0 * clean.as_vector()), 255);
  const std::size_t w = clean.width, h = clean.height;
  DegradationOperator op = DegradationOperator::identity(w, h);
  if (a.op == "mask") {
    std::vector<bool> kept;
    if (!a.mask.empty()) {
      kept = read_mask(a.mask);
      require(kept.size() == w * h, "mask size does not match the image");
    } else {
      require(a.missing >= 0.0 && a.missing < 1.0, "--missing must lie in [0, 1)");
      CounterRng rng(a.seed, 0x3A5C);
      kept.resize(w * h);
      for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = rng.uniform() >= a.missing;
    }
    op = DegradationOperator::mask(w, h, kept);
  } else if (a.op == "blur") {
    op = DegradationOperator::conv2d(w, h, a.kernel.empty() ? uniform_kernel(a.blur) : read_kernel(a.kernel));
  } else {
    require(a.op == "identity", "--op must be identity, mask or blur");
  }
  NoiseModel noise = a.poisson ? NoiseModel::poisson() : NoiseModel::gaussian(a.sigma * a.sigma);
  const double scale = a.poisson ? a.peak : 1.0;
  require(scale > 0.0, "--peak must be positive");
  const Vector y = simulate(op, scale * clean.as_vector(), noise, a.seed);
  const Image obs = Image::from_vector(w, h, y);
  write_pepf(a.output, obs);
  write_preview(std::filesystem::path(a.output).replace_extension(".pgm").string(), obs, scale);
  json side{{"width", w},
            {"height", h},
            {"operator", operator_to_json(op)},
            {"noise", a.poisson ? json{{"kind", "poisson"}} : json{{"kind", "gaussian"}, {"sigma2", noise.sigma2}}},
            {"scale", scale},
            {"seed", a.seed},
            {"source", a.scene >= 0 ? "scene:" + std::to_string(a.scene) : std::filesystem::path(a.input).filename().string()}};
  write_json(a.sidecar.empty() ? a.output + ".json" : a.sidecar, side);
  return 0;
}

// ---- restore ----

struct RestoreArgs {
  std::string observed, sidecar, gmm, config, out = "restored";
  std::vector<std::string> sets;
  bool single_partition = false, print_config = false;
  unsigned threads = 0;
};

int cmd_restore(const RestoreArgs& a) {
  json cfg_doc = to_json(PipelineConfig{});
  if (!a.config.empty()) cfg_doc = read_json(a.config);
  for (const auto& s : a.sets) apply_override(cfg_doc, s);
  PipelineConfig cfg = pipeline_config_from_json(cfg_doc);
  if (a.single_partition) cfg.experts = {0};
  if (a.threads > 0) cfg.expert_threads = a.threads;
  if (a.print_config) {
    std::cout << to_json(cfg).dump(2) << "\n";
    return 0;
  }
  const json side = read_json(a.sidecar.empty() ? a.observed + ".json" : a.sidecar);
  const Image obs = read_pepf(a.observed);
  const auto w = side.at("width").get<std::size_t>(), h = side.at("height").get<std::size_t>();
  require(obs.width == w && obs.height == h, "observation and sidecar sizes differ");
  const auto op = operator_from_json(side.at("operator"), w, h);
  const auto noise = noise_from_json(side.at("noise"));
  const double scale = side.value("scale", 1.0);
  const PatchGMM gmm = load_gmm(a.gmm);

  const auto res = run_pipeline(obs.as_vector(), op, noise, gmm, w, h, cfg);
  const Image mean = Image::from_vector(w, h, res.fused.mean);
  const Image var = Image::from_vector(w, h, res.fused.variances);
  write_pepf(a.out + "_mean.pepf", mean);
  write_preview(a.out + "_mean.pgm", mean, scale);
  write_pepf(a.out + "_var.pepf", var);
  write_pgm_normalized(a.out + "_var.pgm", var, 0.0, res.fused.variances.maxCoeff());
  json report = res.report;
  report["status"] = report.at("all_converged").get<bool>() ? "converged" : "not_converged";
  report["config"] = to_json(cfg);
  report["scale"] = scale;
  write_json(a.out + "_report.json", report);
  std::cout << "status " << report["status"].get<std::string>() << ", " << report["fused_experts"] << " experts fused\n";
  return 0;
}

// ---- evaluate ----

struct EvaluateArgs {
  std::string reference, mean, variance, outside_map, output;
  std::vector<double> levels = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99};
  double scale = 1.0, level = 0.95;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Vector ref = a.scale * load_intensities(a.reference).as_vector();
  const Image mean = load_intensities(a.mean);
  require(static_cast<std::size_t>(ref.size()) == mean.size(), "reference and restored mean sizes differ");
  json out{{"psnr", psnr(ref, mean.as_vector())}};
  if (!std::isfinite(out["psnr"].get<double>())) out["psnr"] = "inf";
  if (!a.variance.empty()) {
    const Image var = load_intensities(a.variance);
    require(var.size() == mean.size(), "variance map size differs");
    const auto cov = coverage(ref, mean.as_vector(), var.as_vector(), a.level);
    out["coverage"] = {{"level", a.level}, {"fraction", cov.fraction}};
    out["coverage_curve"] = {{"levels", a.levels}, {"fraction", coverage_curve(ref, mean.as_vector(), var.as_vector(), a.levels)}};
    if (!a.outside_map.empty()) {
      Image map(mean.width, mean.height);
      for (std::size_t i = 0; i < map.size(); ++i) map.data[i] = cov.outside[i] ? 255.0 : 0.0;
      write_pgm(a.outside_map, map, 255);
    }
  }
  if (a.output.empty()) std::cout << out.dump(2) << "\n";
  else write_json(a.output, out);
  return 0;
}

// ---- train-gmm ----

struct TrainArgs {
  std::vector<std::string> images;
  std::string output;
  std::size_t synthetic = 0, patch = 8, components = 5, stride = 2, iters = 60;
  double cov_floor = 1e-4;
  std::uint64_t seed = 2024;
  unsigned threads = 1;
};

int cmd_train(const TrainArgs& a) {
  PatchGMM g;
  if (a.images.empty()) {
    DeskGmmOptions o;
    o.patch_size = a.patch;
    o.components = a.components;
    o.images = a.synthetic ? a.synthetic : o.images;
    o.stride = a.stride;
    o.max_iters = a.iters;
    o.cov_floor = a.cov_floor;
    o.seed = a.seed;
    o.threads = a.threads;
    g = desk_gmm(o);
  } else {
    std::vector<Matrix> parts;
    Eigen::Index cols = 0;
    for (const auto& path : a.images) {
      parts.push_back(extract_patches(load_intensities(path), a.patch, a.stride, true));
      cols += parts.back().cols();
    }
    Matrix x(parts.front().rows(), cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      x.middleCols(at, p.cols()) = p;
      at += p.cols();
    }
    EmOptions em;
    em.components = a.components;
    em.max_iters = a.iters;
    em.cov_floor = a.cov_floor;
    em.seed = a.seed;
    em.threads = a.threads;
    g = train_em(x, em).gmm;
  }
  save_gmm(a.output, g);
  std::cout << "trained " << g.components() << " components of dimension " << g.dim() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-based EP image restoration with a GMM patch prior"};
  app.require_subcommand(1);

  DegradeArgs d;
  auto* deg = app.add_subcommand("degrade", "Simulate an observation y = Hx + noise");
  deg->add_option("output", d.output, "Observed float raster (PEPF); a PGM preview is written alongside")->required();
  deg->add_option("--input", d.input, "Clean image (PGM mapped to [0,1], or PEPF)");
  deg->add_option("--scene", d.scene, "Use the synthetic scene with this seed instead of --input");
  deg->add_option("--size", d.size, "Side length of the synthetic scene")->capture_default_str();
  deg->add_option("--save-clean", d.save_clean, "Also write the clean image as PGM");
  deg->add_option("--sidecar", d.sidecar, "Metadata JSON (default: <output>.json)");
  deg->add_option("--op", d.op, "identity | mask | blur")->capture_default_str();
  deg->add_option("--mask", d.mask, "Mask PGM (0 = missing) for --op mask");
  deg->add_option("--missing", d.missing, "Random missing fraction when no mask file is given")->capture_default_str();
  deg->add_option("--blur", d.blur, "Uniform blur size for --op blur")->capture_default_str();
  deg->add_option("--kernel", d.kernel, "Kernel text file for --op blur (overrides --blur)");
  deg->add_option("--sigma", d.sigma, "Gaussian noise std in [0,1] intensity units")->capture_default_str();
  deg->add_flag("--poisson", d.poisson, "Poisson noise instead of Gaussian");
  deg->add_option("--peak", d.peak, "Poisson: intensity scale (clean image times peak)")->capture_default_str();
  deg->add_option("--seed", d.seed, "Noise and mask seed")->capture_default_str();

  RestoreArgs r;
  auto* res = app.add_subcommand("restore", "Run EP (with EP-EM) for every expert and fuse");
  res->add_option("observed", r.observed, "Observed PEPF raster");
  res->add_option("--sidecar", r.sidecar, "Metadata JSON (default: <observed>.json)");
  res->add_option("--gmm", r.gmm, "GMM file (from train-gmm)");
  res->add_option("--config", r.config, "JSON config; see --print-config for keys and defaults");
  res->add_option("--set", r.sets, "Override a config key, e.g. --set ep.max_iters=20 (repeatable)");
  res->add_option("--out", r.out, "Output prefix")->capture_default_str();
  res->add_flag("--single-partition", r.single_partition, "Use only the unshifted partition (no fusion)");
  res->add_option("--threads", r.threads, "Experts run in parallel (overrides pipeline.expert_threads)");
  res->add_flag("--print-config", r.print_config, "Print the effective config and exit");

  EvaluateArgs e;
  auto* ev = app.add_subcommand("evaluate", "PSNR and credible-interval coverage against a reference");
  ev->add_option("reference", e.reference, "Ground truth (PGM mapped to [0,1], or PEPF)")->required();
  ev->add_option("mean", e.mean, "Restored mean (PEPF)")->required();
  ev->add_option("--variance", e.variance, "Posterior variance map (PEPF)");
  ev->add_option("--scale", e.scale, "Multiply the reference by this (the sidecar scale)")->capture_default_str();
  ev->add_option("--level", e.level, "Credible level for the coverage map")->capture_default_str();
  ev->add_option("--levels", e.levels, "Increasing levels for the coverage curve");
  ev->add_option("--outside-map", e.outside_map, "PGM: 255 where the truth lies outside the interval");
  ev->add_option("--output", e.output, "Write metrics JSON here instead of stdout");

  TrainArgs t;
  auto* tr = app.add_subcommand("train-gmm", "Fit a patch GMM by EM on mean-removed patches");
  tr->add_option("output", t.output, "GMM file to write")->required();
  tr->add_option("--images", t.images, "Training images (default: synthetic scenes)");
  tr->add_option("--synthetic", t.synthetic, "Number of synthetic 96x96 scenes when no images are given");
  tr->add_option("--patch", t.patch, "Patch side length")->capture_default_str();
  tr->add_option("--components", t.components, "Mixture components K")->capture_default_str();
  tr->add_option("--stride", t.stride, "Patch extraction stride")->capture_default_str();
  tr->add_option("--iters", t.iters, "EM iterations")->capture_default_str();
  tr->add_option("--cov-floor", t.cov_floor, "Covariance ridge")->capture_default_str();
  tr->add_option("--seed", t.seed, "Seed")->capture_default_str();
  tr->add_option("--threads", t.threads, "Threads for the E-step")->capture_default_str();

  std::uint64_t verify_seed = 1;
  std::string verify_out;
  auto* ver = app.add_subcommand("verify", "Run the oracle comparisons; exit 1 if any fails");
  ver->add_option("--seed", verify_seed, "Seed for the random instances")->capture_default_str();
  ver->add_option("--output", verify_out, "Write the JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kInputError;
  }

  try {
    if (*deg) return cmd_degrade(d);
    if (*res) {
      if (!r.print_config) {
        require(!r.observed.empty(), "restore needs an observed raster");
        require(!r.gmm.empty(), "restore needs --gmm");
      }
      return cmd_restore(r);
    }
    if (*ev) return cmd_evaluate(e);
    if (*tr) return cmd_train(t);
    if (*ver) {
      const json v = oracle::run_verification(verify_seed);
      if (verify_out.empty()) std::cout << v.dump(2) << "\n";
      else write_json(verify_out, v);
      return v.at("all_passed").get<bool>() ? 0 : 1;
    }
  } catch (const InvalidInput& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kInputError;
  } catch (const IoError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kInputError;
  } catch (const json::exception& ex) {
    std::cerr << "error: malformed JSON input: " << ex.what() << "\n";
    return kInputError;
  } catch (const std::exception& ex) {
    std::cerr << "internal error: " << ex.what() << "\n";
    return kInternalError;
  }
  return 0;
}
