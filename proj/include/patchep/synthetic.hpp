#pragma once

#include <algorithm>
#include <cmath>

#include "patchep/gmm_em.hpp"
#include "patchep/image.hpp"
#include "patchep/random.hpp"

namespace patchep {

/// Piecewise-smooth test scene in [0, 1]: a tilted background, random
/// ellipses and rectangles with their own shading, and a faint texture.
/// A pure function of (width, height, seed).
inline Image synthetic_scene(std::size_t width, std::size_t height, std::uint64_t seed) {
  require(width > 0 && height > 0, "scene must have positive size");
  CounterRng rng(seed, 0x5CE);
  Image img(width, height);
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  const double gx = rng.uniform() - 0.5, gy = rng.uniform() - 0.5, base = 0.3 + 0.4 * rng.uniform();
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c)
      img.at(r, c) = base + 0.3 * (gx * static_cast<double>(c) / w + gy * static_cast<double>(r) / h);

  const std::size_t shapes = 4 + static_cast<std::size_t>(rng() % 5);
  for (std::size_t s = 0; s < shapes; ++s) {
    const double cx = w * rng.uniform(), cy = h * rng.uniform();
    const double ax = w * (0.08 + 0.25 * rng.uniform()), ay = h * (0.08 + 0.25 * rng.uniform());
    const double level = rng.uniform(), shade = 0.2 * (rng.uniform() - 0.5);
    const bool ellipse = rng.uniform() < 0.5;
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        const double dx = (static_cast<double>(c) - cx) / ax, dy = (static_cast<double>(r) - cy) / ay;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (inside) img.at(r, c) = level + shade * dx;
      }
  }

  const double fx = 0.3 + 0.6 * rng.uniform(), fy = 0.3 + 0.6 * rng.uniform(), ph = 6.3 * rng.uniform();
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double t = 0.03 * std::sin(fx * static_cast<double>(c) + fy * static_cast<double>(r) + ph);
      img.at(r, c) = std::clamp(img.at(r, c) + t, 0.0, 1.0);
    }
  return img;
}

struct DeskGmmOptions {
  std::size_t patch_size = 8;
  std::size_t components = 5;
  std::size_t images = 12;       // 96 x 96 training scenes
  std::size_t stride = 2;
  std::size_t max_iters = 60;
  double cov_floor = 1e-4;
  std::uint64_t seed = 2024;
  unsigned threads = 1;
};

/// Zero-mean patch GMM trained by EM on mean-removed patches of synthetic
/// scenes; stands in for a GMM learned from natural images.
inline PatchGMM desk_gmm(const DeskGmmOptions& opt = {}) {
  require(opt.images > 0, "need at least one training scene");
  std::vector<Matrix> parts;
  Eigen::Index cols = 0;
  for (std::size_t i = 0; i < opt.images; ++i) {
    parts.push_back(extract_patches(synthetic_scene(96, 96, derive_seed(opt.seed, i)), opt.patch_size, opt.stride, true));
    cols += parts.back().cols();
  }
  Matrix x(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    x.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  EmOptions em;
  em.components = opt.components;
  em.max_iters = opt.max_iters;
  em.cov_floor = opt.cov_floor;
  em.seed = opt.seed;
  em.threads = opt.threads;
  return train_em(x, em).gmm;
}

}  // namespace patchep
