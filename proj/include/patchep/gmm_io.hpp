#pragma once

#include <string>

#include "patchep/gmm.hpp"
#include "patchep/image.hpp"

namespace patchep {

inline constexpr std::array<unsigned char, 4> kGmmMagic{'P', 'E', 'P', 'G'};
inline constexpr std::uint32_t kGmmVersion = 1;

/// "PEPG", u32 version, u32 K, u32 dim, then per component: f64 weight,
/// dim f64 mean, dim*dim f64 covariance (row-major). Little-endian.
inline void save_gmm(const std::string& path, const PatchGMM& gmm) {
  gmm.validate();
  std::vector<unsigned char> bytes(kGmmMagic.begin(), kGmmMagic.end());
  const auto d = static_cast<Eigen::Index>(gmm.dim());
  detail::put_u32(bytes, kGmmVersion);
  detail::put_u32(bytes, static_cast<std::uint32_t>(gmm.components()));
  detail::put_u32(bytes, static_cast<std::uint32_t>(d));
  for (std::size_t k = 0; k < gmm.components(); ++k) {
    detail::put_f64(bytes, gmm.weights[k]);
    for (Eigen::Index i = 0; i < d; ++i) detail::put_f64(bytes, gmm.means[k][i]);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) detail::put_f64(bytes, gmm.covs[k](i, j));
  }
  detail::write_all(path, bytes);
}

inline PatchGMM load_gmm(const std::string& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() < 16 || !std::equal(kGmmMagic.begin(), kGmmMagic.end(), bytes.begin()))
    throw IoError("'" + path + "' is not a GMM file (bad magic)");
  const auto version = detail::get_u32(&bytes[4]);
  if (version != kGmmVersion) throw IoError("GMM file '" + path + "' has unsupported version");
  const std::size_t K = detail::get_u32(&bytes[8]);
  const std::size_t d = detail::get_u32(&bytes[12]);
  if (K == 0 || d == 0) throw IoError("GMM file '" + path + "' declares an empty model");
  const std::size_t per = 8 * (1 + d + d * d);
  if (d > 4096 || K > 100000 || (bytes.size() - 16) / per < K) throw IoError("GMM file '" + path + "' is truncated");
  PatchGMM gmm;
  const unsigned char* p = bytes.data() + 16;
  const auto dd = static_cast<Eigen::Index>(d);
  for (std::size_t k = 0; k < K; ++k) {
    gmm.weights.push_back(detail::get_f64(p));
    p += 8;
    Vector mu(dd);
    for (Eigen::Index i = 0; i < dd; ++i, p += 8) mu[i] = detail::get_f64(p);
    Matrix c(dd, dd);
    for (Eigen::Index i = 0; i < dd; ++i)
      for (Eigen::Index j = 0; j < dd; ++j, p += 8) c(i, j) = detail::get_f64(p);
    gmm.means.push_back(std::move(mu));
    gmm.covs.push_back(std::move(c));
  }
  try {
    gmm.validate();
  } catch (const InvalidInput& e) {
    throw IoError("GMM file '" + path + "' is invalid: " + e.what());
  }
  return gmm;
}

}  // namespace patchep
