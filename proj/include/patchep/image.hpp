#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

/// Grayscale image, row-major, real intensities.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), data(w * h, fill) {}
  Image(std::size_t w, std::size_t h, std::vector<double> values)
      : width(w), height(h), data(std::move(values)) {
    validate();
  }

  std::size_t size() const { return data.size(); }
  double& at(std::size_t row, std::size_t col) { return data[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return data[row * width + col]; }

  void validate() const {
    require(data.size() == width * height, "image data length does not match width*height");
    for (double v : data) require(std::isfinite(v), "image contains non-finite intensities");
  }

  Vector as_vector() const { return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size())); }

  static Image from_vector(std::size_t w, std::size_t h, const Vector& v) {
    require(static_cast<std::size_t>(v.size()) == w * h, "vector length does not match image size");
    return Image(w, h, std::vector<double>(v.data(), v.data() + v.size()));
  }

  double max_value() const { return data.empty() ? 0.0 : *std::max_element(data.begin(), data.end()); }
};

struct PgmImage {
  Image image;          // raw sample values (0..maxval)
  unsigned maxval = 255;
};

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_all(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f64(std::vector<unsigned char>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}

inline double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

// Skips whitespace and '#' comments in a PNM header.
inline std::size_t skip_pnm_space(const std::vector<unsigned char>& b, std::size_t pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  return pos;
}

inline unsigned long read_pnm_int(const std::vector<unsigned char>& b, std::size_t& pos, const std::string& path) {
  pos = skip_pnm_space(b, pos);
  if (pos >= b.size() || !std::isdigit(b[pos])) throw IoError("malformed PGM header in '" + path + "'");
  unsigned long v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > 1000000000UL) throw IoError("PGM header value too large in '" + path + "'");
    ++pos;
  }
  return v;
}

}  // namespace detail

/// Binary PGM (P5), maxval up to 65535 (two big-endian bytes per sample above 255).
inline PgmImage read_pgm(const std::string& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw IoError("'" + path + "' is not a binary PGM (P5)");
  std::size_t pos = 2;
  const auto w = detail::read_pnm_int(bytes, pos, path);
  const auto h = detail::read_pnm_int(bytes, pos, path);
  const auto maxval = detail::read_pnm_int(bytes, pos, path);
  if (w == 0 || h == 0) throw IoError("PGM '" + path + "' has zero size");
  if (maxval == 0 || maxval > 65535) throw IoError("PGM '" + path + "' has invalid maxval");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw IoError("malformed PGM header in '" + path + "'");
  ++pos;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < n * bps) throw IoError("PGM '" + path + "' is truncated");
  PgmImage out;
  out.maxval = static_cast<unsigned>(maxval);
  out.image = Image(w, h);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bps == 1 ? bytes[pos + i] : (static_cast<unsigned>(bytes[pos + 2 * i]) << 8) | bytes[pos + 2 * i + 1];
    if (v > maxval) throw IoError("PGM '" + path + "' has a sample above maxval");
    out.image.data[i] = v;
  }
  return out;
}

/// Writes raw sample values, rounded and clamped to [0, maxval].
inline void write_pgm(const std::string& path, const Image& img, unsigned maxval = 255) {
  require(maxval >= 1 && maxval <= 65535, "PGM maxval must be in [1, 65535]");
  img.validate();
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                       std::to_string(maxval) + "\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (double v : img.data) {
    const auto q = static_cast<unsigned>(std::clamp(std::lround(v), 0L, static_cast<long>(maxval)));
    if (maxval > 255) bytes.push_back(static_cast<unsigned char>(q >> 8));
    bytes.push_back(static_cast<unsigned char>(q & 0xFFu));
  }
  detail::write_all(path, bytes);
}

/// Linearly maps [lo, hi] onto [0, 255] and writes an 8-bit preview.
inline void write_pgm_normalized(const std::string& path, const Image& img, double lo, double hi) {
  Image scaled(img.width, img.height);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < img.size(); ++i) scaled.data[i] = 255.0 * (img.data[i] - lo) / span;
  write_pgm(path, scaled, 255);
}

inline constexpr std::array<unsigned char, 4> kPepfMagic{'P', 'E', 'P', 'F'};

/// Raw float32 raster: "PEPF", u32 width, u32 height, u32 reserved, then
/// width*height little-endian float32 samples in row-major order.
inline void write_pepf(const std::string& path, const Image& img) {
  img.validate();
  std::vector<unsigned char> bytes(kPepfMagic.begin(), kPepfMagic.end());
  detail::put_u32(bytes, static_cast<std::uint32_t>(img.width));
  detail::put_u32(bytes, static_cast<std::uint32_t>(img.height));
  detail::put_u32(bytes, 0);
  bytes.reserve(bytes.size() + 4 * img.size());
  for (double v : img.data) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    detail::put_u32(bytes, bits);
  }
  detail::write_all(path, bytes);
}

inline Image read_pepf(const std::string& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() < 16 || !std::equal(kPepfMagic.begin(), kPepfMagic.end(), bytes.begin()))
    throw IoError("'" + path + "' is not a PEPF raster");
  const std::size_t w = detail::get_u32(&bytes[4]);
  const std::size_t h = detail::get_u32(&bytes[8]);
  if (w == 0 || h == 0) throw IoError("PEPF '" + path + "' has zero size");
  if (bytes.size() - 16 < 4 * w * h) throw IoError("PEPF '" + path + "' is truncated");
  Image img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    const std::uint32_t bits = detail::get_u32(&bytes[16 + 4 * i]);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    if (!std::isfinite(f)) throw IoError("PEPF '" + path + "' contains non-finite samples");
    img.data[i] = f;
  }
  return img;
}

/// Reads either format, detected by magic. PGM samples are returned raw.
inline Image read_image(const std::string& path) {
  const auto bytes = detail::read_all(path);
  if (bytes.size() >= 4 && std::equal(kPepfMagic.begin(), kPepfMagic.end(), bytes.begin())) return read_pepf(path);
  return read_pgm(path).image;
}

}  // namespace patchep
