#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/linalg.hpp"

namespace patchep {

/// Tiling of a W x H image into non-overlapping square patches, offset by a
/// shift. Blocks cut by the image border are kept with fewer pixels; each
/// block records which positions of the full patch it covers (its shape),
/// which is what the prior is marginalized onto.
class Partition {
 public:
  Partition(std::size_t width, std::size_t height, std::size_t patch_size, std::size_t shift_x, std::size_t shift_y)
      : width_(width), height_(height), patch_size_(patch_size), shift_x_(shift_x), shift_y_(shift_y) {
    require(patch_size >= 1, "patch size must be positive");
    require(width >= patch_size && height >= patch_size, "image is smaller than the patch size");
    require(shift_x < patch_size && shift_y < patch_size, "shift must lie in [0, patch_size)");
    build();
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t pixel_count() const { return width_ * height_; }
  std::size_t patch_size() const { return patch_size_; }
  std::size_t patch_dim() const { return patch_size_ * patch_size_; }
  std::size_t shift_x() const { return shift_x_; }
  std::size_t shift_y() const { return shift_y_; }

  std::size_t block_count() const { return blocks_.size(); }
  const std::vector<std::size_t>& block(std::size_t j) const { return blocks_.at(j); }
  const std::vector<std::vector<std::size_t>>& blocks() const { return blocks_; }

  /// Positions (row-major within the full patch) covered by block j.
  const std::vector<std::size_t>& shape_of(std::size_t j) const { return shapes_.at(shape_id_.at(j)); }
  std::size_t shape_id(std::size_t j) const { return shape_id_.at(j); }
  std::size_t shape_count() const { return shapes_.size(); }
  const std::vector<std::size_t>& shape(std::size_t s) const { return shapes_.at(s); }

  std::size_t block_of_pixel(std::size_t n) const { return pixel_block_.at(n); }
  std::size_t position_in_block(std::size_t n) const { return pixel_pos_.at(n); }

  std::size_t max_block_size() const {
    std::size_t m = 0;
    for (const auto& b : blocks_) m = std::max(m, b.size());
    return m;
  }

 private:
  // Cut points along one axis: [0, shift) then full runs of patch_size, last run truncated.
  static std::vector<std::pair<std::size_t, std::size_t>> runs(std::size_t extent, std::size_t p, std::size_t shift) {
    std::vector<std::pair<std::size_t, std::size_t>> out;  // (start, local offset of start)
    if (shift > 0) out.emplace_back(0, p - shift);
    for (std::size_t s = shift; s < extent; s += p) out.emplace_back(s, 0);
    return out;
  }

  void build() {
    const auto cols = runs(width_, patch_size_, shift_x_);
    const auto rows = runs(height_, patch_size_, shift_y_);
    std::map<std::vector<std::size_t>, std::size_t> shape_index;
    pixel_block_.assign(width_ * height_, 0);
    pixel_pos_.assign(width_ * height_, 0);
    for (std::size_t br = 0; br < rows.size(); ++br) {
      const auto [r0, roff] = rows[br];
      const std::size_t r1 = br + 1 < rows.size() ? rows[br + 1].first : height_;
      for (std::size_t bc = 0; bc < cols.size(); ++bc) {
        const auto [c0, coff] = cols[bc];
        const std::size_t c1 = bc + 1 < cols.size() ? cols[bc + 1].first : width_;
        std::vector<std::size_t> pixels;
        std::vector<std::size_t> local;
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t c = c0; c < c1; ++c) {
            pixel_block_[r * width_ + c] = blocks_.size();
            pixel_pos_[r * width_ + c] = pixels.size();
            pixels.push_back(r * width_ + c);
            local.push_back((r - r0 + roff) * patch_size_ + (c - c0 + coff));
          }
        }
        auto [it, inserted] = shape_index.try_emplace(local, shapes_.size());
        if (inserted) shapes_.push_back(local);
        shape_id_.push_back(it->second);
        blocks_.push_back(std::move(pixels));
      }
    }
  }

  std::size_t width_, height_, patch_size_, shift_x_, shift_y_;
  std::vector<std::vector<std::size_t>> blocks_;
  std::vector<std::vector<std::size_t>> shapes_;
  std::vector<std::size_t> shape_id_;
  std::vector<std::size_t> pixel_block_;
  std::vector<std::size_t> pixel_pos_;
};

/// All patch_size^2 one-pixel shifts; partition i has shift (i % p, i / p).
inline std::vector<Partition> build_shifted_partitions(std::size_t width, std::size_t height, std::size_t patch_size) {
  require(patch_size >= 2, "patch size must be at least 2");
  require(width >= patch_size && height >= patch_size, "image dimensions must be at least the patch size");
  std::vector<Partition> out;
  out.reserve(patch_size * patch_size);
  for (std::size_t dy = 0; dy < patch_size; ++dy)
    for (std::size_t dx = 0; dx < patch_size; ++dx) out.emplace_back(width, height, patch_size, dx, dy);
  return out;
}

inline Vector gather(const Vector& v, const Partition& p, std::size_t j) {
  require(j < p.block_count(), "block index out of range");
  require(static_cast<std::size_t>(v.size()) == p.pixel_count(), "vector length does not match partition");
  const auto& idx = p.block(j);
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t a = 0; a < idx.size(); ++a) out[static_cast<Eigen::Index>(a)] = v[static_cast<Eigen::Index>(idx[a])];
  return out;
}

inline void scatter(const Vector& values, const Partition& p, std::size_t j, Vector& v) {
  require(j < p.block_count(), "block index out of range");
  require(static_cast<std::size_t>(v.size()) == p.pixel_count(), "vector length does not match partition");
  const auto& idx = p.block(j);
  require(static_cast<std::size_t>(values.size()) == idx.size(), "block value length does not match block size");
  for (std::size_t a = 0; a < idx.size(); ++a) v[static_cast<Eigen::Index>(idx[a])] = values[static_cast<Eigen::Index>(a)];
}

}  // namespace patchep
