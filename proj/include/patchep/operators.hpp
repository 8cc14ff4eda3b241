#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "patchep/errors.hpp"
#include "patchep/image.hpp"
#include "patchep/linalg.hpp"
#include "patchep/partition.hpp"

namespace patchep {

using SparseRow = std::vector<std::pair<std::size_t, double>>;  // (pixel, coefficient)

/// Matrix-free degradation operator H on a width x height image:
/// identity, pixel mask, or circular 2-D convolution.
class DegradationOperator {
 public:
  enum class Kind { Identity, Mask, Conv2D };

  static DegradationOperator identity(std::size_t width, std::size_t height) {
    return DegradationOperator(Kind::Identity, width, height);
  }

  static DegradationOperator mask(std::size_t width, std::size_t height, std::vector<bool> kept) {
    require(kept.size() == width * height, "mask length does not match image size");
    DegradationOperator op(Kind::Mask, width, height);
    op.kept_ = std::move(kept);
    return op;
  }

  /// Kernel is k x k, row-major, centred at (k/2, k/2).
  static DegradationOperator conv2d(std::size_t width, std::size_t height, Matrix kernel) {
    require(kernel.rows() == kernel.cols() && kernel.rows() >= 1, "kernel must be square and non-empty");
    require(kernel.allFinite(), "kernel entries must be finite");
    DegradationOperator op(Kind::Conv2D, width, height);
    op.kernel_ = std::move(kernel);
    op.build_rows();
    return op;
  }

  Kind kind() const { return kind_; }
  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return width_ * height_; }
  bool is_diagonal() const { return kind_ != Kind::Conv2D; }
  const std::vector<bool>& kept() const { return kept_; }
  const Matrix& kernel() const { return kernel_; }

  bool nonnegative() const {
    return kind_ != Kind::Conv2D || (kernel_.array() >= 0.0).all();
  }

  /// Diagonal of H (only meaningful when is_diagonal()).
  Vector diagonal() const {
    require(is_diagonal(), "diagonal() requires a diagonal operator");
    Vector d = Vector::Ones(static_cast<Eigen::Index>(size()));
    if (kind_ == Kind::Mask)
      for (std::size_t n = 0; n < size(); ++n) d[static_cast<Eigen::Index>(n)] = kept_[n] ? 1.0 : 0.0;
    return d;
  }

  Vector apply(const Vector& x) const {
    check_length(x);
    switch (kind_) {
      case Kind::Identity:
        return x;
      case Kind::Mask:
        return x.cwiseProduct(diagonal());
      case Kind::Conv2D:
        return sparse_apply(rows_, x);
    }
    return x;
  }

  Vector apply_adjoint(const Vector& v) const {
    check_length(v);
    switch (kind_) {
      case Kind::Identity:
        return v;
      case Kind::Mask:
        return v.cwiseProduct(diagonal());
      case Kind::Conv2D:
        return sparse_apply(cols_, v);
    }
    return v;
  }

  /// Nonzeros of row n of H.
  SparseRow row(std::size_t n) const {
    require(n < size(), "row index out of range");
    if (kind_ == Kind::Conv2D) return rows_[n];
    if (kind_ == Kind::Mask && !kept_[n]) return {};
    return {{n, 1.0}};
  }

  /// Nonzeros of column a of H.
  SparseRow column(std::size_t a) const {
    require(a < size(), "column index out of range");
    if (kind_ == Kind::Conv2D) return cols_[a];
    if (kind_ == Kind::Mask && !kept_[a]) return {};
    return {{a, 1.0}};
  }

  /// Dense H, for oracles on small images.
  Matrix dense() const {
    const auto n = static_cast<Eigen::Index>(size());
    Matrix h = Matrix::Zero(n, n);
    for (std::size_t r = 0; r < size(); ++r)
      for (const auto& [c, v] : row(r)) h(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) += v;
    return h;
  }

 private:
  DegradationOperator(Kind k, std::size_t w, std::size_t h) : kind_(k), width_(w), height_(h) {
    require(w > 0 && h > 0, "operator dimensions must be positive");
  }

  void check_length(const Vector& x) const {
    require(static_cast<std::size_t>(x.size()) == size(), "vector length does not match operator size");
  }

  static Vector sparse_apply(const std::vector<SparseRow>& rows, const Vector& x) {
    Vector y(x.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double s = 0.0;
      for (const auto& [c, v] : rows[r]) s += v * x[static_cast<Eigen::Index>(c)];
      y[static_cast<Eigen::Index>(r)] = s;
    }
    return y;
  }

  // y[r, c] = sum_{a,b} K[a, b] x[r - (a - ca), c - (b - cb)], indices modulo the image size.
  void build_rows() {
    const auto k = static_cast<long>(kernel_.rows());
    const long centre = k / 2;
    const long w = static_cast<long>(width_), h = static_cast<long>(height_);
    rows_.assign(size(), {});
    cols_.assign(size(), {});
    for (long r = 0; r < h; ++r) {
      for (long c = 0; c < w; ++c) {
        std::map<std::size_t, double> acc;
        for (long a = 0; a < k; ++a) {
          for (long b = 0; b < k; ++b) {
            const double v = kernel_(a, b);
            if (v == 0.0) continue;
            const long rr = ((r - (a - centre)) % h + h) % h;
            const long cc = ((c - (b - centre)) % w + w) % w;
            acc[static_cast<std::size_t>(rr * w + cc)] += v;
          }
        }
        const auto n = static_cast<std::size_t>(r * w + c);
        for (const auto& [p, v] : acc) {
          rows_[n].emplace_back(p, v);
          cols_[p].emplace_back(n, v);
        }
      }
    }
  }

  Kind kind_;
  std::size_t width_, height_;
  std::vector<bool> kept_;
  Matrix kernel_;
  std::vector<SparseRow> rows_;
  std::vector<SparseRow> cols_;
};

/// h_n Sigma h_n' for block-diagonal Sigma aligned with `p`.
inline double row_quadratic_form(const DegradationOperator& op, std::size_t n, const Partition& p,
                                 const std::vector<Matrix>& blocks) {
  const auto row = op.row(n);
  double s = 0.0;
  for (const auto& [a, va] : row) {
    const auto ja = p.block_of_pixel(a);
    const auto ia = static_cast<Eigen::Index>(p.position_in_block(a));
    for (const auto& [b, vb] : row) {
      if (p.block_of_pixel(b) != ja) continue;
      s += va * vb * blocks[ja](ia, static_cast<Eigen::Index>(p.position_in_block(b)));
    }
  }
  return s;
}

/// h_n Sigma h_n' for diagonal Sigma.
inline double row_quadratic_form(const DegradationOperator& op, std::size_t n, const Vector& variances) {
  double s = 0.0;
  for (const auto& [a, v] : op.row(n)) s += v * v * variances[static_cast<Eigen::Index>(a)];
  return s;
}

inline double row_dot(const DegradationOperator& op, std::size_t n, const Vector& m) {
  double s = 0.0;
  for (const auto& [a, v] : op.row(n)) s += v * m[static_cast<Eigen::Index>(a)];
  return s;
}

/// Block j of H' D H, D = diag(weights).
inline Matrix gram_block(const DegradationOperator& op, const Vector& weights, const Partition& p, std::size_t j) {
  const auto& idx = p.block(j);
  const auto m = static_cast<Eigen::Index>(idx.size());
  Matrix g = Matrix::Zero(m, m);
  std::map<std::size_t, std::vector<std::pair<Eigen::Index, double>>> touching;  // row -> (pos in block, coef)
  for (Eigen::Index a = 0; a < m; ++a)
    for (const auto& [n, v] : op.column(idx[static_cast<std::size_t>(a)])) touching[n].emplace_back(a, v);
  for (const auto& [n, entries] : touching) {
    const double w = weights[static_cast<Eigen::Index>(n)];
    for (const auto& [a, va] : entries)
      for (const auto& [b, vb] : entries) g(a, b) += w * va * vb;
  }
  return g;
}

/// Text kernel: first line k, then k rows of k reals.
inline Matrix read_kernel(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open kernel file '" + path + "'");
  long k = 0;
  if (!(in >> k) || k <= 0 || k > 1024) throw IoError("kernel file '" + path + "' has an invalid size line");
  Matrix kernel(k, k);
  for (long a = 0; a < k; ++a)
    for (long b = 0; b < k; ++b)
      if (!(in >> kernel(a, b)) || !std::isfinite(kernel(a, b))) throw IoError("kernel file '" + path + "' is truncated");
  return kernel;
}

inline void write_kernel(const std::string& path, const Matrix& kernel) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write kernel file '" + path + "'");
  out.precision(17);
  out << kernel.rows() << "\n";
  for (Eigen::Index a = 0; a < kernel.rows(); ++a) {
    for (Eigen::Index b = 0; b < kernel.cols(); ++b) out << (b ? " " : "") << kernel(a, b);
    out << "\n";
  }
}

/// PGM mask, 0 = missing.
inline std::vector<bool> read_mask(const std::string& path) {
  const auto pgm = read_pgm(path);
  std::vector<bool> kept(pgm.image.size());
  for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = pgm.image.data[i] != 0.0;
  return kept;
}

inline Matrix uniform_kernel(std::size_t k) {
  return Matrix::Constant(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k), 1.0 / static_cast<double>(k * k));
}

}  // namespace patchep
