#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "mmattack/errors.hpp"
#include "mmattack/image.hpp"

namespace mmattack {

using Plane = Eigen::MatrixXd;

// Orthonormal DCT-II basis: row k holds the k-th cosine of length n.
inline Eigen::MatrixXd dct_basis(int n) {
  Eigen::MatrixXd c(n, n);
  const double scale0 = std::sqrt(1.0 / n);
  const double scale = std::sqrt(2.0 / n);
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < n; ++i) {
      c(k, i) = (k == 0 ? scale0 : scale) * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
  }
  return c;
}

// Separable 2-D DCT for a fixed plane size. The basis is orthonormal, so the
// inverse is the transpose and both directions are exact up to rounding.
class Dct2Plan {
 public:
  Dct2Plan(int rows, int cols) : rows_(dct_basis(rows)), cols_(dct_basis(cols)) {
    if (rows <= 0 || cols <= 0) throw InvalidArgument("DCT plane must be non-empty");
  }

  int rows() const noexcept { return static_cast<int>(rows_.rows()); }
  int cols() const noexcept { return static_cast<int>(cols_.rows()); }

  Plane forward(const Plane& x) const {
    check(x);
    return rows_ * x * cols_.transpose();
  }

  Plane inverse(const Plane& y) const {
    check(y);
    return rows_.transpose() * y * cols_;
  }

 private:
  void check(const Plane& p) const {
    if (p.rows() != rows_.rows() || p.cols() != cols_.rows()) {
      throw InvalidArgument("DCT plane shape mismatch");
    }
    if (!p.allFinite()) throw InvalidArgument("DCT input is not finite");
  }

  Eigen::MatrixXd rows_;
  Eigen::MatrixXd cols_;
};

inline Plane dct2(const Plane& x) { return Dct2Plan(static_cast<int>(x.rows()), static_cast<int>(x.cols())).forward(x); }
inline Plane idct2(const Plane& y) { return Dct2Plan(static_cast<int>(y.rows()), static_cast<int>(y.cols())).inverse(y); }

inline Plane channel_plane(const PixelArray& a, int ch) {
  Plane p(a.height(), a.width());
  for (int r = 0; r < a.height(); ++r)
    for (int c = 0; c < a.width(); ++c) p(r, c) = a.at(r, c, ch);
  return p;
}

inline void set_channel_plane(PixelArray& a, int ch, const Plane& p) {
  for (int r = 0; r < a.height(); ++r)
    for (int c = 0; c < a.width(); ++c) a.at(r, c, ch) = p(r, c);
}

}  // namespace mmattack
