#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "bip/errors.hpp"

namespace bip {

using Vec = std::vector<double>;

/// Dense row-major matrix, just big enough for the solver and the
/// network engine.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  void fill(double v) { data_.assign(data_.size(), v); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

inline Vec matvec(const Mat& a, const Vec& x) {
  if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
  Vec y(a.rows(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) s += a(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

/// y = A^T x
inline Vec matvec_t(const Mat& a, const Vec& x) {
  if (a.rows() != x.size()) throw ShapeError("matvec_t: dimension mismatch");
  Vec y(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double xr = x[r];
    for (std::size_t c = 0; c < a.cols(); ++c) y[c] += a(r, c) * xr;
  }
  return y;
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2_sq(const Vec& a) { return dot(a, a); }

inline void axpy(double alpha, const Vec& x, Vec& y) {
  if (x.size() != y.size()) throw ShapeError("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Solves A x = b for symmetric positive definite A by in-place Cholesky.
/// Throws NumericError if A is not positive definite.
inline Vec cholesky_solve(Mat a, Vec b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw ShapeError("cholesky_solve: dimension mismatch");
  // Factor A = L L^T, L stored in the lower triangle.
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) throw NumericError("cholesky_solve: matrix not SPD");
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  // Forward substitution L y = b.
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= a(i, k) * b[k];
    b[i] = s / a(i, i);
  }
  // Back substitution L^T x = y.
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= a(k, ii) * b[k];
    b[ii] = s / a(ii, ii);
  }
  return b;
}

/// Cholesky solve for an SPD matrix with half-bandwidth bw (a(i,j) = 0
/// whenever |i-j| > bw); the factor stays inside the band, so the cost is
/// O(n bw^2) instead of O(n^3).
inline Vec cholesky_solve_banded(Mat a, Vec b, std::size_t bw) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n)
    throw ShapeError("cholesky_solve_banded: dimension mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t j0 = j > bw ? j - bw : 0;
    double d = a(j, j);
    for (std::size_t k = j0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw NumericError("cholesky_solve_banded: matrix not SPD");
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    const std::size_t imax = std::min(n, j + bw + 1);
    for (std::size_t i = j + 1; i < imax; ++i) {
      double s = a(i, j);
      const std::size_t k0 = std::max(j0, i > bw ? i - bw : 0);
      for (std::size_t k = k0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    const std::size_t k0 = i > bw ? i - bw : 0;
    for (std::size_t k = k0; k < i; ++k) s -= a(i, k) * b[k];
    b[i] = s / a(i, i);
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    const std::size_t kmax = std::min(n, ii + bw + 1);
    for (std::size_t k = ii + 1; k < kmax; ++k) s -= a(k, ii) * b[k];
    b[ii] = s / a(ii, ii);
  }
  return b;
}

}  // namespace bip
