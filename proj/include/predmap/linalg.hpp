#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "predmap/errors.hpp"

namespace predmap {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double squared_norm(Vec2 a) { return dot(a, a); }

// 2x2 matrix stored row-major. Used for class scale matrices and GMM covariances.
struct Mat2 {
  double xx = 0.0, xy = 0.0;
  double yx = 0.0, yy = 0.0;

  static Mat2 identity(double s = 1.0) { return {s, 0.0, 0.0, s}; }

  double det() const { return xx * yy - xy * yx; }
  double trace() const { return xx + yy; }

  Vec2 operator*(Vec2 v) const { return {xx * v.x + xy * v.y, yx * v.x + yy * v.y}; }

  Mat2 inverse() const {
    const double d = det();
    return {yy / d, -xy / d, -yx / d, xx / d};
  }

  bool is_symmetric(double tol = 1e-12) const { return std::abs(xy - yx) <= tol; }

  // Eigenvalues of the symmetric part, ascending.
  std::pair<double, double> eigenvalues() const {
    const double b = 0.5 * (xy + yx);
    const double mid = 0.5 * (xx + yy);
    const double rad = std::hypot(0.5 * (xx - yy), b);
    return {mid - rad, mid + rad};
  }

  bool is_spd() const {
    if (!is_symmetric()) return false;
    return eigenvalues().first > 0.0;
  }

  friend bool operator==(const Mat2&, const Mat2&) = default;
};

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace predmap
