// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mos {

/// Feature / embedding vector. All arithmetic in this library is double
/// precision; checkpoints quantize to 32-bit on disk.
using Vector = std::vector<double>;

/// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

inline bool all_finite(const Vector& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_finite(const Matrix& m) { return all_finite(m.data()); }

inline double dot(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vector& a) { return std::sqrt(dot(a, a)); }

/// Cosine of the angle between a and b. Vectors with norm below 1e-12 are
/// treated as directionless and yield 0 so an untrained prototype never
/// aborts inference.
inline double cosine_similarity(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "cosine_similarity: dimension mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  double c = dot(a, b) / (na * nb);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

/// Row-vector times matrix: returns x * W, x of length W.rows().
inline Vector matvec(const Vector& x, const Matrix& w) {
  require(x.size() == w.rows(), "matvec: dimension mismatch");
  Vector out(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xi * w(i, j);
  }
  return out;
}

/// Row-vector times transposed matrix: returns x * W^T, x of length W.cols().
inline Vector matvec_transposed(const Vector& x, const Matrix& w) {
  require(x.size() == w.cols(), "matvec_transposed: dimension mismatch");
  Vector out(w.rows(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) s += x[j] * w(i, j);
    out[i] = s;
  }
  return out;
}

/// Accumulates the outer product a^T * b into `into` (rows = a.size()).
inline void add_outer(Matrix& into, const Vector& a, const Vector& b, double scale = 1.0) {
  require(into.rows() == a.size() && into.cols() == b.size(), "add_outer: dimension mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = scale * a[i];
    if (ai == 0.0) continue;
    for (std::size_t j = 0; j < b.size(); ++j) into(i, j) += ai * b[j];
  }
}

inline void add_scaled(Vector& into, const Vector& v, double scale) {
  require(into.size() == v.size(), "add_scaled: dimension mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) into[i] += scale * v[i];
}

}  // namespace mos
