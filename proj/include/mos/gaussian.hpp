// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mos/matrix.hpp"
#include "mos/rng.hpp"

namespace mos {

/// Thrown when a covariance cannot be factored even after diagonal jitter.
/// Callers sampling class features fall back to diagonal-only sampling.
class NotPositiveDefinite : public std::runtime_error {
 public:
  explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr double kCholeskyJitter = 1e-9;

namespace detail {

inline bool cholesky_attempt(const Matrix& sigma, double jitter, double pivot_floor, Matrix& out) {
  const std::size_t n = sigma.rows();
  out = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = sigma(j, j) + jitter;
    for (std::size_t k = 0; k < j; ++k) pivot -= out(j, k) * out(j, k);
    if (!(pivot > pivot_floor)) return false;
    out(j, j) = std::sqrt(pivot);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = sigma(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= out(i, k) * out(j, k);
      out(i, j) = s / out(j, j);
    }
  }
  return true;
}

}  // namespace detail

/// Lower-triangular L with L*L^T = sigma. A second attempt adds 1e-9 diagonal
/// jitter before giving up, since single-sample class covariances are
/// singular by construction.
inline Matrix cholesky(const Matrix& sigma) {
  require(sigma.rows() == sigma.cols(), "cholesky: matrix not square");
  const std::size_t n = sigma.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = sigma(i, j), b = sigma(j, i);
      const double tol = 1e-9 * std::max({1.0, std::abs(a), std::abs(b)});
      require(std::abs(a - b) <= tol, "cholesky: matrix not symmetric");
    }
  Matrix lower;
  if (detail::cholesky_attempt(sigma, 0.0, 0.0, lower)) return lower;
  if (detail::cholesky_attempt(sigma, kCholeskyJitter, kCholeskyJitter, lower)) return lower;
  throw NotPositiveDefinite("cholesky: pivot at or below jitter floor");
}

/// Draws n samples mu + L*z with z ~ N(0, I) via Box-Muller normals.
inline std::vector<Vector> sample_gaussian(const Vector& mu, const Matrix& chol_lower,
                                           std::size_t n, Rng& rng) {
  require(chol_lower.rows() == mu.size() && chol_lower.cols() == mu.size(),
          "sample_gaussian: dimension mismatch");
  const std::size_t d = mu.size();
  std::vector<Vector> out;
  out.reserve(n);
  Vector z(d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) z[i] = rng.normal();
    Vector x = mu;
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j <= i && j < d; ++j) acc += chol_lower(i, j) * z[j];
      x[i] += acc;
    }
    out.push_back(std::move(x));
  }
  return out;
}

/// Diagonal-only factor used as the fallback when cholesky() rejects sigma:
/// off-diagonal structure is dropped and negative variances clamp to zero.
inline Matrix diagonal_sampling_factor(const Matrix& sigma) {
  require(sigma.rows() == sigma.cols(), "diagonal_sampling_factor: matrix not square");
  Matrix lower(sigma.rows(), sigma.cols());
  for (std::size_t i = 0; i < sigma.rows(); ++i)
    lower(i, i) = std::sqrt(std::max(sigma(i, i), 0.0));
  return lower;
}

}  // namespace mos
