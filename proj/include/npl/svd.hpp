#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "npl/errors.hpp"
#include "npl/tensor.hpp"

namespace npl {

/// m = u * diag(s) * v^T with s non-increasing and each column of u having a
/// nonnegative first nonzero entry.
struct SvdFactors {
  Tensor u;  // d x d, columns are left singular vectors
  Tensor s;  // length d
  Tensor v;  // d x d, columns are right singular vectors

  std::size_t dim() const { return s.size(); }

  Tensor reconstruct() const {
    const std::size_t d = dim();
    Tensor us = u;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) us(i, j) *= s[j];
    return matmul(us, transpose(v));
  }
};

namespace detail {

inline double column_dot(const Tensor& a, std::size_t p, std::size_t q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, p) * a(i, q);
  return acc;
}

inline void rotate_columns(Tensor& a, std::size_t p, std::size_t q, double c, double s) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double ap = a(i, p), aq = a(i, q);
    a(i, p) = c * ap - s * aq;
    a(i, q) = s * ap + c * aq;
  }
}

// Fills column `col` of q with a unit vector orthogonal to columns [0, col).
inline void complete_column(Tensor& q, std::size_t col) {
  const std::size_t d = q.rows();
  for (std::size_t e = 0; e < d; ++e) {
    std::vector<double> w(d, 0.0);
    w[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < col; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) proj += q(i, k) * w[i];
        for (std::size_t i = 0; i < d; ++i) w[i] -= proj * q(i, k);
      }
    double nrm = 0.0;
    for (double x : w) nrm += x * x;
    nrm = std::sqrt(nrm);
    if (nrm > 0.5) {
      for (std::size_t i = 0; i < d; ++i) q(i, col) = w[i] / nrm;
      return;
    }
  }
  throw NumericError("svd: failed to complete orthonormal basis");
}

}  // namespace detail

/// One-sided (Hestenes) Jacobi SVD of a square matrix.
inline SvdFactors svd(const Tensor& m) {
  if (m.rank() != 2 || m.rows() != m.cols() || m.rows() == 0)
    throw std::invalid_argument("svd: square matrix required, got " + shape_str(m.shape()));
  if (!m.all_finite()) throw std::invalid_argument("svd: non-finite input");

  constexpr double kRotationTol = 1e-12;
  constexpr int kMaxSweeps = 100;
  const std::size_t d = m.rows();

  Tensor w = m;
  Tensor v = Tensor::identity(d);
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) {
        const double alpha = detail::column_dot(w, p, p);
        const double beta = detail::column_dot(w, q, q);
        const double gamma = detail::column_dot(w, p, q);
        if (gamma == 0.0 || std::abs(gamma) <= kRotationTol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate_columns(w, p, q, c, s);
        detail::rotate_columns(v, p, q, c, s);
      }
  }
  if (!converged) throw NumericError("svd: Jacobi sweeps did not converge");

  std::vector<double> sv(d);
  for (std::size_t j = 0; j < d; ++j) sv[j] = std::sqrt(detail::column_dot(w, j, j));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });

  SvdFactors f{Tensor({d, d}), Tensor({d}), Tensor({d, d})};
  const double cutoff = sv[order[0]] * static_cast<double>(d) * std::numeric_limits<double>::epsilon();
  for (std::size_t j = 0; j < d; ++j) {
    const std::size_t src = order[j];
    for (std::size_t i = 0; i < d; ++i) f.v(i, j) = v(i, src);
    if (sv[src] > cutoff && sv[src] > 0.0) {
      f.s[j] = sv[src];
      for (std::size_t i = 0; i < d; ++i) f.u(i, j) = w(i, src) / sv[src];
    } else {
      f.s[j] = 0.0;
      detail::complete_column(f.u, j);
    }
  }

  constexpr double kSignTol = 1e-14;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      if (std::abs(f.u(i, j)) <= kSignTol) continue;
      if (f.u(i, j) < 0.0)
        for (std::size_t r = 0; r < d; ++r) {
          f.u(r, j) = -f.u(r, j);
          f.v(r, j) = -f.v(r, j);
        }
      break;
    }
  }
  return f;
}

}  // namespace npl
