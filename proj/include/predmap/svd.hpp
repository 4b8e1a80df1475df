#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "predmap/linalg.hpp"
#include "predmap/model.hpp"

namespace predmap {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // column j is the eigenvector of values[j]
};

// Cyclic Jacobi rotations for a small dense symmetric matrix.
inline SymmetricEigen jacobi_eigen(Matrix a, double tol = 1e-15, int max_sweeps = 100) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ParameterError("jacobi_eigen: matrix is not square");
  Matrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    double diag = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      diag += a(p, p) * a(p, p);
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off <= tol * tol * diag || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  return out;
}

// Best rank-2 factorization L ~ Y W with Y = U_2 S_2 (N x 2) and W = V_2^T (2 x K).
struct SvdModel {
  std::vector<Vec2> embed;
  Matrix weights;  // 2 x K, orthonormal rows
  double sigma1 = 0.0;
  double sigma2 = 0.0;
  double residual = 0.0;
  bool rank_deficient = false;

  EmbeddingTable embedding() const { return {embed}; }
};

inline SvdModel fit_svd(const Matrix& logits) {
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  if (n < 2 || k < 2) throw ParameterError("fit_svd needs at least 2 rows and 2 columns");
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw ParameterError("fit_svd: non-finite logit");
  }

  // Gram matrix L^T L, accumulated in row order.
  Matrix gram(k, k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a; b < k; ++b) gram(a, b) += row[a] * row[b];
    }
  }
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < a; ++b) gram(a, b) = gram(b, a);
  }

  const SymmetricEigen eig = jacobi_eigen(gram);
  SvdModel model;
  model.weights = Matrix(2, k);
  const double scale = std::max(eig.values[0], 0.0);
  for (std::size_t j = 0; j < 2; ++j) {
    // Largest-magnitude entry positive.
    std::size_t big = 0;
    for (std::size_t a = 1; a < k; ++a) {
      if (std::abs(eig.vectors(a, j)) > std::abs(eig.vectors(big, j))) big = a;
    }
    const double sign = eig.vectors(big, j) < 0.0 ? -1.0 : 1.0;
    for (std::size_t a = 0; a < k; ++a) model.weights(j, a) = sign * eig.vectors(a, j);
  }
  model.sigma1 = std::sqrt(scale);
  const double lambda2 = eig.values[1];
  model.rank_deficient = !(lambda2 > 1e-12 * scale);
  model.sigma2 = model.rank_deficient ? 0.0 : std::sqrt(lambda2);

  model.embed.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    double y0 = 0.0;
    double y1 = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
      y0 += row[a] * model.weights(0, a);
      y1 += row[a] * model.weights(1, a);
    }
    model.embed[i] = {y0, model.rank_deficient ? 0.0 : y1};
  }

  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    for (std::size_t a = 0; a < k; ++a) {
      const double r = row[a] - model.embed[i].x * model.weights(0, a) - model.embed[i].y * model.weights(1, a);
      res += r * r;
    }
  }
  model.residual = std::sqrt(res);
  return model;
}

// Reconstructed logit row Y_i W.
inline std::vector<double> svd_logits(const SvdModel& model, std::size_t row) {
  const std::size_t k = model.weights.cols();
  std::vector<double> out(k);
  const Vec2 y = model.embed.at(row);
  for (std::size_t a = 0; a < k; ++a) out[a] = y.x * model.weights(0, a) + y.y * model.weights(1, a);
  return out;
}

inline std::vector<double> svd_student_posterior(const SvdModel& model, std::size_t row) {
  auto logits = svd_logits(model, row);
  softmax_inplace(logits);
  return logits;
}

// Number of rows whose reconstructed argmax matches the argmax of the original logits.
inline std::size_t svd_agreement_count(const SvdModel& model, const Matrix& logits) {
  if (logits.rows() != model.embed.size()) throw AlignmentError("svd model and logits disagree on row count");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    hits += argmax(svd_logits(model, i)) == argmax(logits.row(i)) ? 1 : 0;
  }
  return hits;
}

}  // namespace predmap
