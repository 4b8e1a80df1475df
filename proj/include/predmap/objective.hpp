#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "predmap/model.hpp"
#include "predmap/parallel.hpp"

namespace predmap {

// 0.5 * (KL(p||q) + KL(q||p)) in nats. Both rows must be strictly positive.
inline double sym_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw AlignmentError("sym_kl: vectors differ in length");
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - q[k]) * (std::log(p[k]) - std::log(q[k]));
  return 0.5 * s;
}

struct LossReport {
  double total = 0.0;
  std::vector<double> per_row;
};

struct GradientBundle {
  std::vector<Vec2> d_embed;
  std::vector<Vec2> d_means;
  std::vector<double> d_prior;
};

// Teacher rows after the temperature transform. At T == 1 this is the
// clamped table itself.
inline Matrix tempered_probs(const PredictionTable& preds, double temperature) {
  if (temperature == 1.0) return preds.probs();
  Matrix out(preds.n_rows(), preds.n_classes());
  for (std::size_t i = 0; i < preds.n_rows(); ++i) {
    const auto row = apply_temperature(preds.row(i), temperature);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

namespace detail {

inline void check_alignment(const PredictionTable& preds, const EmbeddingTable& emb, const StudentParams& params) {
  if (emb.size() != preds.n_rows())
    throw AlignmentError("embedding rows (" + std::to_string(emb.size()) + ") do not match predictions (" +
                         std::to_string(preds.n_rows()) + ")");
  if (params.n_classes() != preds.n_classes())
    throw AlignmentError("student classes (" + std::to_string(params.n_classes()) + ") do not match predictions (" +
                         std::to_string(preds.n_classes()) + ")");
}

inline constexpr std::size_t kRowBlock = 64;

}  // namespace detail

// Per-row symmetric KL between tempered teacher rows and the student posterior.
inline LossReport loss_from_targets(const Matrix& targets, const EmbeddingTable& emb, const StudentParams& params,
                                    unsigned threads = 1) {
  const StudentCache cache(params);
  const std::size_t n = targets.rows();
  const std::size_t k = targets.cols();
  LossReport report;
  report.per_row.resize(n);
  const std::size_t blocks = (n + detail::kRowBlock - 1) / detail::kRowBlock;
  for_each_block(blocks, threads, [&](std::size_t b) {
    std::vector<double> q(k);
    const std::size_t end = std::min(n, (b + 1) * detail::kRowBlock);
    for (std::size_t i = b * detail::kRowBlock; i < end; ++i) {
      cache.posterior(emb.points[i], q);
      report.per_row[i] = sym_kl(targets.row(i), q);
    }
  });
  double sum = 0.0;
  for (double v : report.per_row) sum += v;
  report.total = n == 0 ? 0.0 : sum / static_cast<double>(n);
  return report;
}

inline LossReport loss(const PredictionTable& preds, const EmbeddingTable& emb, const StudentParams& params,
                       double temperature = 1.0, unsigned threads = 1) {
  detail::check_alignment(preds, emb, params);
  return loss_from_targets(tempered_probs(preds, temperature), emb, params, threads);
}

// Gradients of the mean symmetric KL over `batch` (row indices, repeats allowed)
// with respect to the embeddings, class means and prior logits.
//
// With q = softmax(l) and per-class log joints l, the derivative of the row loss is
//   dL/dl_j = 0.5 * [ q_j - p_j + q_j (r_j - sum_k q_k r_k) ],  r_k = log q_k - log p_k,
// and each log joint moves with y and mu_j through the t kernel:
//   dl_j/dy = -(nu + 2) S_j^{-1} (y - mu_j) / (nu + m_j) = -dl_j/dmu_j.
inline GradientBundle gradients_from_targets(const Matrix& targets, const EmbeddingTable& emb,
                                             const StudentParams& params, std::span<const std::size_t> batch,
                                             unsigned threads = 1) {
  if (batch.empty()) throw ParameterError("gradient batch is empty");
  const StudentCache cache(params);
  const std::size_t n = targets.rows();
  const std::size_t k = targets.cols();
  const double nu = params.dof;
  const std::vector<double> prior = params.prior();

  struct Partial {
    std::vector<Vec2> d_means;
    std::vector<double> d_logjoint_sum;
  };
  const std::size_t blocks = (batch.size() + detail::kRowBlock - 1) / detail::kRowBlock;
  std::vector<Partial> partials(blocks);
  std::vector<Vec2> d_rows(batch.size());

  for_each_block(blocks, threads, [&](std::size_t b) {
    Partial& part = partials[b];
    part.d_means.assign(k, Vec2{});
    part.d_logjoint_sum.assign(k, 0.0);
    std::vector<double> q(k);
    std::vector<double> g(k);
    const std::size_t end = std::min(batch.size(), (b + 1) * detail::kRowBlock);
    for (std::size_t pos = b * detail::kRowBlock; pos < end; ++pos) {
      const std::size_t i = batch[pos];
      if (i >= n) throw AlignmentError("batch index out of range");
      const auto p = targets.row(i);
      const Vec2 y = emb.points[i];
      cache.posterior(y, q);
      double mean_ratio = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        g[c] = std::log(q[c]) - std::log(p[c]);
        mean_ratio += q[c] * g[c];
      }
      Vec2 dy{};
      for (std::size_t c = 0; c < k; ++c) {
        const double dl = 0.5 * (q[c] - p[c] + q[c] * (g[c] - mean_ratio));
        part.d_logjoint_sum[c] += dl;
        const Vec2 delta = y - params.means[c];
        const Vec2 sd = cache.inverse_scale(c) * delta;
        const double coef = -(nu + 2.0) / (nu + dot(delta, sd)) * dl;
        dy = dy + coef * sd;
        part.d_means[c] = part.d_means[c] - coef * sd;
      }
      d_rows[pos] = dy;
    }
  });

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  GradientBundle out;
  out.d_embed.assign(n, Vec2{});
  out.d_means.assign(k, Vec2{});
  out.d_prior.assign(k, 0.0);
  for (std::size_t pos = 0; pos < batch.size(); ++pos) {
    Vec2& slot = out.d_embed[batch[pos]];
    slot = slot + inv_b * d_rows[pos];
  }
  std::vector<double> dl_sum(k, 0.0);
  for (const Partial& part : partials) {
    for (std::size_t c = 0; c < k; ++c) {
      out.d_means[c] = out.d_means[c] + part.d_means[c];
      dl_sum[c] += part.d_logjoint_sum[c];
    }
  }
  double dl_total = 0.0;
  for (double v : dl_sum) dl_total += v;
  for (std::size_t c = 0; c < k; ++c) {
    out.d_means[c] = inv_b * out.d_means[c];
    // log prior_c = theta_c - logsumexp(theta)
    out.d_prior[c] = inv_b * (dl_sum[c] - prior[c] * dl_total);
  }
  return out;
}

inline GradientBundle gradients(const PredictionTable& preds, const EmbeddingTable& emb, const StudentParams& params,
                                double temperature, std::span<const std::size_t> batch, unsigned threads = 1) {
  detail::check_alignment(preds, emb, params);
  return gradients_from_targets(tempered_probs(preds, temperature), emb, params, batch, threads);
}

}  // namespace predmap
