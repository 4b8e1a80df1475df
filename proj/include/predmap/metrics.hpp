#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "predmap/model.hpp"
#include "predmap/objective.hpp"
#include "predmap/parallel.hpp"

namespace predmap {

// Jensen-Shannon distance: sqrt of the JS divergence, natural log.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw AlignmentError("jsd: vectors differ in length");
  double js = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double m = 0.5 * (p[k] + q[k]);
    const double tp = p[k] > 0.0 ? p[k] * std::log(p[k] / m) : 0.0;
    const double tq = q[k] > 0.0 ? q[k] * std::log(q[k] / m) : 0.0;
    js += 0.5 * (tp + tq);  // one sum per coordinate keeps jsd(p, q) == jsd(q, p) bitwise
  }
  return std::sqrt(std::max(js, 0.0));
}

// Indices of the k nearest neighbours of row i (self excluded), ties by index.
inline std::vector<std::size_t> nearest_neighbours(std::span<const Vec2> points, std::size_t i, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(points.size() - 1);
  for (std::size_t j = 0; j < points.size(); ++j) {
    if (j != i) cand.emplace_back(squared_norm(points[i] - points[j]), j);
  }
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
  std::vector<std::size_t> out(k);
  for (std::size_t r = 0; r < k; ++r) out[r] = cand[r].second;
  return out;
}

// Mean over rows of the average JSD between a point's student posterior and
// the posteriors of its k nearest embedded neighbours.
inline double local_fidelity(const EmbeddingTable& emb, const StudentParams& params, std::size_t k,
                             unsigned threads = 1) {
  const std::size_t n = emb.size();
  if (k < 1 || k >= n) throw ParameterError("local fidelity needs 1 <= k < N");
  const StudentCache cache(params);
  Matrix post(n, params.n_classes());
  for (std::size_t i = 0; i < n; ++i) cache.posterior(emb.points[i], post.row(i));

  std::vector<double> per_row(n);
  constexpr std::size_t kBlock = 32;
  for_each_block((n + kBlock - 1) / kBlock, threads, [&](std::size_t b) {
    const std::size_t end = std::min(n, (b + 1) * kBlock);
    for (std::size_t i = b * kBlock; i < end; ++i) {
      double s = 0.0;
      for (std::size_t j : nearest_neighbours(emb.points, i, k)) s += jsd(post.row(i), post.row(j));
      per_row[i] = s / static_cast<double>(k);
    }
  });
  double total = 0.0;
  for (double v : per_row) total += v;
  return total / static_cast<double>(n);
}

// Counts indexed (predicted, true): rows are predicted labels, columns true labels.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return k_; }
  std::size_t& at(std::size_t predicted, std::size_t truth) { return counts_.at(predicted * k_ + truth); }
  std::size_t at(std::size_t predicted, std::size_t truth) const { return counts_.at(predicted * k_ + truth); }

  std::size_t total() const {
    std::size_t s = 0;
    for (std::size_t v : counts_) s += v;
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const int> labels, std::span<const int> predicted,
                                        std::size_t classes) {
  if (labels.size() != predicted.size()) throw AlignmentError("confusion matrix inputs differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i];
    const int p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= classes || static_cast<std::size_t>(p) >= classes)
      throw ParameterError("confusion matrix: class index out of range at row " + std::to_string(i));
    ++cm.at(static_cast<std::size_t>(p), static_cast<std::size_t>(t));
  }
  return cm;
}

inline std::vector<int> student_argmax(const EmbeddingTable& emb, const StudentParams& params) {
  const StudentCache cache(params);
  std::vector<double> q(params.n_classes());
  std::vector<int> out(emb.size());
  for (std::size_t i = 0; i < emb.size(); ++i) {
    cache.posterior(emb.points[i], q);
    out[i] = static_cast<int>(argmax(q));
  }
  return out;
}

struct CompressionQuality {
  double kl_sym_final = 0.0;
  std::optional<double> acc_ground;
  double acc_teacher = 0.0;
};

inline CompressionQuality compression_quality(const PredictionTable& preds, const EmbeddingTable& emb,
                                              const StudentParams& params) {
  CompressionQuality out;
  out.kl_sym_final = loss(preds, emb, params, 1.0).total;
  const auto student = student_argmax(emb, params);
  const std::size_t n = preds.n_rows();
  std::size_t teacher_hits = 0;
  for (std::size_t i = 0; i < n; ++i)
    teacher_hits += static_cast<std::size_t>(student[i]) == argmax(preds.row(i)) ? 1 : 0;
  out.acc_teacher = static_cast<double>(teacher_hits) / static_cast<double>(n);
  if (preds.labels()) {
    std::size_t ground_hits = 0;
    for (std::size_t i = 0; i < n; ++i) ground_hits += student[i] == (*preds.labels())[i] ? 1 : 0;
    out.acc_ground = static_cast<double>(ground_hits) / static_cast<double>(n);
  }
  return out;
}

struct MetricsReport {
  double kl_sym_final = 0.0;
  std::optional<double> acc_ground;
  double acc_teacher = 0.0;
  std::map<std::size_t, double> local_fidelity;
  std::optional<ConfusionMatrix> confusion;  // teacher predictions vs true labels
};

inline MetricsReport metrics_report(const PredictionTable& preds, const EmbeddingTable& emb,
                                    const StudentParams& params, std::span<const std::size_t> neighbour_counts,
                                    unsigned threads = 1) {
  const CompressionQuality cq = compression_quality(preds, emb, params);
  MetricsReport r;
  r.kl_sym_final = cq.kl_sym_final;
  r.acc_ground = cq.acc_ground;
  r.acc_teacher = cq.acc_teacher;
  for (std::size_t k : neighbour_counts) {
    if (k < emb.size()) r.local_fidelity[k] = local_fidelity(emb, params, k, threads);
  }
  if (preds.labels()) r.confusion = confusion_matrix(*preds.labels(), preds.teacher_argmax(), preds.n_classes());
  return r;
}

}  // namespace predmap
