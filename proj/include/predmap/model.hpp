#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "predmap/errors.hpp"
#include "predmap/linalg.hpp"
#include "predmap/special.hpp"

namespace predmap {

// Floor applied to teacher probabilities on ingestion so every KL term is finite.
inline constexpr double kProbFloor = 1e-8;

// ---------------------------------------------------------------------------
// Small vector helpers
// ---------------------------------------------------------------------------

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// In-place softmax of a vector of log-weights.
inline void softmax_inplace(std::span<double> v) {
  const double lse = log_sum_exp(v);
  for (double& x : v) x = std::exp(x - lse);
}

inline std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Teacher prediction vectors, one row per instance.
class PredictionTable {
 public:
  PredictionTable() = default;

  // Clamps every probability to >= kProbFloor and renormalizes each row.
  // Missing row ids are filled with the row index.
  static PredictionTable from_probs(Matrix probs, std::optional<std::vector<int>> labels = std::nullopt,
                                    std::optional<Matrix> logits = std::nullopt,
                                    std::vector<std::string> row_ids = {}) {
    const std::size_t n = probs.rows();
    const std::size_t k = probs.cols();
    if (k < 2) throw ParameterError("prediction table needs at least 2 classes");
    if (labels && labels->size() != n) throw AlignmentError("labels length does not match row count");
    if (logits && (logits->rows() != n || logits->cols() != k))
      throw AlignmentError("logits shape does not match probabilities");
    if (!row_ids.empty() && row_ids.size() != n) throw AlignmentError("row id count does not match row count");
    if (labels) {
      for (int c : *labels) {
        if (c < 0 || static_cast<std::size_t>(c) >= k)
          throw ParameterError("label " + std::to_string(c) + " outside [0, K)");
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto row = probs.row(i);
      double sum = 0.0;
      for (double& p : row) {
        if (!std::isfinite(p) || p < 0.0) throw ParameterError("row " + std::to_string(i) + " has an invalid probability");
        // Renormalization leaves floored entries a hair under the floor; treat those as floored.
        if (p < 0.999 * kProbFloor) p = kProbFloor;
        sum += p;
      }
      // Rows already normalized to rounding are kept as is, so reloading a saved table is bitwise stable.
      if (std::abs(sum - 1.0) > 4.0 * static_cast<double>(k) * std::numeric_limits<double>::epsilon())
        for (double& p : row) p /= sum;
    }
    if (row_ids.empty()) {
      row_ids.reserve(n);
      for (std::size_t i = 0; i < n; ++i) row_ids.push_back(std::to_string(i));
    }
    PredictionTable t;
    t.probs_ = std::move(probs);
    t.labels_ = std::move(labels);
    t.logits_ = std::move(logits);
    t.row_ids_ = std::move(row_ids);
    return t;
  }

  std::size_t n_rows() const { return probs_.rows(); }
  std::size_t n_classes() const { return probs_.cols(); }

  const Matrix& probs() const { return probs_; }
  std::span<const double> row(std::size_t i) const { return probs_.row(i); }
  const std::optional<std::vector<int>>& labels() const { return labels_; }
  const std::optional<Matrix>& logits() const { return logits_; }
  const std::vector<std::string>& row_ids() const { return row_ids_; }

  // Teacher logits if supplied, otherwise log of the clamped probabilities.
  Matrix teacher_logits() const {
    if (logits_) return *logits_;
    Matrix out(n_rows(), n_classes());
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = std::log(probs_.data()[i]);
    return out;
  }

  std::vector<int> teacher_argmax() const {
    std::vector<int> out(n_rows());
    for (std::size_t i = 0; i < n_rows(); ++i) out[i] = static_cast<int>(argmax(row(i)));
    return out;
  }

 private:
  Matrix probs_;
  std::optional<std::vector<int>> labels_;
  std::optional<Matrix> logits_;
  std::vector<std::string> row_ids_;
};

// 2-D points, row-aligned with a PredictionTable.
struct EmbeddingTable {
  std::vector<Vec2> points;

  std::size_t size() const { return points.size(); }

  void validate(std::size_t expected_rows) const {
    if (points.size() != expected_rows)
      throw AlignmentError("embedding has " + std::to_string(points.size()) + " rows, expected " +
                           std::to_string(expected_rows));
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!std::isfinite(points[i].x) || !std::isfinite(points[i].y))
        throw ParameterError("embedding row " + std::to_string(i) + " is not finite");
    }
  }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

// Naive Bayes student: per-class Student's t conditionals plus a categorical prior.
// scales[k] is the t scale matrix (not the covariance, which is undefined at dof 2).
struct StudentParams {
  std::vector<Vec2> means;
  std::vector<Mat2> scales;
  double dof = 2.0;
  std::vector<double> prior_logits;

  std::size_t n_classes() const { return means.size(); }

  void validate() const {
    const std::size_t k = means.size();
    if (k == 0) throw ParameterError("student has no classes");
    if (scales.size() != k || prior_logits.size() != k)
      throw ParameterError("student parameter groups disagree on class count");
    if (!(dof > 0.0) || !std::isfinite(dof)) throw ParameterError("degrees of freedom must be positive");
    for (std::size_t c = 0; c < k; ++c) {
      if (!scales[c].is_spd()) throw ParameterError("scale matrix of class " + std::to_string(c) + " is not SPD");
    }
  }

  std::vector<double> prior() const { return softmax(prior_logits); }

  friend bool operator==(const StudentParams&, const StudentParams&) = default;
};

enum class TrainMode { joint, coordinate };
enum class InitMode { random, cluster_center };

struct TemperatureBreakpoint {
  double epoch = 1.0;
  double temperature = 1.0;
};

struct TrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch_size = 1000;
  double lr_means = 1e-3;
  double lr_prior = 5e-3;
  double lr_embed = 1e-6;
  TrainMode mode = TrainMode::joint;
  // Empty schedule means constant T = 1.
  std::vector<TemperatureBreakpoint> temperature_schedule;
  std::uint64_t seed = 0;
  bool deterministic = true;
  InitMode init = InitMode::cluster_center;
  double dof = 2.0;
  // Worker threads for gradient evaluation. Results do not depend on this value.
  unsigned threads = 1;

  void validate() const {
    if (batch_size == 0) throw ParameterError("batch size must be positive");
    if (!(lr_means > 0.0) || !(lr_prior > 0.0) || !(lr_embed > 0.0))
      throw ParameterError("learning rates must be positive");
    if (!(dof > 0.0)) throw ParameterError("degrees of freedom must be positive");
    for (std::size_t i = 0; i < temperature_schedule.size(); ++i) {
      if (temperature_schedule[i].temperature < 1.0) throw ParameterError("temperatures must be >= 1");
      if (i > 0 && !(temperature_schedule[i].epoch > temperature_schedule[i - 1].epoch))
        throw ParameterError("temperature schedule epochs must be strictly increasing");
    }
    if (!temperature_schedule.empty() && temperature_schedule.back().temperature != 1.0)
      throw ParameterError("temperature schedule must end at T = 1");
  }
};

class SubsetMask {
 public:
  explicit SubsetMask(std::vector<bool> keep) : keep_(std::move(keep)) {
    if (std::count(keep_.begin(), keep_.end(), true) < 2)
      throw ParameterError("subset mask must keep at least 2 classes");
  }

  static SubsetMask from_indices(std::size_t n_classes, std::span<const std::size_t> indices) {
    std::vector<bool> keep(n_classes, false);
    for (std::size_t c : indices) {
      if (c >= n_classes) throw ParameterError("subset class index out of range");
      keep[c] = true;
    }
    return SubsetMask(std::move(keep));
  }

  std::size_t size() const { return keep_.size(); }
  std::size_t kept() const { return static_cast<std::size_t>(std::count(keep_.begin(), keep_.end(), true)); }
  bool keeps(std::size_t c) const { return keep_[c]; }

 private:
  std::vector<bool> keep_;
};

// ---------------------------------------------------------------------------
// Student densities
// ---------------------------------------------------------------------------

// Log-density of the bivariate Student's t with location mu, scale matrix and dof nu.
inline double t_log_density(Vec2 y, Vec2 mu, const Mat2& scale, double nu) {
  if (!scale.is_spd()) throw ParameterError("t density scale matrix is not SPD");
  if (!(nu > 0.0)) throw ParameterError("t density dof must be positive");
  constexpr double d = 2.0;
  const Vec2 delta = y - mu;
  const double maha = dot(delta, scale.inverse() * delta);
  return special::log_gamma(0.5 * (nu + d)) - special::log_gamma(0.5 * nu) -
         0.5 * d * std::log(nu * std::numbers::pi) - 0.5 * std::log(scale.det()) -
         0.5 * (nu + d) * std::log1p(maha / nu);
}

// Per-class quantities reused across many posterior evaluations.
class StudentCache {
 public:
  explicit StudentCache(const StudentParams& params) : params_(&params) {
    params.validate();
    const std::size_t k = params.n_classes();
    const double nu = params.dof;
    const double shared = special::log_gamma(0.5 * (nu + 2.0)) - special::log_gamma(0.5 * nu) -
                          std::log(nu * std::numbers::pi);
    const double prior_lse = log_sum_exp(params.prior_logits);
    inverse_.resize(k);
    offset_.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
      inverse_[c] = params.scales[c].inverse();
      offset_[c] = shared - 0.5 * std::log(params.scales[c].det()) + params.prior_logits[c] - prior_lse;
    }
  }

  const StudentParams& params() const { return *params_; }
  std::size_t n_classes() const { return offset_.size(); }
  const Mat2& inverse_scale(std::size_t c) const { return inverse_[c]; }

  // Per-class log joint: log t(y; mu_c, S_c, nu) + log prior_c.
  void log_joint(Vec2 y, std::span<double> out) const {
    const double nu = params_->dof;
    for (std::size_t c = 0; c < out.size(); ++c) {
      const Vec2 delta = y - params_->means[c];
      const double maha = dot(delta, inverse_[c] * delta);
      out[c] = offset_[c] - 0.5 * (nu + 2.0) * std::log1p(maha / nu);
    }
  }

  // Writes the posterior into out and returns log P_S(y), the student marginal.
  double posterior(Vec2 y, std::span<double> out) const {
    log_joint(y, out);
    const double lse = log_sum_exp(out);
    for (double& v : out) v = std::exp(v - lse);
    return lse;
  }

 private:
  const StudentParams* params_;
  std::vector<Mat2> inverse_;
  std::vector<double> offset_;
};

inline std::vector<double> student_posterior(Vec2 y, const StudentParams& params) {
  StudentCache cache(params);
  std::vector<double> out(params.n_classes());
  cache.posterior(y, out);
  return out;
}

// log P_S(y) = log sum_k prior_k t(y; mu_k, S_k, nu).
inline double student_log_marginal(Vec2 y, const StudentParams& params) {
  StudentCache cache(params);
  std::vector<double> scratch(params.n_classes());
  cache.log_joint(y, scratch);
  return log_sum_exp(scratch);
}

// ---------------------------------------------------------------------------
// Teacher-side transforms
// ---------------------------------------------------------------------------

// softmax(log(p) / T).
inline std::vector<double> apply_temperature(std::span<const double> probs_row, double temperature) {
  if (!(temperature >= 1.0)) throw ParameterError("temperature must be >= 1");
  std::vector<double> out(probs_row.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::log(probs_row[k]) / temperature;
  softmax_inplace(out);
  return out;
}

inline std::vector<double> apply_subset_mask(std::span<const double> probs_row, const SubsetMask& mask) {
  if (mask.size() != probs_row.size()) throw AlignmentError("mask length does not match class count");
  std::vector<double> out;
  out.reserve(mask.kept());
  double mass = 0.0;
  for (std::size_t k = 0; k < probs_row.size(); ++k) {
    if (mask.keeps(k)) {
      out.push_back(probs_row[k]);
      mass += probs_row[k];
    }
  }
  if (mass < kProbFloor * static_cast<double>(probs_row.size()))
    throw DegenerateMaskError("masked probability mass is below the floor");
  for (double& p : out) p /= mass;
  return out;
}

// Restricts a whole table to the kept classes. Rows are renormalized and pass
// through the usual ingestion clamp; labels outside the subset are dropped
// (set to absent) because they have no column to refer to.
inline PredictionTable apply_subset_mask(const PredictionTable& table, const SubsetMask& mask) {
  const std::size_t n = table.n_rows();
  const std::size_t k = table.n_classes();
  if (mask.size() != k) throw AlignmentError("mask length does not match class count");
  std::vector<int> remap(k, -1);
  int next = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (mask.keeps(c)) remap[c] = next++;
  }
  Matrix probs(n, mask.kept());
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = apply_subset_mask(table.row(i), mask);
    std::copy(row.begin(), row.end(), probs.row(i).begin());
  }
  std::optional<Matrix> logits;
  if (table.logits()) {
    logits = Matrix(n, mask.kept());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        if (remap[c] >= 0) (*logits)(i, static_cast<std::size_t>(remap[c])) = (*table.logits())(i, c);
      }
    }
  }
  std::optional<std::vector<int>> labels;
  if (table.labels()) {
    bool all_kept = true;
    std::vector<int> mapped(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int r = remap[static_cast<std::size_t>((*table.labels())[i])];
      all_kept = all_kept && r >= 0;
      mapped[i] = r;
    }
    if (all_kept) labels = std::move(mapped);
  }
  return PredictionTable::from_probs(std::move(probs), std::move(labels), std::move(logits), table.row_ids());
}

// Shannon entropy in nats, with 0 log 0 = 0. Terms are summed in sorted
// order so the result is bitwise invariant under relabeling of classes.
inline double predictive_entropy(std::span<const double> probs_row) {
  std::vector<double> sorted(probs_row.begin(), probs_row.end());
  std::sort(sorted.begin(), sorted.end());
  double h = 0.0;
  for (double p : sorted) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace predmap
