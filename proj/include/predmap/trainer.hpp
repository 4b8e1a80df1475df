#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "predmap/model.hpp"
#include "predmap/objective.hpp"

namespace predmap {

// Adam over one flat parameter group.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t size = 0) : first_moment(size, 0.0), second_moment(size, 0.0) {}

  void update(std::span<double> params, std::span<const double> grad, double lr) {
    if (params.size() != first_moment.size() || grad.size() != params.size())
      throw AlignmentError("Adam buffers do not match the parameter group");
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t j = 0; j < params.size(); ++j) {
      first_moment[j] = beta1 * first_moment[j] + (1.0 - beta1) * grad[j];
      second_moment[j] = beta2 * second_moment[j] + (1.0 - beta2) * grad[j] * grad[j];
      const double m_hat = first_moment[j] / c1;
      const double v_hat = second_moment[j] / c2;
      params[j] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
    }
  }
};

struct TraceRecord {
  std::size_t epoch = 0;
  double temperature = 1.0;
  double loss = 0.0;
  double acc_teacher = 0.0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct TrainTrace {
  std::vector<TraceRecord> records;
  friend bool operator==(const TrainTrace&, const TrainTrace&) = default;
};

struct TrainResult {
  EmbeddingTable embedding;
  StudentParams params;
  TrainTrace trace;
};

// Piecewise-linear interpolation of the temperature schedule, clamped at both ends.
inline double anneal_temperature(std::span<const TemperatureBreakpoint> schedule, double epoch) {
  if (schedule.empty()) return 1.0;
  if (epoch <= schedule.front().epoch) return std::max(1.0, schedule.front().temperature);
  if (epoch >= schedule.back().epoch) return std::max(1.0, schedule.back().temperature);
  for (std::size_t s = 1; s < schedule.size(); ++s) {
    const auto& a = schedule[s - 1];
    const auto& b = schedule[s];
    if (epoch <= b.epoch) {
      const double t = (epoch - a.epoch) / (b.epoch - a.epoch);
      return std::max(1.0, a.temperature + (b.temperature - a.temperature) * t);
    }
  }
  return 1.0;
}

// Fraction of rows whose student argmax equals the teacher argmax.
inline double agreement_with_teacher(const PredictionTable& preds, const EmbeddingTable& emb,
                                     const StudentParams& params) {
  const StudentCache cache(params);
  std::vector<double> q(params.n_classes());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.n_rows(); ++i) {
    cache.posterior(emb.points[i], q);
    hits += argmax(q) == argmax(preds.row(i)) ? 1 : 0;
  }
  return preds.n_rows() == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(preds.n_rows());
}

inline std::pair<EmbeddingTable, StudentParams> initialize(const PredictionTable& preds, const TrainConfig& cfg) {
  const std::size_t k = preds.n_classes();
  if (k < 2) throw ParameterError("need at least 2 classes");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  StudentParams params;
  params.dof = cfg.dof;
  params.scales.assign(k, Mat2::identity(std::sqrt(std::log(static_cast<double>(k)))));
  params.prior_logits.assign(k, 0.0);
  params.means.resize(k);
  for (auto& mu : params.means) {
    mu.x = normal(rng);
    mu.y = normal(rng);
  }

  EmbeddingTable emb;
  emb.points.resize(preds.n_rows());
  for (std::size_t i = 0; i < preds.n_rows(); ++i) {
    Vec2& y = emb.points[i];
    if (cfg.init == InitMode::random) {
      y.x = normal(rng);
      y.y = normal(rng);
    } else {
      const Vec2 centre = params.means[argmax(preds.row(i))];
      y.x = centre.x + 0.1 * normal(rng);
      y.y = centre.y + 0.1 * normal(rng);
    }
  }
  return {std::move(emb), std::move(params)};
}

// Row order for one epoch; depends only on (seed, epoch) so that joint and
// coordinate runs see the same minibatches.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw so the order is identical across standard libraries.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Called after every epoch; return false to stop early.
using EpochCallback = std::function<bool(const TraceRecord&)>;

// Continues optimization from the given starting point.
inline TrainResult train_from(const PredictionTable& preds, EmbeddingTable emb, StudentParams params,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  params.validate();
  const std::size_t n = preds.n_rows();
  const std::size_t k = preds.n_classes();
  emb.validate(n);
  if (params.n_classes() != k) throw AlignmentError("student classes do not match predictions");
  if (cfg.batch_size > n && n > 0) throw ParameterError("batch size exceeds row count");

  AdamState adam_embed(2 * n);
  AdamState adam_means(2 * k);
  AdamState adam_prior(k);

  auto as_flat = [](std::vector<Vec2>& v) { return std::span<double>(&v.front().x, 2 * v.size()); };
  auto as_flat_const = [](const std::vector<Vec2>& v) { return std::span<const double>(&v.front().x, 2 * v.size()); };
  static_assert(sizeof(Vec2) == 2 * sizeof(double));

  TrainTrace trace;
  Matrix targets;
  double targets_temperature = 0.0;

  auto check_finite = [&](const LossReport& report, std::size_t epoch) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(report.per_row[i]))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", row " + std::to_string(i) +
                             " (id " + preds.row_ids()[i] + ")");
    }
  };
  // A bad starting point would otherwise spread NaN into the means before the first check.
  if (cfg.epochs > 0) {
    const double t0 = anneal_temperature(cfg.temperature_schedule, 1.0);
    check_finite(loss_from_targets(tempered_probs(preds, t0), emb, params, cfg.threads), 0);
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double temperature = anneal_temperature(cfg.temperature_schedule, static_cast<double>(epoch));
    if (targets.empty() || temperature != targets_temperature) {
      targets = tempered_probs(preds, temperature);
      targets_temperature = temperature;
    }
    const bool update_embed = cfg.mode == TrainMode::joint || epoch % 2 == 0;
    const bool update_student = cfg.mode == TrainMode::joint || epoch % 2 == 1;

    const auto order = epoch_order(n, cfg.seed, epoch);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const GradientBundle grad = gradients_from_targets(targets, emb, params, batch, cfg.threads);
      if (update_embed) adam_embed.update(as_flat(emb.points), as_flat_const(grad.d_embed), cfg.lr_embed);
      if (update_student) {
        adam_means.update(as_flat(params.means), as_flat_const(grad.d_means), cfg.lr_means);
        adam_prior.update(params.prior_logits, grad.d_prior, cfg.lr_prior);
      }
    }

    const LossReport report = loss_from_targets(targets, emb, params, cfg.threads);
    check_finite(report, epoch);
    TraceRecord rec{epoch, temperature, report.total, agreement_with_teacher(preds, emb, params)};
    trace.records.push_back(rec);
    if (on_epoch && !on_epoch(rec)) break;
  }
  return {std::move(emb), std::move(params), std::move(trace)};
}

inline TrainResult train(const PredictionTable& preds, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  auto [emb, params] = initialize(preds, cfg);
  return train_from(preds, std::move(emb), std::move(params), cfg, on_epoch);
}

}  // namespace predmap
