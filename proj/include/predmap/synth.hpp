#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "predmap/model.hpp"

namespace predmap {

struct ConfusablePair {
  std::size_t first = 0;
  std::size_t second = 1;
  double strength = 0.5;  // in (0, 1); fraction of the gap closed between the two centres
};

// Desk-scale stand-in for a trained classifier. Latent class centres sit on a
// circle; each row draws a latent point around its class centre and the
// teacher's logits are -|z - c_k|^2 / tau.
struct SynthConfig {
  std::size_t classes = 10;
  std::size_t n = 2000;
  std::vector<ConfusablePair> confusable_pairs;
  double outlier_fraction = 0.0;
  std::uint64_t seed = 0;
  double radius = 4.0;
  double spread = 1.0;  // per-axis sd of latent points around their centre
  double tau = 4.0;     // logit temperature
};

inline std::vector<Vec2> synth_centres(const SynthConfig& cfg) {
  const std::size_t k = cfg.classes;
  std::vector<Vec2> centres(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
    centres[c] = {cfg.radius * std::cos(angle), cfg.radius * std::sin(angle)};
  }
  for (const auto& pair : cfg.confusable_pairs) {
    const Vec2 a = centres[pair.first];
    const Vec2 b = centres[pair.second];
    centres[pair.first] = a + (0.5 * pair.strength) * (b - a);
    centres[pair.second] = b + (0.5 * pair.strength) * (a - b);
  }
  return centres;
}

inline PredictionTable synth_teacher(const SynthConfig& cfg) {
  const std::size_t k = cfg.classes;
  if (k < 2) throw ParameterError("synthetic teacher needs at least 2 classes");
  if (!(cfg.outlier_fraction >= 0.0 && cfg.outlier_fraction <= 0.1))
    throw ParameterError("outlier fraction must lie in [0, 0.1]");
  if (!(cfg.tau > 0.0) || !(cfg.spread >= 0.0)) throw ParameterError("tau must be positive, spread non-negative");
  for (const auto& pair : cfg.confusable_pairs) {
    if (pair.first >= k || pair.second >= k || pair.first == pair.second)
      throw ParameterError("confusable pair refers to invalid classes");
    if (!(pair.strength > 0.0 && pair.strength < 1.0)) throw ParameterError("confusable strength must be in (0, 1)");
  }

  const std::vector<Vec2> centres = synth_centres(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw_class = [&] { return static_cast<std::size_t>(rng() % k); };

  Matrix probs(cfg.n, k);
  Matrix logits(cfg.n, k);
  std::vector<int> labels(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    std::size_t label = draw_class();
    Vec2 z;
    if (unit(rng) < cfg.outlier_fraction) {
      // Latent point between two classes that are not neighbours on the circle.
      std::size_t other = draw_class();
      const auto adjacent = [&](std::size_t a, std::size_t b) {
        const std::size_t d = a > b ? a - b : b - a;
        return d == 1 || d == k - 1;
      };
      const bool has_distant = k > 3;
      while (other == label || (has_distant && adjacent(label, other))) other = draw_class();
      const double mix = 0.3 + 0.4 * unit(rng);
      z = centres[label] + (1.0 - mix) * (centres[other] - centres[label]);
    } else {
      z = centres[label];
    }
    z.x += cfg.spread * normal(rng);
    z.y += cfg.spread * normal(rng);
    labels[i] = static_cast<int>(label);
    for (std::size_t c = 0; c < k; ++c) logits(i, c) = -squared_norm(z - centres[c]) / cfg.tau;
    const auto p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return PredictionTable::from_probs(std::move(probs), std::move(labels), std::move(logits));
}

}  // namespace predmap
