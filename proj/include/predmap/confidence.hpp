#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "predmap/model.hpp"
#include "predmap/parallel.hpp"
#include "predmap/special.hpp"

namespace predmap {

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct KdeModel {
  std::vector<Vec2> reference;
  double bandwidth_x = 1.0;
  double bandwidth_y = 1.0;
  std::vector<std::string> warnings;
};

struct GmmModel {
  std::vector<double> weights;
  std::vector<Vec2> means;
  std::vector<Mat2> covariances;
  double log_likelihood = 0.0;                  // total, best restart
  std::vector<double> log_likelihood_trace;     // per EM iteration, best restart
};

struct DmmModel {
  std::vector<double> weights;
  std::vector<std::vector<double>> concentrations;  // C x K
  double log_likelihood = 0.0;
  std::vector<double> log_likelihood_trace;
  std::vector<double> weight_sum_trace;             // sum of weights after each M-step
};

struct EntropyModel {};

enum class ConfidenceKind { kde, gmm, dmm, entropy };

inline std::string to_string(ConfidenceKind kind) {
  switch (kind) {
    case ConfidenceKind::kde: return "kde";
    case ConfidenceKind::gmm: return "gmm";
    case ConfidenceKind::dmm: return "dmm";
    case ConfidenceKind::entropy: return "entropy";
  }
  return "unknown";
}

struct ConfidenceModel {
  std::variant<KdeModel, GmmModel, DmmModel, EntropyModel> model;

  ConfidenceKind kind() const { return static_cast<ConfidenceKind>(model.index()); }
};

struct EmConfig {
  double tolerance = 1e-6;
  std::size_t max_iterations = 500;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// KDE
// ---------------------------------------------------------------------------

inline constexpr double kMinBandwidth = 1e-6;

inline KdeModel kde_with_bandwidth(std::vector<Vec2> reference, double hx, double hy) {
  if (reference.empty()) throw ParameterError("KDE needs reference points");
  if (!(hx > 0.0) || !(hy > 0.0)) throw ParameterError("KDE bandwidths must be positive");
  return {std::move(reference), hx, hy, {}};
}

// Gaussian product kernel with Scott's rule per axis: h = sd * N^(-1/6).
inline ConfidenceModel fit_kde(const EmbeddingTable& emb) {
  const std::size_t n = emb.size();
  if (n < 2) throw ParameterError("KDE needs at least 2 points");
  double mx = 0.0, my = 0.0;
  for (const Vec2& p : emb.points) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double vx = 0.0, vy = 0.0;
  for (const Vec2& p : emb.points) {
    vx += (p.x - mx) * (p.x - mx);
    vy += (p.y - my) * (p.y - my);
  }
  const double factor = std::pow(static_cast<double>(n), -1.0 / 6.0);
  double hx = std::sqrt(vx / static_cast<double>(n - 1)) * factor;
  double hy = std::sqrt(vy / static_cast<double>(n - 1)) * factor;
  std::vector<std::string> warnings;
  if (!(hx >= kMinBandwidth)) {
    hx = kMinBandwidth;
    warnings.emplace_back("zero variance on x axis; KDE bandwidth floored");
  }
  if (!(hy >= kMinBandwidth)) {
    hy = kMinBandwidth;
    warnings.emplace_back("zero variance on y axis; KDE bandwidth floored");
  }
  KdeModel model = kde_with_bandwidth(emb.points, hx, hy);
  model.warnings = std::move(warnings);
  return {std::move(model)};
}

inline double kde_log_density(const KdeModel& m, Vec2 y) {
  const double log_norm = -std::log(2.0 * std::numbers::pi * m.bandwidth_x * m.bandwidth_y) -
                          std::log(static_cast<double>(m.reference.size()));
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(m.reference.size());
  for (std::size_t j = 0; j < m.reference.size(); ++j) {
    const double dx = (y.x - m.reference[j].x) / m.bandwidth_x;
    const double dy = (y.y - m.reference[j].y) / m.bandwidth_y;
    terms[j] = -0.5 * (dx * dx + dy * dy);
    best = std::max(best, terms[j]);
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return log_norm + best + std::log(s);
}

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

inline constexpr double kCovarianceFloor = 1e-6;

inline double gaussian_log_density(Vec2 y, Vec2 mu, const Mat2& cov) {
  const Vec2 d = y - mu;
  return -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(cov.det()) - 0.5 * dot(d, cov.inverse() * d);
}

inline double gmm_log_density(const GmmModel& m, Vec2 y) {
  std::vector<double> terms(m.weights.size());
  for (std::size_t c = 0; c < terms.size(); ++c)
    terms[c] = std::log(m.weights[c]) + gaussian_log_density(y, m.means[c], m.covariances[c]);
  return log_sum_exp(terms);
}

namespace detail {

// Raises eigenvalues of a symmetric 2x2 matrix to at least `floor`.
inline Mat2 floor_eigenvalues(Mat2 m, double floor) {
  const double off = 0.5 * (m.xy + m.yx);
  m.xy = m.yx = off;
  const auto [lo, hi] = m.eigenvalues();
  if (lo >= floor) return m;
  if (std::abs(off) < 1e-300) {
    return {std::max(m.xx, floor), 0.0, 0.0, std::max(m.yy, floor)};
  }
  // Eigenvectors of [[a, b], [b, d]]: (lambda - d, b).
  auto rebuild = [&](double lambda) {
    const double vx = lambda - m.yy;
    const double vy = off;
    const double norm = std::hypot(vx, vy);
    return std::pair{vx / norm, vy / norm};
  };
  const auto [ax, ay] = rebuild(hi);
  const double l1 = std::max(hi, floor);
  const double l2 = std::max(lo, floor);
  // Second eigenvector is orthogonal: (-ay, ax).
  return {l1 * ax * ax + l2 * ay * ay, (l1 - l2) * ax * ay, (l1 - l2) * ax * ay, l1 * ay * ay + l2 * ax * ax};
}

// k-means++ seeding over arbitrary points with a squared distance functor.
template <typename Point, typename Dist>
std::vector<std::size_t> kmeans_pp(std::span<const Point> points, std::size_t count, std::mt19937_64& rng,
                                   Dist&& dist2) {
  const std::size_t n = points.size();
  std::vector<std::size_t> chosen;
  chosen.push_back(static_cast<std::size_t>(rng() % n));
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (chosen.size() < count) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(points[i], points[chosen.back()]));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= best[pick];
        if (r <= 0.0) break;
      }
    } else {
      pick = static_cast<std::size_t>(rng() % n);
    }
    chosen.push_back(pick);
  }
  return chosen;
}

}  // namespace detail

inline GmmModel fit_gmm_once(const std::vector<Vec2>& pts, std::size_t components, const EmConfig& cfg,
                             std::mt19937_64& rng) {
  const std::size_t n = pts.size();
  const std::size_t cc = components;
  GmmModel m;
  m.weights.assign(cc, 1.0 / static_cast<double>(cc));
  m.means.resize(cc);

  double mx = 0.0, my = 0.0;
  for (const Vec2& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  Mat2 global{};
  for (const Vec2& p : pts) {
    global.xx += (p.x - mx) * (p.x - mx);
    global.xy += (p.x - mx) * (p.y - my);
    global.yy += (p.y - my) * (p.y - my);
  }
  global.xx /= static_cast<double>(n);
  global.xy /= static_cast<double>(n);
  global.yy /= static_cast<double>(n);
  global.yx = global.xy;
  global = detail::floor_eigenvalues(global, kCovarianceFloor);

  const auto seeds = detail::kmeans_pp<Vec2>(pts, cc, rng, [](Vec2 a, Vec2 b) { return squared_norm(a - b); });
  for (std::size_t c = 0; c < cc; ++c) m.means[c] = pts[seeds[c]];
  m.covariances.assign(cc, global);

  Matrix resp(n, cc);
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    // E-step
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto r = resp.row(i);
      for (std::size_t c = 0; c < cc; ++c)
        r[c] = std::log(m.weights[c]) + gaussian_log_density(pts[i], m.means[c], m.covariances[c]);
      const double lse = log_sum_exp(r);
      ll += lse;
      for (double& v : r) v = std::exp(v - lse);
    }
    m.log_likelihood_trace.push_back(ll);
    m.log_likelihood = ll;
    if (it > 0 && ll - prev < cfg.tolerance) break;
    prev = ll;

    // M-step
    for (std::size_t c = 0; c < cc; ++c) {
      double nk = 0.0;
      Vec2 mu{};
      for (std::size_t i = 0; i < n; ++i) {
        nk += resp(i, c);
        mu = mu + resp(i, c) * pts[i];
      }
      if (nk < 1e-10) {
        // Empty component: restart it at the point worst explained by the current mixture.
        std::size_t far = 0;
        double worst = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = gmm_log_density(m, pts[i]);
          if (d < worst) {
            worst = d;
            far = i;
          }
        }
        m.means[c] = pts[far];
        m.covariances[c] = global;
        m.weights[c] = 1.0 / static_cast<double>(n);
        continue;
      }
      mu = (1.0 / nk) * mu;
      Mat2 cov{};
      for (std::size_t i = 0; i < n; ++i) {
        const Vec2 d = pts[i] - mu;
        const double r = resp(i, c);
        cov.xx += r * d.x * d.x;
        cov.xy += r * d.x * d.y;
        cov.yy += r * d.y * d.y;
      }
      cov.xx /= nk;
      cov.xy /= nk;
      cov.yy /= nk;
      cov.yx = cov.xy;
      m.means[c] = mu;
      m.covariances[c] = detail::floor_eigenvalues(cov, kCovarianceFloor);
      m.weights[c] = nk / static_cast<double>(n);
    }
    const double wsum = std::accumulate(m.weights.begin(), m.weights.end(), 0.0);
    for (double& w : m.weights) w /= wsum;
  }
  return m;
}

inline ConfidenceModel fit_gmm(const EmbeddingTable& emb, std::size_t components, const EmConfig& cfg = {}) {
  const std::size_t n = emb.size();
  if (components < 1 || components > n) throw ParameterError("GMM component count must lie in [1, N]");
  std::optional<GmmModel> best;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, cfg.restarts); ++r) {
    std::mt19937_64 rng(cfg.seed + 0x9E3779B97F4A7C15ULL * (r + 1));
    GmmModel m = fit_gmm_once(emb.points, components, cfg, rng);
    if (!best || m.log_likelihood > best->log_likelihood) best = std::move(m);
  }
  return {std::move(*best)};
}

// ---------------------------------------------------------------------------
// Dirichlet mixture
// ---------------------------------------------------------------------------

inline constexpr double kMinConcentration = 1e-3;

inline double dirichlet_log_density(std::span<const double> p, std::span<const double> alpha) {
  double a0 = 0.0;
  double out = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    a0 += alpha[k];
    out += (alpha[k] - 1.0) * std::log(p[k]) - special::log_gamma(alpha[k]);
  }
  return out + special::log_gamma(a0);
}

inline double dmm_log_density(const DmmModel& m, std::span<const double> p) {
  std::vector<double> terms(m.weights.size());
  for (std::size_t c = 0; c < terms.size(); ++c)
    terms[c] = std::log(m.weights[c]) + dirichlet_log_density(p, m.concentrations[c]);
  return log_sum_exp(terms);
}

// Minka's fixed point for the Dirichlet MLE given mean log-probabilities:
//   alpha_k <- digamma^{-1}(digamma(sum alpha) + mean_log_p_k).
inline void minka_fixed_point(std::vector<double>& alpha, std::span<const double> mean_log_p,
                              std::size_t max_iterations = 100, double tol = 1e-10) {
  for (std::size_t it = 0; it < max_iterations; ++it) {
    const double a0 = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    const double psi0 = special::digamma(a0);
    double change = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      double next = special::inverse_digamma(psi0 + mean_log_p[k]);
      if (!std::isfinite(next) || next < kMinConcentration) next = kMinConcentration;
      change = std::max(change, std::abs(next - alpha[k]) / alpha[k]);
      alpha[k] = next;
    }
    if (change < tol) break;
  }
}

// Moment-matching start for a weighted set of simplex rows.
inline std::vector<double> dirichlet_moment_start(const Matrix& rows, std::span<const double> w) {
  const std::size_t k = rows.cols();
  std::vector<double> mean(k, 0.0), sq(k, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    total += w[i];
    for (std::size_t c = 0; c < k; ++c) {
      mean[c] += w[i] * rows(i, c);
      sq[c] += w[i] * rows(i, c) * rows(i, c);
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    mean[c] /= total;
    sq[c] /= total;
  }
  // precision s from the first coordinate's variance: var = m (1 - m) / (s + 1)
  double s = 10.0;
  const double var = sq[0] - mean[0] * mean[0];
  if (var > 1e-12) s = std::clamp(mean[0] * (1.0 - mean[0]) / var - 1.0, 0.1, 1e4);
  std::vector<double> alpha(k);
  for (std::size_t c = 0; c < k; ++c) alpha[c] = std::max(kMinConcentration, s * mean[c]);
  return alpha;
}

inline ConfidenceModel fit_dmm(const PredictionTable& preds, std::size_t components, const EmConfig& cfg = {}) {
  const std::size_t n = preds.n_rows();
  const std::size_t k = preds.n_classes();
  const std::size_t cc = components;
  if (cc < 1 || cc > n) throw ParameterError("DMM component count must lie in [1, N]");
  const Matrix& rows = preds.probs();
  Matrix logp(n, k);
  for (std::size_t i = 0; i < n * k; ++i) logp.data()[i] = std::log(rows.data()[i]);

  // Hard k-means++ partition on log-probabilities for the starting point.
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::span<const double>> pts;
  for (std::size_t i = 0; i < n; ++i) pts.push_back(logp.row(i));
  auto dist2 = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
  };
  const auto seeds = detail::kmeans_pp<std::span<const double>>(pts, cc, rng, dist2);

  DmmModel m;
  m.weights.assign(cc, 0.0);
  m.concentrations.resize(cc);
  Matrix resp(n, cc);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cc; ++c) {
      if (dist2(pts[i], pts[seeds[c]]) < dist2(pts[i], pts[seeds[best]])) best = c;
    }
    resp(i, best) = 1.0;
  }
  std::vector<double> w(n);
  for (std::size_t c = 0; c < cc; ++c) {
    double nk = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = resp(i, c);
      nk += w[i];
    }
    if (nk == 0.0) {
      std::fill(w.begin(), w.end(), 1.0);
      nk = static_cast<double>(n);
    }
    m.concentrations[c] = dirichlet_moment_start(rows, w);
    m.weights[c] = std::max(nk, 1.0) / static_cast<double>(n);
  }
  double wsum = std::accumulate(m.weights.begin(), m.weights.end(), 0.0);
  for (double& x : m.weights) x /= wsum;

  double prev = -std::numeric_limits<double>::infinity();
  std::vector<double> mean_log(k);
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto r = resp.row(i);
      for (std::size_t c = 0; c < cc; ++c)
        r[c] = std::log(m.weights[c]) + dirichlet_log_density(rows.row(i), m.concentrations[c]);
      const double lse = log_sum_exp(r);
      ll += lse;
      for (double& v : r) v = std::exp(v - lse);
    }
    m.log_likelihood_trace.push_back(ll);
    m.log_likelihood = ll;
    if (it > 0 && ll - prev < cfg.tolerance) break;
    prev = ll;

    for (std::size_t c = 0; c < cc; ++c) {
      double nk = 0.0;
      std::fill(mean_log.begin(), mean_log.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, c);
        nk += r;
        for (std::size_t j = 0; j < k; ++j) mean_log[j] += r * logp(i, j);
      }
      m.weights[c] = nk / static_cast<double>(n);
      if (nk < 1e-10) {
        m.weights[c] = 1e-10;
        continue;
      }
      for (double& v : mean_log) v /= nk;
      minka_fixed_point(m.concentrations[c], mean_log);
    }
    wsum = std::accumulate(m.weights.begin(), m.weights.end(), 0.0);
    for (double& x : m.weights) x /= wsum;
    m.weight_sum_trace.push_back(std::accumulate(m.weights.begin(), m.weights.end(), 0.0));
  }
  return {std::move(m)};
}

// ---------------------------------------------------------------------------
// Scoring and rejection
// ---------------------------------------------------------------------------

struct ScoreInputs {
  const EmbeddingTable* embedding = nullptr;
  const PredictionTable* predictions = nullptr;
};

// Confidence per row, higher is more confident: log-density for kde/gmm (at
// the embedding) and dmm (at the prediction vector), negative entropy otherwise.
inline std::vector<double> score(const ConfidenceModel& model, const ScoreInputs& in, unsigned threads = 1) {
  const auto kind = model.kind();
  const bool needs_embedding = kind == ConfidenceKind::kde || kind == ConfidenceKind::gmm;
  if (needs_embedding && in.embedding == nullptr)
    throw UsageError(to_string(kind) + " confidence needs an embedding");
  if (!needs_embedding && in.predictions == nullptr)
    throw UsageError(to_string(kind) + " confidence needs prediction vectors");
  if (kind == ConfidenceKind::dmm &&
      std::get<DmmModel>(model.model).concentrations.front().size() != in.predictions->n_classes())
    throw UsageError("dmm model was fitted on a different class count");

  const std::size_t n = needs_embedding ? in.embedding->size() : in.predictions->n_rows();
  std::vector<double> out(n);
  constexpr std::size_t kBlock = 64;
  for_each_block((n + kBlock - 1) / kBlock, threads, [&](std::size_t b) {
    const std::size_t end = std::min(n, (b + 1) * kBlock);
    for (std::size_t i = b * kBlock; i < end; ++i) {
      switch (kind) {
        case ConfidenceKind::kde:
          out[i] = kde_log_density(std::get<KdeModel>(model.model), in.embedding->points[i]);
          break;
        case ConfidenceKind::gmm:
          out[i] = gmm_log_density(std::get<GmmModel>(model.model), in.embedding->points[i]);
          break;
        case ConfidenceKind::dmm:
          out[i] = dmm_log_density(std::get<DmmModel>(model.model), in.predictions->row(i));
          break;
        case ConfidenceKind::entropy:
          out[i] = -predictive_entropy(in.predictions->row(i));
          break;
      }
    }
  });
  return out;
}

struct RejectionPoint {
  double fraction = 1.0;
  double accuracy = 0.0;
};

struct RejectionCurve {
  std::vector<RejectionPoint> points;
};

inline std::vector<double> default_rejection_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 20; ++i) grid.push_back(static_cast<double>(i) / 20.0);
  return grid;
}

// Number of rows kept at fraction f: ceil(f N), guarded against f*N landing a
// hair above an integer through rounding.
inline std::size_t kept_count(double fraction, std::size_t n) {
  const double raw = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw))));
}

// Keeps the ceil(fN) highest-scoring rows (ties by ascending row index) and
// reports accuracy of `predicted` against `labels` on the kept set.
inline RejectionCurve rejection_curve(std::span<const double> scores, const std::optional<std::vector<int>>& labels,
                                      std::span<const int> predicted, std::span<const double> grid) {
  if (!labels) throw UsageError("rejection curve needs true labels");
  const std::size_t n = scores.size();
  if (labels->size() != n || predicted.size() != n) throw AlignmentError("rejection curve inputs differ in length");
  if (grid.empty() || grid.back() != 1.0) throw ParameterError("rejection grid must end at 1.0");
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (!(grid[g] > 0.0 && grid[g] <= 1.0)) throw ParameterError("rejection fractions must lie in (0, 1]");
    if (g > 0 && !(grid[g] > grid[g - 1])) throw ParameterError("rejection fractions must be increasing");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Running count of correct rows along the ranking.
  std::vector<std::size_t> correct_prefix(n + 1, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = order[r];
    correct_prefix[r + 1] = correct_prefix[r] + ((*labels)[i] == predicted[i] ? 1 : 0);
  }
  RejectionCurve curve;
  for (double f : grid) {
    const std::size_t kept = std::max<std::size_t>(1, kept_count(f, n));
    curve.points.push_back({f, static_cast<double>(correct_prefix[kept]) / static_cast<double>(kept)});
  }
  return curve;
}

}  // namespace predmap
