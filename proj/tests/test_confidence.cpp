#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "predmap/confidence.hpp"

using namespace predmap;

namespace {

EmbeddingTable gaussian_blobs(std::size_t n, std::uint64_t seed, double sep) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EmbeddingTable emb;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = i % 2 == 0 ? -sep : sep;
    emb.points.push_back({cx + normal(rng), normal(rng)});
  }
  return emb;
}

Matrix dirichlet_sample(std::size_t n, const std::vector<double>& alpha, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Matrix out(n, alpha.size());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < alpha.size(); ++k) {
      std::gamma_distribution<double> g(alpha[k], 1.0);
      s += (out(i, k) = g(rng));
    }
    for (double& v : out.row(i)) v /= s;
  }
  return out;
}

}  // namespace

TEST(Kde, PointMassConcentrates) {
  EmbeddingTable emb{std::vector<Vec2>(20, Vec2{0.0, 0.0})};
  const auto model = fit_kde(emb);
  const auto& kde = std::get<KdeModel>(model.model);
  EXPECT_EQ(kde.bandwidth_x, kMinBandwidth);
  EXPECT_EQ(kde.warnings.size(), 2u);
  const double near = kde_log_density(kde, {0.0, 0.0});
  const double far = kde_log_density(kde, {10.0, 0.0});
  EXPECT_GT(near - far, std::log(1e6));
}

TEST(Kde, ScottBandwidth) {
  const auto emb = gaussian_blobs(400, 1, 0.0);
  const auto kde_fit = fit_kde(emb);
  const auto& kde = std::get<KdeModel>(kde_fit.model);
  double m = 0.0, v = 0.0;
  for (const Vec2& p : emb.points) m += p.x;
  m /= 400.0;
  for (const Vec2& p : emb.points) v += (p.x - m) * (p.x - m);
  EXPECT_NEAR(kde.bandwidth_x, std::sqrt(v / 399.0) * std::pow(400.0, -1.0 / 6.0), 1e-14);
}

TEST(Kde, IntegratesToOne) {
  const auto emb = gaussian_blobs(200, 2, 4.0);
  const auto kde_fit = fit_kde(emb);
  const auto& kde = std::get<KdeModel>(kde_fit.model);
  const double h = 0.05;
  double total = 0.0;
  for (double x = -12.0; x <= 12.0; x += h)
    for (double y = -8.0; y <= 8.0; y += h) total += std::exp(kde_log_density(kde, {x, y}));
  EXPECT_NEAR(total * h * h, 1.0, 1e-2);
}

TEST(Kde, DuplicatedDataWithFixedBandwidth) {
  const auto emb = gaussian_blobs(50, 3, 2.0);
  std::vector<Vec2> doubled = emb.points;
  doubled.insert(doubled.end(), emb.points.begin(), emb.points.end());
  const auto a = kde_with_bandwidth(emb.points, 0.4, 0.3);
  const auto b = kde_with_bandwidth(doubled, 0.4, 0.3);
  for (double x = -5.0; x <= 5.0; x += 0.7) {
    EXPECT_NEAR(kde_log_density(a, {x, 0.3 * x}), kde_log_density(b, {x, 0.3 * x}), 1e-12);
  }
}

TEST(Gmm, SingleComponentIsSampleMean) {
  const auto emb = gaussian_blobs(1000, 4, 0.0);
  const auto model = fit_gmm(emb, 1);
  const auto& g = std::get<GmmModel>(model.model);
  double mx = 0.0, my = 0.0;
  for (const Vec2& p : emb.points) {
    mx += p.x;
    my += p.y;
  }
  mx /= 1000.0;
  my /= 1000.0;
  const double se = 1.0 / std::sqrt(1000.0);
  EXPECT_NEAR(g.means[0].x, mx, 3 * se);
  EXPECT_NEAR(g.means[0].y, my, 3 * se);
  EXPECT_NEAR(g.weights[0], 1.0, 1e-12);
  EXPECT_NEAR(g.covariances[0].xx, 1.0, 0.15);
}

TEST(Gmm, LogLikelihoodNonDecreasing) {
  const auto emb = gaussian_blobs(300, 5, 3.0);
  EmConfig cfg;
  cfg.seed = 17;
  const auto g_fit = fit_gmm(emb, 3, cfg);
  const auto& g = std::get<GmmModel>(g_fit.model);
  ASSERT_GE(g.log_likelihood_trace.size(), 2u);
  for (std::size_t t = 1; t < g.log_likelihood_trace.size(); ++t)
    EXPECT_GE(g.log_likelihood_trace[t], g.log_likelihood_trace[t - 1] - 1e-9 * std::abs(g.log_likelihood_trace[t]));
  double ws = 0.0;
  for (double w : g.weights) ws += w;
  EXPECT_NEAR(ws, 1.0, 1e-9);
}

TEST(Gmm, OneComponentPerPointStaysFinite) {
  const auto emb = gaussian_blobs(12, 6, 1.0);
  const auto model = fit_gmm(emb, 12);
  const auto& g = std::get<GmmModel>(model.model);
  for (const Mat2& c : g.covariances) {
    const auto [lo, hi] = c.eigenvalues();
    EXPECT_GE(lo, kCovarianceFloor * (1.0 - 1e-9));
    EXPECT_TRUE(std::isfinite(hi));
  }
  for (double s : score(model, {&emb, nullptr})) EXPECT_TRUE(std::isfinite(s));
}

TEST(Gmm, RejectsBadComponentCount) {
  const auto emb = gaussian_blobs(5, 6, 1.0);
  EXPECT_THROW(fit_gmm(emb, 0), ParameterError);
  EXPECT_THROW(fit_gmm(emb, 6), ParameterError);
}

TEST(Dmm, UniformRowsGiveUniformMean) {
  Matrix probs(40, 4);
  for (double& v : probs.data()) v = 0.25;
  const auto preds = PredictionTable::from_probs(probs);
  const auto d_fit = fit_dmm(preds, 1);
  const auto& d = std::get<DmmModel>(d_fit.model);
  double s = 0.0;
  for (double a : d.concentrations[0]) s += a;
  for (double a : d.concentrations[0]) EXPECT_NEAR(a / s, 0.25, 1e-6);
}

TEST(Dmm, RecoversDirichletParameters) {
  const std::vector<double> alpha = {2.0, 5.0, 3.0};
  const auto preds = PredictionTable::from_probs(dirichlet_sample(5000, alpha, 8));
  const auto d_fit = fit_dmm(preds, 1);
  const auto& d = std::get<DmmModel>(d_fit.model);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(d.concentrations[0][k], alpha[k], 0.1 * alpha[k]) << k;
}

TEST(Dmm, WeightsStayNormalized) {
  Matrix a = dirichlet_sample(300, {8.0, 1.0, 1.0}, 9);
  Matrix b = dirichlet_sample(300, {1.0, 1.0, 8.0}, 10);
  Matrix both(600, 3);
  for (std::size_t i = 0; i < 300; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      both(i, k) = a(i, k);
      both(300 + i, k) = b(i, k);
    }
  const auto preds = PredictionTable::from_probs(both);
  const auto d_fit = fit_dmm(preds, 2);
  const auto& d = std::get<DmmModel>(d_fit.model);
  ASSERT_FALSE(d.weight_sum_trace.empty());
  for (double s : d.weight_sum_trace) EXPECT_NEAR(s, 1.0, 1e-12);
  for (const auto& conc : d.concentrations)
    for (double c : conc) EXPECT_GE(c, kMinConcentration);
}

TEST(Score, EntropyOrdering) {
  Matrix probs(2, 3);
  probs(0, 0) = 1.0;
  probs(1, 0) = probs(1, 1) = probs(1, 2) = 1.0 / 3.0;
  const auto preds = PredictionTable::from_probs(probs);
  const auto s = score(ConfidenceModel{EntropyModel{}}, {nullptr, &preds});
  EXPECT_GT(s[0], s[1]);
}

TEST(Score, RowPermutationPermutesScores) {
  const auto emb = gaussian_blobs(60, 11, 2.0);
  const auto model = fit_gmm(emb, 2);
  EmbeddingTable shuffled = emb;
  std::vector<std::size_t> perm(60);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < 60; ++i) shuffled.points[i] = emb.points[perm[i]];
  const auto a = score(model, {&emb, nullptr});
  const auto b = score(model, {&shuffled, nullptr});
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(b[i], a[perm[i]]);
}

TEST(Score, KindDataMismatchIsUsageError) {
  const auto emb = gaussian_blobs(10, 1, 1.0);
  EXPECT_THROW(score(fit_kde(emb), {nullptr, nullptr}), UsageError);
  EXPECT_THROW(score(ConfidenceModel{EntropyModel{}}, {&emb, nullptr}), UsageError);
}

TEST(Rejection, FullFractionIsOverallAccuracy) {
  const std::vector<double> scores = {0.3, 0.9, 0.1, 0.5, 0.7};
  const std::vector<int> labels = {0, 1, 1, 0, 2};
  const std::vector<int> pred = {0, 1, 0, 1, 2};
  const std::vector<double> grid = {0.2, 0.4, 0.6, 1.0};
  const auto curve = rejection_curve(scores, labels, pred, grid);
  ASSERT_EQ(curve.points.size(), 4u);
  EXPECT_EQ(curve.points.back().accuracy, 3.0 / 5.0);
  // Ranking: rows 1, 4, 3, 0, 2.
  EXPECT_EQ(curve.points[0].accuracy, 1.0);
  EXPECT_EQ(curve.points[1].accuracy, 1.0);
  EXPECT_EQ(curve.points[2].accuracy, 2.0 / 3.0);
}

TEST(Rejection, OracleConfidenceIsPerfectUpToAccuracy) {
  std::mt19937_64 rng(3);
  const std::size_t n = 500;
  std::vector<int> labels(n), pred(n);
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(rng() % 4);
    pred[i] = rng() % 10 < 7 ? labels[i] : static_cast<int>((labels[i] + 1) % 4);
    scores[i] = pred[i] == labels[i] ? 1.0 : 0.0;
  }
  const auto grid = default_rejection_grid();
  const auto curve = rejection_curve(scores, labels, pred, grid);
  const double overall = curve.points.back().accuracy;
  for (const auto& p : curve.points) {
    if (p.fraction <= overall) {
      EXPECT_EQ(p.accuracy, 1.0) << p.fraction;
    }
  }
}

TEST(Rejection, ConstantScoresKeepRowPrefix) {
  const std::vector<double> scores(10, 0.0);
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1, 1, 1, 1, 1};
  const std::vector<int> pred(10, 0);
  const std::vector<double> grid = {0.3, 0.5, 1.0};
  const auto curve = rejection_curve(scores, labels, pred, grid);
  EXPECT_EQ(curve.points[0].accuracy, 1.0);
  EXPECT_EQ(curve.points[1].accuracy, 3.0 / 5.0);
  EXPECT_EQ(curve.points[2].accuracy, 3.0 / 10.0);
}

TEST(Rejection, KeptCountIsCeiling) {
  EXPECT_EQ(kept_count(0.3, 10), 3u);
  EXPECT_EQ(kept_count(0.35, 10), 4u);
  EXPECT_EQ(kept_count(1.0, 7), 7u);
  EXPECT_EQ(kept_count(0.05, 2000), 100u);
}

TEST(Rejection, MissingLabelsIsUsageError) {
  const std::vector<double> scores = {1.0};
  const std::vector<int> pred = {0};
  const std::vector<double> grid = {1.0};
  EXPECT_THROW(rejection_curve(scores, std::nullopt, pred, grid), UsageError);
}
