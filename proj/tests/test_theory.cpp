#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "fdseg/error.hpp"
#include "fdseg/theory.hpp"

using namespace fdseg;

namespace {

std::vector<double> normals(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

TEST(Lemma1, PerfectPredictionWithMaskFeatures) {
  const std::vector<double> y = {1, 0, 1, 1, 0, 0, 1, 0};
  const auto r = lemma1_check(y, 1, y, y);
  EXPECT_DOUBLE_EQ(r.dice, 1.0);
  EXPECT_DOUBLE_EQ(r.k, 1.0);
  EXPECT_DOUBLE_EQ(r.fd_normalized, 1.0);
  EXPECT_NEAR(r.lhs, -std::log(2.0), 1e-12);
  EXPECT_NEAR(r.rhs, 0.0, 1e-12);
  EXPECT_TRUE(r.holds);
}

TEST(Lemma1, HandComputedInstance) {
  // two channels, four pixels
  const std::vector<double> f = {1, 0, 2, 1, 0, 3, 1, 1};
  const std::vector<double> y = {1, 1, 0, 0};
  const std::vector<double> yp = {1, 0, 0, 1};
  const auto r = lemma1_check(f, 2, y, yp);
  EXPECT_DOUBLE_EQ(r.dice, 0.5);
  EXPECT_DOUBLE_EQ(r.k, 1.0);
  // signed sums: c0 = 1+2-0-1 = 2, c1 = 0+1-3-1 = -3; totals 4 and 5
  EXPECT_NEAR(r.fd_normalized, std::sqrt(13.0) / std::sqrt(41.0), 1e-12);
  EXPECT_NEAR(r.gap, -std::log(std::sqrt(13.0 / 41.0)) + std::log(1.0), 1e-12);
}

TEST(Lemma1, ContractViolations) {
  const std::vector<double> y = {1, 0}, zero = {0, 0};
  EXPECT_THROW(lemma1_check(std::vector<double>{1, -1}, 1, y, y), ContractError);
  EXPECT_THROW(lemma1_check(std::vector<double>{1, 1}, 1, zero, y), ContractError);
  EXPECT_THROW(lemma1_check(std::vector<double>{1, 1, 1}, 1, y, y), ContractError);
  EXPECT_THROW(lemma1_check(y, 0, y, y), ContractError);
}

TEST(Lemma1, SweepReportIsConsistent) {
  const auto s = lemma1_sweep(500, 3);
  EXPECT_EQ(s.instances, 500);
  EXPECT_GE(s.violations, 0);
  EXPECT_LE(s.violations, 500);
  EXPECT_DOUBLE_EQ(s.violation_rate, s.violations / 500.0);
  EXPECT_TRUE(std::isfinite(s.min_gap));
  EXPECT_EQ(s.violations > 0, s.min_gap < -1e-6);
  const auto again = lemma1_sweep(500, 3);
  EXPECT_EQ(again.violations, s.violations);
  EXPECT_EQ(again.min_gap, s.min_gap);
}

TEST(Lemma2, ScalarExample) {
  const std::vector<double> w = {2.0}, dx = {3.0};
  const auto r = lemma2_gradient(w, dx, 1);
  EXPECT_NEAR(r.loss, -std::log(36.0), 1e-12);
  EXPECT_NEAR(r.grad_analytic[0], -1.0, 1e-12);
  EXPECT_NEAR(r.grad_numeric[0], -1.0, 1e-6);
}

TEST(Lemma2, RandomTriplesSatisfyScaleLaws) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(1, 6);
  std::uniform_real_distribution<double> sc(0.2, 5.0);
  for (int t = 0; t < 20; ++t) {
    const int d = dim(rng);
    const auto w = normals(d * d, rng), dx = normals(d * d, rng);
    const auto r = lemma2_gradient(w, dx, d, sc(rng));
    EXPECT_LT(r.scale_dx_invariance_error, 1e-10) << t;
    EXPECT_LT(r.scale_w_ratio_error, 1e-10) << t;
    EXPECT_LT(r.max_rel_error, 1e-5) << t;
  }
}

TEST(Lemma2, DegenerateAndMismatchedInputs) {
  const std::vector<double> w = {1, 0, 0, 1}, dx = {0, 1, 1, 0};
  EXPECT_THROW(lemma2_gradient(w, dx, 2), ContractError);
  EXPECT_THROW(lemma2_gradient(w, std::vector<double>{1, 1}, 2), ContractError);
  EXPECT_THROW(lemma2_gradient(w, w, 3), ContractError);
  EXPECT_THROW(lemma2_gradient(w, w, 2, 0.0), ContractError);
}

TEST(SpectralNorm, MatchesSvdOracle) {
  std::mt19937_64 rng(5);
  for (auto [rows, cols] : {std::pair{1, 1}, {3, 3}, {4, 7}, {8, 2}, {6, 6}}) {
    const auto w = normals(static_cast<std::size_t>(rows) * cols, rng);
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = w[i * cols + j];
    const double oracle = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
    EXPECT_NEAR(spectral_norm(w, rows, cols, 1e-12, 20000), oracle, 1e-6 * oracle) << rows << "x" << cols;
  }
  EXPECT_EQ(spectral_norm(std::vector<double>(6, 0.0), 2, 3), 0.0);
  EXPECT_THROW(spectral_norm(std::vector<double>(5, 1.0), 2, 3), ContractError);
}

TEST(WeightNorm, ZeroLearningRateKeepsNorms) {
  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  const auto r = weight_norm_experiment(3, 50, 0.0, seeds);
  ASSERT_EQ(r.runs.size(), 5u);
  for (const auto& run : r.runs) {
    EXPECT_NEAR(run.norm_log, run.init_norm, 1e-9);
    EXPECT_NEAR(run.norm_linear, run.init_norm, 1e-9);
  }
}

TEST(WeightNorm, LogArmEndsSmallerOnEverySeed) {
  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  const auto r = weight_norm_experiment(4, 500, 0.01, seeds);
  EXPECT_EQ(r.ordered, 5);
  for (const auto& run : r.runs) EXPECT_FALSE(run.log_diverged);
}

TEST(WeightNorm, ScalarCaseFollowsClosedRecurrence) {
  // d = 1: log arm w <- w + 2 lr / w, linear arm w <- w (1 + 2 lr mean(dx^2)).
  const int pairs = 4, steps = 30;
  const double lr = 0.01;
  const std::vector<std::uint64_t> seeds = {10, 11, 12, 13, 14};
  const auto r = weight_norm_experiment(1, steps, lr, seeds, pairs);
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    std::mt19937_64 rng(seeds[s]);
    std::normal_distribution<double> normal(0.0, 1.0);
    double w = normal(rng);
    double msq = 0.0;
    for (int p = 0; p < pairs; ++p) {
      const double a = normal(rng), b = normal(rng);
      msq += (a - b) * (a - b) / pairs;
    }
    double wl = w, wn = w;
    for (int t = 0; t < steps; ++t) {
      wl += 2.0 * lr / wl;
      wn *= 1.0 + 2.0 * lr * msq;
    }
    EXPECT_NEAR(r.runs[s].init_norm, std::abs(w), 1e-12);
    EXPECT_NEAR(r.runs[s].norm_log, std::abs(wl), 1e-9 * std::abs(wl));
    EXPECT_NEAR(r.runs[s].norm_linear, std::abs(wn), 1e-9 * std::abs(wn));
  }
}

TEST(WeightNorm, ParameterContracts) {
  const std::vector<std::uint64_t> four = {0, 1, 2, 3}, five = {0, 1, 2, 3, 4};
  EXPECT_THROW(weight_norm_experiment(2, 10, 0.01, four), ContractError);
  EXPECT_THROW(weight_norm_experiment(0, 10, 0.01, five), ContractError);
  EXPECT_THROW(weight_norm_experiment(2, 10, -1.0, five), ContractError);
}

TEST(Mediation, UnitPathCoefficients) {
  const auto r = mediation_mc(1.0, 1.0, 100000, 0);
  EXPECT_GE(r.slope, 0.97);
  EXPECT_LE(r.slope, 1.03);
  EXPECT_GE(r.residual_variance, 1.95);
  EXPECT_LE(r.residual_variance, 2.05);
}

TEST(Mediation, BrokenPathGivesZeroSlope) {
  const auto no_a = mediation_mc(0.0, 2.0, 100000, 1);
  EXPECT_NEAR(no_a.slope, 0.0, 0.03);
  EXPECT_NEAR(no_a.residual_variance, 5.0, 0.1);
  const auto no_b = mediation_mc(1.5, 0.0, 100000, 2);
  EXPECT_NEAR(no_b.slope, 0.0, 0.03);
  EXPECT_NEAR(no_b.residual_variance, 1.0, 0.03);
  EXPECT_THROW(mediation_mc(1, 1, 9999, 0), ContractError);
}

TEST(Mediation, ErrorShrinksAsRootN) {
  std::vector<double> small, large;
  for (std::uint64_t s = 0; s < 20; ++s) {
    small.push_back(std::abs(mediation_mc(0.7, 1.3, 10000, s).slope - 0.91));
    large.push_back(std::abs(mediation_mc(0.7, 1.3, 160000, 100 + s).slope - 0.91));
  }
  const double ratio = median(small) / median(large);
  EXPECT_GT(ratio, 2.0);
  EXPECT_LT(ratio, 8.0);
}

TEST(Pearson, PerfectNegativeAndDegenerate) {
  std::vector<MetricsRecord> recs;
  for (int i = 0; i < 12; ++i) recs.push_back({i, 0.5 + 0.03 * i, 0.0, -(0.5 + 0.03 * i), 0});
  const auto c = dice_fd_correlation(recs);
  EXPECT_NEAR(c.r, -1.0, 1e-12);
  EXPECT_FALSE(c.degenerate);
  for (auto& r : recs) r.fd_last_decoder = 0.25;
  const auto d = dice_fd_correlation(recs);
  EXPECT_TRUE(d.degenerate);
  EXPECT_EQ(d.r, 0.0);
  recs.resize(9);
  EXPECT_THROW(dice_fd_correlation(recs), ContractError);
}

TEST(Pearson, IndependentSeriesAreWeaklyCorrelated) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(s);
    const auto x = normals(200, rng), y = normals(200, rng);
    EXPECT_LT(std::abs(pearson(x, y).r), 0.3) << s;
  }
}

TEST(Pearson, InvariantUnderAffineMaps) {
  std::mt19937_64 rng(3);
  const auto x = normals(50, rng), y = normals(50, rng);
  std::vector<double> xa(x.size()), ya(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xa[i] = 3.0 * x[i] - 1.0;
    ya[i] = -0.5 * y[i] + 7.0;
  }
  EXPECT_NEAR(pearson(xa, ya).r, -pearson(x, y).r, 1e-12);
  EXPECT_NEAR(pearson(x, y).r, pearson(y, x).r, 1e-15);
}
