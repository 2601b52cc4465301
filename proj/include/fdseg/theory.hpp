#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fdseg/trainer.hpp"

namespace fdseg {

/// Dice/FD bound quantities with the normalised feature discrepancy
/// FD = ||sum_p F_p (2 y_p - 1)|| / ||sum_p F_p||, lhs = -log(Dice (k + 1)),
/// rhs = -log FD, k = sum(y_pred) / sum(y_true).
struct Lemma1Report {
  double dice = 0.0;
  double k = 0.0;
  double fd_normalized = 0.0;
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
  bool holds = false;
};

/// F is (h*w, c) row-major and non-negative; masks are (h*w).
Lemma1Report lemma1_check(std::span<const double> features, int channels, std::span<const double> y_true,
                          std::span<const double> y_pred);

struct Lemma1Sweep {
  int instances = 0;
  int violations = 0;
  double violation_rate = 0.0;
  double min_gap = 0.0;
};

/// Random post-ReLU feature maps with noisy predicted masks.
Lemma1Sweep lemma1_sweep(int instances, std::uint64_t seed, int pixels = 64, int channels = 4);

/// L = -log ||W o dx||^2 with o the Hadamard product; d x d matrices, row-major.
struct Lemma2Report {
  int d = 0;
  double loss = 0.0;
  std::vector<double> grad_analytic;
  std::vector<double> grad_numeric;
  double max_rel_error = 0.0;
  double scale = 1.0;
  double scale_dx_invariance_error = 0.0;
  double scale_w_ratio_error = 0.0;
};

double lemma2_loss(std::span<const double> w, std::span<const double> dx);
std::vector<double> lemma2_analytic_gradient(std::span<const double> w, std::span<const double> dx);
/// Throws ContractError when ||W o dx|| <= 1e-9 or sizes are not d*d.
Lemma2Report lemma2_gradient(std::span<const double> w, std::span<const double> dx, int d, double scale = 2.5);

struct WeightNormRun {
  std::uint64_t seed = 0;
  double init_norm = 0.0;
  double norm_log = 0.0;
  double norm_linear = 0.0;
  bool log_diverged = false;
  bool linear_diverged = false;
};

struct WeightNormResult {
  std::vector<WeightNormRun> runs;
  /// Runs where the log arm ends below the linear arm. A diverged linear arm
  /// (norm above 1e6, training stopped) counts as larger.
  int ordered = 0;
};

/// Largest singular value by power iteration on W^T W (deterministic start).
double spectral_norm(std::span<const double> w, int rows, int cols, double tol = 1e-6, int max_iter = 1000);

/// Linear layer W (d x d) trained by gradient descent on fixed random pairs
/// under -log||W dx||^2 and under -||W dx||^2 from the same initialisation.
WeightNormResult weight_norm_experiment(int d, int steps, double lr, std::span<const std::uint64_t> seeds,
                                        int pairs = 8);

struct MediationResult {
  double slope = 0.0;
  double intercept = 0.0;
  double residual_variance = 0.0;
};

/// X ~ N(0,1), Z = aX + e1, Y = bZ + e2; OLS of Y on X.
MediationResult mediation_mc(double a, double b, int n_samples, std::uint64_t seed);

struct Correlation {
  double r = 0.0;
  bool degenerate = false;
};

Correlation pearson(std::span<const double> x, std::span<const double> y);
/// Pearson r between per-sample dice and fd_last_decoder (>= 10 records).
Correlation dice_fd_correlation(const std::vector<MetricsRecord>& records);

}  // namespace fdseg
