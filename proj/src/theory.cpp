#include "fdseg/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace fdseg {

namespace {

constexpr double kLogFloor = 1e-12;

double safe_neg_log(double v) { return -std::log(std::max(v, kLogFloor)); }

}  // namespace

Lemma1Report lemma1_check(std::span<const double> features, int channels, std::span<const double> y_true,
                          std::span<const double> y_pred) {
  if (channels < 1) throw ContractError("lemma1_check: channels must be >= 1");
  const std::size_t pixels = y_true.size();
  if (y_pred.size() != pixels || features.size() != pixels * channels) {
    throw ContractError("lemma1_check: features must be (pixels, channels) and masks (pixels)");
  }
  double sum_y = 0.0, sum_p = 0.0, inter = 0.0;
  for (std::size_t i = 0; i < pixels; ++i) {
    sum_y += y_true[i];
    sum_p += y_pred[i];
    inter += y_true[i] * y_pred[i];
  }
  if (!(sum_y > 0.0)) throw ContractError("lemma1_check: ground truth has an empty foreground");
  std::vector<double> signed_sum(channels, 0.0), total(channels, 0.0);
  for (std::size_t i = 0; i < pixels; ++i) {
    for (int c = 0; c < channels; ++c) {
      const double f = features[i * channels + c];
      if (f < 0.0) throw ContractError("lemma1_check: features must be non-negative");
      signed_sum[c] += f * (2.0 * y_true[i] - 1.0);
      total[c] += f;
    }
  }
  double num = 0.0, den = 0.0;
  for (int c = 0; c < channels; ++c) {
    num += signed_sum[c] * signed_sum[c];
    den += total[c] * total[c];
  }
  Lemma1Report r;
  r.dice = 2.0 * inter / (sum_y + sum_p);
  r.k = sum_p / sum_y;
  r.fd_normalized = den > 0.0 ? std::sqrt(num) / std::sqrt(den) : 0.0;
  r.lhs = safe_neg_log(r.dice * (r.k + 1.0));
  r.rhs = safe_neg_log(r.fd_normalized);
  r.gap = r.rhs - r.lhs;
  r.holds = r.gap >= -1e-6;
  return r;
}

Lemma1Sweep lemma1_sweep(int instances, std::uint64_t seed, int pixels, int channels) {
  if (instances < 1 || pixels < 2 || channels < 1) throw ContractError("lemma1_sweep: bad sizes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Lemma1Sweep out;
  out.instances = instances;
  out.min_gap = std::numeric_limits<double>::infinity();
  std::vector<double> y(pixels), yp(pixels), f(static_cast<std::size_t>(pixels) * channels);
  for (int n = 0; n < instances; ++n) {
    const double fg_rate = 0.1 + 0.6 * unit(rng);
    const double flip = 0.4 * unit(rng);
    do {
      for (double& v : y) v = unit(rng) < fg_rate ? 1.0 : 0.0;
    } while (std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0; }));
    for (int i = 0; i < pixels; ++i) yp[i] = unit(rng) < flip ? 1.0 - y[i] : y[i];
    std::vector<double> shift(channels);
    for (double& s : shift) s = normal(rng);
    for (int i = 0; i < pixels; ++i)
      for (int c = 0; c < channels; ++c) f[i * channels + c] = std::max(0.0, normal(rng) + shift[c] * y[i]);
    const auto r = lemma1_check(f, channels, y, yp);
    out.violations += r.holds ? 0 : 1;
    out.min_gap = std::min(out.min_gap, r.gap);
  }
  out.violation_rate = static_cast<double>(out.violations) / instances;
  return out;
}

double lemma2_loss(std::span<const double> w, std::span<const double> dx) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] * dx[i]) * (w[i] * dx[i]);
  return -std::log(s);
}

std::vector<double> lemma2_analytic_gradient(std::span<const double> w, std::span<const double> dx) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] * dx[i]) * (w[i] * dx[i]);
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) g[i] = -2.0 * (w[i] * dx[i]) * dx[i] / s;
  return g;
}

Lemma2Report lemma2_gradient(std::span<const double> w, std::span<const double> dx, int d, double scale) {
  if (d < 1 || w.size() != static_cast<std::size_t>(d) * d || dx.size() != w.size()) {
    throw ContractError("lemma2_gradient: W and dx must both be d x d");
  }
  if (!(scale > 0.0)) throw ContractError("lemma2_gradient: scale must be > 0");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] * dx[i]) * (w[i] * dx[i]);
  if (!(std::sqrt(s) > 1e-9)) throw ContractError("lemma2_gradient: degenerate separation ||W o dx|| <= 1e-9");

  Lemma2Report r;
  r.d = d;
  r.scale = scale;
  r.loss = -std::log(s);
  r.grad_analytic = lemma2_analytic_gradient(w, dx);
  r.grad_numeric.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    // step on the length scale over which ||W o dx||^2 varies along w_i
    double h = 1e-3 * std::max(1.0, std::abs(w[i]));
    if (dx[i] != 0.0) h = std::min(h, 1e-3 * std::sqrt(s) / std::abs(dx[i]));
    // L(w + t e_i) - L(w), evaluated without cancellation
    auto delta = [&](double t) { return -std::log1p((2.0 * w[i] + t) * t * dx[i] * dx[i] / s); };
    r.grad_numeric[i] = (delta(-2 * h) - 8.0 * delta(-h) + 8.0 * delta(h) - delta(2 * h)) / (12.0 * h);
    const double a = r.grad_analytic[i], n = r.grad_numeric[i];
    r.max_rel_error = std::max(r.max_rel_error, std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)));
  }

  double gmax = 0.0;
  for (double g : r.grad_analytic) gmax = std::max(gmax, std::abs(g));
  std::vector<double> scaled(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) scaled[i] = dx[i] * scale;
  const auto g_dx = lemma2_analytic_gradient(w, scaled);
  for (std::size_t i = 0; i < w.size(); ++i) scaled[i] = w[i] * scale;
  const auto g_w = lemma2_analytic_gradient(scaled, dx);
  for (std::size_t i = 0; i < w.size(); ++i) {
    r.scale_dx_invariance_error =
        std::max(r.scale_dx_invariance_error, std::abs(g_dx[i] - r.grad_analytic[i]) / gmax);
    r.scale_w_ratio_error = std::max(r.scale_w_ratio_error, std::abs(g_w[i] * scale - r.grad_analytic[i]) / gmax);
  }
  return r;
}

double spectral_norm(std::span<const double> w, int rows, int cols, double tol, int max_iter) {
  if (rows < 1 || cols < 1 || w.size() != static_cast<std::size_t>(rows) * cols) {
    throw ContractError("spectral_norm: size mismatch");
  }
  std::mt19937_64 rng(0x5EC7);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(cols), wv(rows), next(cols);
  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& e : x) e /= n;
    return n;
  };
  for (double& e : v) e = normal(rng);
  normalize(v);
  double sigma = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    for (int i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (int j = 0; j < cols; ++j) acc += w[i * cols + j] * v[j];
      wv[i] = acc;
    }
    double s = 0.0;
    for (double e : wv) s += e * e;
    const double current = std::sqrt(s);
    std::fill(next.begin(), next.end(), 0.0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) next[j] += w[i * cols + j] * wv[i];
    if (normalize(next) == 0.0) return 0.0;
    v.swap(next);
    const bool done = it > 0 && std::abs(current - sigma) <= tol * current;
    sigma = current;
    if (done) break;
  }
  return sigma;
}

namespace {

struct ArmResult {
  double norm = 0.0;
  bool diverged = false;
};

ArmResult train_arm(std::vector<double> w, int d, const std::vector<std::vector<double>>& dxs, int steps, double lr,
                    bool log_loss) {
  const double m = static_cast<double>(dxs.size());
  std::vector<double> grad(w.size()), wdx(d);
  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (const auto& dx : dxs) {
      double s = 0.0;
      for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += w[i * d + j] * dx[j];
        wdx[i] = acc;
        s += acc * acc;
      }
      const double coef = log_loss ? -2.0 / (m * std::max(s, kLogFloor)) : -2.0 / m;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) grad[i * d + j] += coef * wdx[i] * dx[j];
    }
    double frob = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] -= lr * grad[k];
      frob += w[k] * w[k];
    }
    if (!std::isfinite(frob)) return {std::numeric_limits<double>::infinity(), true};
    if (std::sqrt(frob) > 1e6) {
      const double n = spectral_norm(w, d, d);
      if (n > 1e6) return {n, true};
    }
  }
  return {spectral_norm(w, d, d), false};
}

}  // namespace

WeightNormResult weight_norm_experiment(int d, int steps, double lr, std::span<const std::uint64_t> seeds, int pairs) {
  if (d < 1 || steps < 0 || lr < 0.0 || pairs < 1) throw ContractError("weight_norm_experiment: bad parameters");
  if (seeds.size() < 5) throw ContractError("weight_norm_experiment: needs at least 5 seeds");
  WeightNormResult out;
  for (std::uint64_t seed : seeds) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(static_cast<std::size_t>(d) * d);
    const double init_scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& e : w) e = init_scale * normal(rng);
    std::vector<std::vector<double>> dxs(pairs, std::vector<double>(d));
    for (auto& dx : dxs)
      for (double& e : dx) {
        const double xg = normal(rng), xb = normal(rng);
        e = xg - xb;
      }
    WeightNormRun run;
    run.seed = seed;
    run.init_norm = spectral_norm(w, d, d);
    const auto log_arm = train_arm(w, d, dxs, steps, lr, true);
    const auto lin_arm = train_arm(w, d, dxs, steps, lr, false);
    run.norm_log = log_arm.norm;
    run.log_diverged = log_arm.diverged;
    run.norm_linear = lin_arm.norm;
    run.linear_diverged = lin_arm.diverged;
    if (!run.log_diverged && (run.linear_diverged || run.norm_log < run.norm_linear)) ++out.ordered;
    out.runs.push_back(run);
  }
  return out;
}

MediationResult mediation_mc(double a, double b, int n_samples, std::uint64_t seed) {
  if (n_samples < 10000) throw ContractError("mediation_mc: n_samples must be >= 10000");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> xs(n_samples), ys(n_samples);
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double x = normal(rng);
    const double z = a * x + normal(rng);
    const double y = b * z + normal(rng);
    xs[i] = x;
    ys[i] = y;
    mx += x;
    my += y;
  }
  mx /= n_samples;
  my /= n_samples;
  double sxx = 0.0, sxy = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  MediationResult r;
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  double ssr = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double e = ys[i] - r.intercept - r.slope * xs[i];
    ssr += e * e;
  }
  r.residual_variance = ssr / (n_samples - 2);
  return r;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("pearson: need two equal-length series of >= 2");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), false};
}

Correlation dice_fd_correlation(const std::vector<MetricsRecord>& records) {
  if (records.size() < 10) throw ContractError("dice_fd_correlation: need at least 10 records");
  std::vector<double> dice, fd;
  for (const auto& r : records) {
    dice.push_back(r.dice);
    fd.push_back(r.fd_last_decoder);
  }
  return pearson(dice, fd);
}

}  // namespace fdseg
