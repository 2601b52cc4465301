#include "fdseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace fdseg {

void TrainConfig::validate() const {
  if (phase1_epochs < 1) throw ConfigError("TrainConfig: phase1_epochs must be >= 1 (warm start is mandatory)");
  if (phase2_epochs < 0) throw ConfigError("TrainConfig: phase2_epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("TrainConfig: momentum must lie in [0, 1)");
  if (eta_alpha < 0.0) throw ConfigError("TrainConfig: eta_alpha must be >= 0");
  if (alpha_max < 0.0) throw ConfigError("TrainConfig: alpha_max must be >= 0");
}

Batch make_batch(const std::vector<SiteSample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  Batch b;
  b.shape = Shape{static_cast<int>(indices.size()), first.height, first.width, 1};
  b.mask.shape = b.shape;
  const std::size_t pixels = static_cast<std::size_t>(first.height) * first.width;
  b.images.reserve(b.shape.size());
  b.mask.values.reserve(b.shape.size());
  for (std::size_t i : indices) {
    const auto& s = samples.at(i);
    if (s.height != first.height || s.width != first.width || s.image.size() != pixels) {
      throw DimensionError("make_batch", "h", "samples in a batch must share one image size");
    }
    b.images.insert(b.images.end(), s.image.begin(), s.image.end());
    b.mask.values.insert(b.mask.values.end(), s.mask.begin(), s.mask.end());
    b.tags.push_back(s.source);
  }
  return b;
}

namespace {

void check_dataset(const UNet& model, const std::vector<SiteSample>& samples, const std::string& what) {
  for (const auto& s : samples) {
    if (s.height != model.config().input_height || s.width != model.config().input_width) {
      throw ConfigError(what + " sample " + std::to_string(s.id) + " is " + std::to_string(s.height) + "x" +
                        std::to_string(s.width) + " but the model expects " +
                        std::to_string(model.config().input_height) + "x" +
                        std::to_string(model.config().input_width));
    }
  }
}

void accumulate(LossBreakdown& acc, const LossBreakdown& bd) {
  acc.total += bd.total;
  acc.seg += bd.seg;
  acc.dice += bd.dice;
  acc.bce += bd.bce;
  auto add_vec = [](std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < b.size()) a.resize(b.size(), 0.0);
    for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
  };
  add_vec(acc.fd_per_tap, bd.fd_per_tap);
  add_vec(acc.fd_exch_per_tap, bd.fd_exch_per_tap);
  add_vec(acc.stub_per_tap, bd.stub_per_tap);
}

void divide(LossBreakdown& acc, double n) {
  acc.total /= n;
  acc.seg /= n;
  acc.dice /= n;
  acc.bce /= n;
  for (auto* v : {&acc.fd_per_tap, &acc.fd_exch_per_tap, &acc.stub_per_tap})
    for (double& x : *v) x /= n;
}

std::string first_nonfinite_tap(const ForwardResult<float>& fr) {
  for (const auto& tap : fr.taps) {
    for (float v : tap.activation.values()) {
      if (!std::isfinite(v)) return tap.name;
    }
  }
  for (float v : fr.prediction.values()) {
    if (!std::isfinite(v)) return "head";
  }
  return "loss";
}

}  // namespace

TrainResult train(const TrainConfig& cfg, UNet model, const DatasetSplit& data) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: empty training set");
  if (data.val.empty()) throw ConfigError("train: empty validation set");
  check_dataset(model, data.train, "train");
  check_dataset(model, data.val, "validation");
  // Flips and rotations are applied to the training partition only.
  const std::vector<SiteSample> train_set = cfg.augment ? augment_all(data.train) : data.train;

  const LossMode mode = cfg.loss_mode;
  const auto factors = model.tap_factors();
  ParamSet aux = mode == LossMode::SegDeepsStub ? make_aux_heads(model) : ParamSet{};

  std::vector<std::vector<float>> velocity;
  for (const auto& p : model.params()) velocity.emplace_back(p.value.size(), 0.0f);
  std::vector<std::vector<float>> aux_velocity;
  for (const auto& p : aux) aux_velocity.emplace_back(p.value.size(), 0.0f);

  bool has_base = false, has_novel = false;
  for (const auto& s : train_set) (s.source == Source::Base ? has_base : has_novel) = true;
  const bool tag_pairing = has_base && has_novel;

  const std::size_t n_train = train_set.size();
  const long steps_per_epoch = static_cast<long>((n_train + cfg.batch_size - 1) / cfg.batch_size);

  TrainResult result;
  result.tap_names = model.tap_names();
  result.mode = mode;
  result.alpha = AlphaState::make(factors.size(), steps_per_epoch * cfg.phase1_epochs, cfg.tau, cfg.eta_alpha,
                                  cfg.alpha_max);
  result.best_model = model;

  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0x0D0E));
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  const float lr = static_cast<float>(cfg.lr);
  const float mom = static_cast<float>(cfg.momentum);
  auto sgd = [&](Param& p, std::vector<float>& v, std::span<const float> g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = mom * v[i] + g[i];
      p.value[i] -= lr * v[i];
    }
  };

  long step = 0;
  const int epochs = cfg.phase1_epochs + cfg.phase2_epochs;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    LossBreakdown acc;
    int batches = 0;
    int warnings = 0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(cfg.batch_size));
      const Batch batch = make_batch(train_set, std::span<const std::size_t>(order.data() + start, end - start));

      Tape<float> tape(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
      ForwardResult<float> fr;
      LossGraph<float> lg;
      try {
        auto images = tape.constant(batch.shape, batch.images, "images");
        fr = model.forward(tape, images);
        tape.set_scope("loss");
        auto target = mask_tensor(tape, batch.mask);
        std::vector<Tensor<float>> pooled;
        for (int f : factors) pooled.push_back(mask_tensor(tape, pool_mask(batch.mask, f)));
        std::vector<Tensor<float>> aux_handles;
        for (const auto& p : aux) aux_handles.push_back(tape.variable(p.shape, p.value, p.name));
        PenaltyOptions opts;
        opts.mode = mode;
        if (tag_pairing) opts.tags = batch.tags;
        opts.pairing_seed = mix_seed(cfg.seed ^ 0xE8C4ull, static_cast<std::uint64_t>(step));
        lg = total_loss(fr.prediction, target, fr.taps, pooled, result.alpha, opts, aux_handles);
        if (!std::isfinite(lg.breakdown.total)) {
          throw TrainingAborted("non-finite loss at step " + std::to_string(step), model, first_nonfinite_tap(fr));
        }
        tape.backward(lg.total);
        for (std::size_t i = 0; i < aux.size(); ++i) sgd(aux[i], aux_velocity[i], aux_handles[i].grad());
      } catch (const NumericError& e) {
        throw TrainingAborted(std::string("training aborted at step ") + std::to_string(step) + ": " + e.what(),
                              model, e.scope());
      }
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        sgd(model.params()[i], velocity[i], fr.params[i].grad());
      }
      if (uses_penalty(mode)) result.alpha = alpha_update(result.alpha, lg.drive, step);
      ++step;
      accumulate(acc, lg.breakdown);
      warnings += static_cast<int>(lg.breakdown.warnings.size());
      ++batches;
    }
    divide(acc, batches);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.phase = epoch <= cfg.phase1_epochs ? 1 : 2;
    rec.mean = std::move(acc);
    rec.alpha = result.alpha.alpha;
    rec.warnings = warnings;
    rec.val_dice = mean_dice(evaluate(model, data.val, 0.5, step, cfg.batch_size));
    if (rec.val_dice > result.best_val_dice) {
      result.best_val_dice = rec.val_dice;
      result.best_epoch = epoch;
      result.best_step = step;
      result.best_model = model;
    }
    result.history.push_back(std::move(rec));
  }
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

Overlap hard_overlap(std::span<const float> pred, std::span<const float> mask, double threshold) {
  if (pred.size() != mask.size()) throw ContractError("hard_overlap: size mismatch");
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > threshold;
    const bool y = mask[i] > 0.5f;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  if (tp + fp + fn == 0) return {1.0, 1.0};
  return {2.0 * tp / static_cast<double>(2 * tp + fp + fn), tp / static_cast<double>(tp + fp + fn)};
}

std::vector<MetricsRecord> evaluate(const UNet& model, const std::vector<SiteSample>& dataset, double threshold,
                                    long checkpoint_step, int batch_size) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  check_dataset(model, dataset, "evaluation");
  std::vector<MetricsRecord> out;
  out.reserve(dataset.size());
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(dataset, idx);
    Tape<float> tape;
    auto images = tape.constant(batch.shape, batch.images, "images");
    auto fr = model.forward(tape, images, false);
    const auto pred = fr.prediction.values();
    const auto& last = fr.taps.back().activation;
    const Shape fs = last.shape();
    const auto fv = last.values();
    const std::size_t pixels = static_cast<std::size_t>(batch.shape.h) * batch.shape.w;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& s = dataset[idx[b]];
      MetricsRecord r;
      r.sample_id = s.id;
      r.checkpoint_step = checkpoint_step;
      const auto ov = hard_overlap(pred.subspan(b * pixels, pixels), s.mask, threshold);
      r.dice = ov.dice;
      r.iou = ov.iou;
      std::vector<double> fg(fs.c, 0.0), bg(fs.c, 0.0);
      double fg_mass = 0.0, bg_mass = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) {
        const double m = s.mask[p];
        fg_mass += m;
        bg_mass += 1.0 - m;
        const float* f = fv.data() + (b * pixels + p) * fs.c;
        for (int k = 0; k < fs.c; ++k) {
          fg[k] += f[k] * m;
          bg[k] += f[k] * (1.0 - m);
        }
      }
      MaskedFeatureSummary summary;
      summary.fg_mean.resize(fs.c);
      summary.bg_mean.resize(fs.c);
      for (int k = 0; k < fs.c; ++k) {
        summary.fg_mean[k] = fg[k] / (fg_mass + 1e-6);
        summary.bg_mean[k] = bg[k] / (bg_mass + 1e-6);
      }
      r.fd_last_decoder = fd_loss_value(summary);
      out.push_back(r);
    }
  }
  return out;
}

double mean_dice(const std::vector<MetricsRecord>& records) {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.dice;
  return s / static_cast<double>(records.size());
}

WorstOffPartition partition_worst_off(const std::vector<MetricsRecord>& records, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("partition_worst_off: threshold must lie in (0, 1)");
  WorstOffPartition part;
  part.threshold = threshold;
  std::vector<const MetricsRecord*> rest;
  for (const auto& r : records) {
    if (r.dice < threshold) part.worst.push_back(r.sample_id);
    else rest.push_back(&r);
  }
  if (part.worst.empty() || rest.empty()) {
    part.warnings.push_back(part.worst.empty() ? "no record below the threshold"
                                               : "every record is below the threshold");
    part.worst.clear();
    return part;
  }
  std::stable_sort(rest.begin(), rest.end(), [](const auto* a, const auto* b) { return a->dice > b->dice; });
  const std::size_t n_best = std::min(part.worst.size(), rest.size());
  if (n_best < part.worst.size()) {
    part.warnings.push_back("fewer records above the threshold than below; best set is smaller than worst set");
  }
  for (std::size_t i = 0; i < n_best; ++i) part.best.push_back(rest[i]->sample_id);
  return part;
}

// ---------------------------------------------------------------------------
// Significance

namespace {

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm, double fb,
                        double whole, double eps, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * eps) return left + right + delta / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1);
}

}  // namespace

double student_t_cdf(double t, int dof) {
  if (dof < 1) throw ContractError("student_t_cdf: dof must be >= 1");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double nu = dof;
  const double log_norm =
      std::lgamma((nu + 1.0) / 2.0) - std::lgamma(nu / 2.0) - 0.5 * std::log(nu * std::numbers::pi);
  auto pdf = [&](double x) { return std::exp(log_norm - (nu + 1.0) / 2.0 * std::log1p(x * x / nu)); };
  const double a = 0.0, b = std::abs(t);
  if (b == 0.0) return 0.5;
  // Integrate piecewise so the adaptive rule sees the peak near zero.
  double area = 0.0;
  double lo = a;
  for (double hi : {1.0, 4.0, 16.0, 64.0, std::numeric_limits<double>::infinity()}) {
    const double top = std::min(hi, b);
    if (top > lo) {
      const double fa = pdf(lo), fb = pdf(top), fm = pdf(0.5 * (lo + top));
      const double whole = (top - lo) / 6.0 * (fa + 4.0 * fm + fb);
      area += adaptive_simpson(pdf, lo, top, fa, fm, fb, whole, 1e-13, 50);
      lo = top;
    }
    if (top >= b) break;
  }
  return t > 0 ? 0.5 + area : 0.5 - area;
}

TTestResult one_sample_t_test(double baseline, std::span<const double> runs) {
  if (runs.size() < 2) throw ContractError("one_sample_t_test: need at least two runs");
  TTestResult r;
  const double n = static_cast<double>(runs.size());
  r.dof = static_cast<int>(runs.size()) - 1;
  r.mean = std::accumulate(runs.begin(), runs.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : runs) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / (n - 1.0));
  const auto [lo, hi] = std::minmax_element(runs.begin(), runs.end());
  if (*lo == *hi) {
    // The mean of identical values can be off by an ulp, so compare a run.
    r.degenerate_variance = true;
    r.sd = 0.0;
    r.mean = *lo;
    if (*lo == baseline) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = *lo > baseline ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (r.mean - baseline) / (r.sd / std::sqrt(n));
  r.p = std::clamp(2.0 * (1.0 - student_t_cdf(std::abs(r.t), r.dof)), 0.0, 1.0);
  return r;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_history_csv(std::ostream& os, const TrainResult& r) {
  const auto& taps = r.tap_names;
  const bool fd = uses_fd(r.mode);
  const bool exch = r.mode == LossMode::SegFdExch;
  const bool stub = r.mode == LossMode::SegConStub || r.mode == LossMode::SegDeepsStub;
  os << "epoch,phase,total,seg,dice_loss,bce";
  if (fd)
    for (const auto& t : taps) os << ",fd_" << t;
  if (exch)
    for (const auto& t : taps) os << ",fdx_" << t;
  if (stub)
    for (const auto& t : taps) os << ",stub_" << t;
  if (uses_penalty(r.mode))
    for (const auto& t : taps) os << ",alpha_" << t;
  os << ",val_dice\n";
  for (const auto& e : r.history) {
    os << e.epoch << "," << e.phase << "," << format_number(e.mean.total) << "," << format_number(e.mean.seg) << ","
       << format_number(e.mean.dice) << "," << format_number(e.mean.bce);
    auto cols = [&](const std::vector<double>& v) {
      for (std::size_t i = 0; i < taps.size(); ++i) os << "," << format_number(i < v.size() ? v[i] : 0.0);
    };
    if (fd) cols(e.mean.fd_per_tap);
    if (exch) cols(e.mean.fd_exch_per_tap);
    if (stub) cols(e.mean.stub_per_tap);
    if (uses_penalty(r.mode)) cols(e.alpha);
    os << "," << format_number(e.val_dice) << "\n";
  }
}

void write_eval_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << "sample_id,dice,iou,fd_last_decoder\n";
  for (const auto& r : records) {
    os << r.sample_id << "," << format_number(r.dice) << "," << format_number(r.iou) << ","
       << format_number(r.fd_last_decoder) << "\n";
  }
}

}  // namespace fdseg
