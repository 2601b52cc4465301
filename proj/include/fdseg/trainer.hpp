#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fdseg/data.hpp"
#include "fdseg/losses.hpp"
#include "fdseg/unet.hpp"

namespace fdseg {

/// Two-phase schedule: phase 1 keeps every alpha at zero (segmentation loss
/// only), phase 2 lets the per-tap penalty weights rise.
struct TrainConfig {
  int phase1_epochs = 40;
  int phase2_epochs = 30;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  LossMode loss_mode = LossMode::SegOnly;
  double tau = 0.0;
  double eta_alpha = 1e-3;
  double alpha_max = 1.0;
  bool augment = true;  // expand train with the five flip/rotation variants

  bool exch_enabled() const noexcept { return loss_mode == LossMode::SegFdExch; }
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based, across both phases
  int phase = 1;
  LossBreakdown mean;  // per-batch breakdowns averaged over the epoch
  std::vector<double> alpha;
  double val_dice = 0.0;
  int warnings = 0;
};

struct TrainResult {
  UNet best_model;
  std::vector<EpochRecord> history;
  std::vector<std::string> tap_names;
  LossMode mode = LossMode::SegOnly;
  int best_epoch = 0;
  long best_step = 0;
  double best_val_dice = -1.0;
  AlphaState alpha;
  long steps = 0;
};

/// Raised when a non-finite loss or activation appears. Carries the last
/// parameters that produced finite values and the tap where it happened.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, UNet last_good, std::string tap)
      : Error(what), last_good_(std::move(last_good)), tap_(std::move(tap)) {}
  const UNet& last_good() const noexcept { return last_good_; }
  const std::string& tap() const noexcept { return tap_; }

 private:
  UNet last_good_;
  std::string tap_;
};

/// Batched samples as tensors-ready buffers (n, h, w, 1).
struct Batch {
  Shape shape;
  std::vector<float> images;
  Mask mask;
  std::vector<Source> tags;
};

Batch make_batch(const std::vector<SiteSample>& samples, std::span<const std::size_t> indices);

/// SGD with momentum over `data.train`; the returned model is the epoch with
/// the highest mean validation Dice (first one on ties).
TrainResult train(const TrainConfig& config, UNet model, const DatasetSplit& data);

struct MetricsRecord {
  int sample_id = 0;
  double dice = 0.0;
  double iou = 0.0;
  double fd_last_decoder = 0.0;
  long checkpoint_step = 0;
};

/// Hard Dice / IoU after thresholding (pred > threshold is foreground; ties are
/// background) and per-sample fd of the last decoder tap.
std::vector<MetricsRecord> evaluate(const UNet& model, const std::vector<SiteSample>& dataset,
                                    double threshold = 0.5, long checkpoint_step = 0, int batch_size = 8);

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
};
Overlap hard_overlap(std::span<const float> pred, std::span<const float> mask, double threshold = 0.5);

double mean_dice(const std::vector<MetricsRecord>& records);

struct WorstOffPartition {
  double threshold = 0.0;
  std::vector<int> worst;
  std::vector<int> best;
  std::vector<std::string> warnings;
};

/// worst = records with dice < threshold; best = the same number of
/// highest-dice records outside the worst set.
WorstOffPartition partition_worst_off(const std::vector<MetricsRecord>& records, double threshold);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double mean = 0.0;
  double sd = 0.0;
  int dof = 0;
  bool degenerate_variance = false;
};

/// Two-sided one-sample Student t test of `runs` against `baseline`.
TTestResult one_sample_t_test(double baseline, std::span<const double> runs);

/// Student t CDF by adaptive Simpson quadrature of the density.
double student_t_cdf(double t, int dof);

/// epoch,phase,total,seg,dice_loss,bce,<penalty columns>,alpha_<tap>...,val_dice
void write_history_csv(std::ostream& os, const TrainResult& result);
/// sample_id,dice,iou,fd_last_decoder
void write_eval_csv(std::ostream& os, const std::vector<MetricsRecord>& records);

/// Fixed-precision formatting shared by every CSV writer.
std::string format_number(double v);

}  // namespace fdseg
