#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fdseg/data.hpp"
#include "fdseg/theory.hpp"
#include "fdseg/trainer.hpp"
#include "fdseg/unet.hpp"

namespace fdseg {

/// Fully resolved parameters of one CLI invocation. Written to manifest.json
/// and accepted back through --config.
struct ExperimentConfig {
  std::string command;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

  std::string site = "base";  // train: which site to train on
  SiteConfig base = default_base_site();
  SiteConfig novel = default_novel_site();
  int base_samples = 100;
  int novel_samples = 100;
  std::filesystem::path data_dir;  // optional: load sites from gen-data output

  UNetConfig model;
  TrainConfig train;
  std::vector<LossMode> modes = all_loss_modes();
  std::vector<double> fractions = {0.0, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0};
  std::vector<double> sigmas = {0.0, 0.05, 0.10, 0.15, 0.20};
  bool cap_novel_at_base = false;

  int lemma1_samples = 100;
  double mediation_a = 1.0;
  double mediation_b = 1.0;
  int mediation_n = 100000;
  int weight_norm_d = 4;
  int weight_norm_steps = 500;
  double weight_norm_lr = 0.01;

  std::vector<std::filesystem::path> inputs;  // report: CSV files

  /// Makes model input size follow the sites; throws ConfigError on mismatch.
  void resolve();
};

std::string config_to_json(const ExperimentConfig& config);
/// Keys absent from the JSON keep their defaults. Accepts a manifest.json
/// (reads its "config" object).
ExperimentConfig experiment_config_from_json(const std::string& text, ExperimentConfig defaults = {});

/// {"command", "config", "version"}
std::string manifest_json(const ExperimentConfig& config);

/// Width of the worker pool: FDSEG_WORKERS if set (>= 1), else hardware threads.
int worker_count();
/// Runs task(i) for i in [0, n) on up to `workers` threads; each index runs once.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& task);

/// Deterministic split of a generated site for one seed.
DatasetSplit make_site_split(const SiteConfig& site, int n, std::uint64_t seed, Source source);

struct CellResult {
  std::string condition;
  std::uint64_t seed = 0;
  LossMode mode = LossMode::SegOnly;
  double test_dice = 0.0;
  double test_iou = 0.0;
  std::string status = "ok";
  std::vector<MetricsRecord> records;
};

/// Fresh model for `seed`, trained on `data`, evaluated on data.test. Errors
/// are captured in `status` instead of thrown.
CellResult run_cell(const UNetConfig& model, TrainConfig train, const DatasetSplit& data, std::uint64_t seed,
                    LossMode mode, std::string condition);

/// Base train plus the first fraction of the novel train split; base val/test.
DatasetSplit data_addition_split(const DatasetSplit& base, const DatasetSplit& novel, double fraction,
                                 bool cap_novel_at_base);
/// Same samples with Gaussian noise of `sigma` added to every split.
DatasetSplit noisy_split(const DatasetSplit& data, double sigma, std::uint64_t seed);

std::vector<CellResult> data_addition_sweep(const ExperimentConfig& config);
std::vector<CellResult> noise_sweep(const ExperimentConfig& config);

/// Fixed-precision condition label shared by CSV writers.
std::string condition_label(double value);

/// condition,seed,loss_mode,test_dice_base,test_iou_base,status
std::string sweep_csv(const std::vector<CellResult>& cells);
/// condition,loss_mode,n,mean_dice,std_dice,mean_iou,std_iou (over ok cells)
std::string sweep_summary_csv(const std::vector<CellResult>& cells);

struct CheckReport {
  std::string check;
  std::string params;  // JSON object
  std::string result;  // JSON object
  bool holds = true;
  bool asserted = true;
};

/// Every theory check with the configured parameters.
std::vector<CheckReport> lemma_checks(const ExperimentConfig& config);
std::string check_report_json(const CheckReport& report);

/// Entry point of the `fdseg` executable. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace fdseg
