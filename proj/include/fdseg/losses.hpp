#pragma once

// Training objectives: Dice + BCE segmentation loss, the layer-wise
// foreground/background feature discrepancy penalty, its exchangeable
// cross-sample variant, comparison stubs, and the per-tap penalty weights.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fdseg/tensor.hpp"
#include "fdseg/unet.hpp"

namespace fdseg {

enum class LossMode { SegOnly, SegFd, SegFdExch, SegConStub, SegDeepsStub };

std::string to_string(LossMode mode);
/// Accepts "seg_only", "seg+fd", "seg+fd+exch", "seg+con_stub", "seg+deeps_stub".
LossMode parse_loss_mode(const std::string& text);
std::vector<LossMode> all_loss_modes();
inline bool uses_fd(LossMode m) { return m == LossMode::SegFd || m == LossMode::SegFdExch; }
inline bool uses_penalty(LossMode m) { return m != LossMode::SegOnly; }

enum class Source { Base, Novel };

/// Binary mask in (n, h, w, 1) layout, values in {0, 1}.
struct Mask {
  Shape shape;
  std::vector<float> values;
};

/// Throws ContractError unless every value is exactly 0 or 1.
void require_binary(std::span<const float> values, const std::string& op);

/// Iterated 2x2 max pool: an output pixel is 1 iff any covered input pixel is 1.
Mask pool_mask(const Mask& mask, int factor);

template <typename T>
Tensor<T> mask_tensor(Tape<T>& tape, const Mask& mask);

/// Soft Dice over the whole batch: 1 - (2 sum(y p) + eps) / (sum y + sum p + eps).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1e-6);

/// Mean pixel BCE with predictions clamped into [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// Channel-wise masked means, one row per batch item.
template <typename T>
struct SummaryTensors {
  Tensor<T> fg;  // (n,1,1,c)
  Tensor<T> bg;  // (n,1,1,c)
  std::vector<double> fg_count;
  std::vector<double> bg_count;
};

/// Plain-value summary averaged over the batch.
struct MaskedFeatureSummary {
  std::vector<double> fg_mean;
  std::vector<double> bg_mean;
  double fg_count = 0.0;
  double bg_count = 0.0;
};

/// `mask` must be at the resolution of `features` (apply pool_mask first).
template <typename T>
SummaryTensors<T> feature_summary(const Tensor<T>& features, const Tensor<T>& mask);

template <typename T>
MaskedFeatureSummary to_summary(const SummaryTensors<T>& s);

/// -log(||fg - bg||^2 + 1e-12) for (1,1,1,c) operands.
template <typename T>
Tensor<T> fd_loss(const Tensor<T>& fg_mean, const Tensor<T>& bg_mean);

/// fd_loss on the batch-averaged summary.
template <typename T>
Tensor<T> fd_loss(const SummaryTensors<T>& summary);

double fd_loss_value(const MaskedFeatureSummary& summary);

/// partner[i] is the batch item whose background pairs with i's foreground.
struct ExchPairing {
  std::vector<int> partner;
  bool fell_back = false;
  std::string warning;
};

/// j(i) = (i + k) mod n.
ExchPairing offset_pairing(int n, int k);
/// Seeded shuffle, then offset k ~ U{1..n-1} along the shuffled order.
ExchPairing shuffled_offset_pairing(int n, std::mt19937_64& rng);
/// Pairs base items with novel items (and vice versa) in shuffled order.
/// Falls back to shuffled_offset_pairing with a warning if a source is absent.
ExchPairing source_pairing(std::span<const Source> tags, std::mt19937_64& rng);

/// mean_i -log(||F_i - B_j||^2 + ||F_j - B_i||^2 + 1e-12), j = partner[i].
template <typename T>
Tensor<T> fd_exch_loss(const SummaryTensors<T>& summary, const ExchPairing& pairing);

enum class AlphaPhase { Warmup, Active };

struct AlphaState {
  std::vector<double> alpha;
  AlphaPhase phase = AlphaPhase::Warmup;
  double tau = 0.0;
  double eta = 1e-3;
  double alpha_max = 1.0;
  long warmup_steps = 0;

  static AlphaState make(std::size_t taps, long warmup_steps, double tau = 0.0, double eta = 1e-3,
                         double alpha_max = 1.0);
};

/// Multiplier ascent: alpha_l <- clamp(alpha_l + eta (drive_l - tau), 0, alpha_max)
/// once step >= warmup_steps; before that every alpha stays exactly 0.
AlphaState alpha_update(AlphaState state, std::span<const double> drive, long step);

struct LossBreakdown {
  double total = 0.0;
  double seg = 0.0;
  double dice = 0.0;
  double bce = 0.0;
  std::vector<double> fd_per_tap;
  std::vector<double> fd_exch_per_tap;
  std::vector<double> stub_per_tap;
  std::vector<std::string> warnings;
};

struct PenaltyOptions {
  LossMode mode = LossMode::SegOnly;
  /// Source tag per batch item; when absent, exch pairing uses offsets.
  std::optional<std::vector<Source>> tags;
  std::uint64_t pairing_seed = 0;
  double con_temperature = 0.1;
};

template <typename T>
struct LossGraph {
  Tensor<T> total;
  LossBreakdown breakdown;
  /// Per-tap penalty values that drive alpha_update.
  std::vector<double> drive;
};

/// total = seg + sum_l alpha_l * penalty_l, where penalty_l is fd_l (+ fd_exch_l)
/// or a stub loss depending on the mode. Terms with alpha_l == 0 are not added,
/// so a warm-up total is bit-identical to the segmentation loss.
/// `aux_heads` holds (kernel, bias) pairs per decoder tap for the deep
/// supervision stub.
template <typename T>
LossGraph<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<FeatureTap<T>>& taps,
                        const std::vector<Tensor<T>>& pooled_masks, const AlphaState& state,
                        const PenaltyOptions& options, const std::vector<Tensor<T>>& aux_heads = {});

// Comparison stubs -----------------------------------------------------------

/// mean_i softplus(cos(fg_i, bg_i) / temperature) within each image.
template <typename T>
Tensor<T> con_stub_loss(const SummaryTensors<T>& summary, double temperature = 0.1);

/// BCE of a 1x1-conv sigmoid head on a decoder tap against the pooled mask.
template <typename T>
Tensor<T> deeps_stub_loss(const Tensor<T>& tap, const Tensor<T>& pooled_mask, const Tensor<T>& head_kernel,
                          const Tensor<T>& head_bias);

/// Zero-initialised 1x1 heads for every decoder tap of `model`.
ParamSet make_aux_heads(const UNet& model);

}  // namespace fdseg
