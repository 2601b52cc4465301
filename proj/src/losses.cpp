#include "fdseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fdseg {

namespace {
constexpr double kLogFloor = 1e-12;
}

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::SegOnly: return "seg_only";
    case LossMode::SegFd: return "seg+fd";
    case LossMode::SegFdExch: return "seg+fd+exch";
    case LossMode::SegConStub: return "seg+con_stub";
    case LossMode::SegDeepsStub: return "seg+deeps_stub";
  }
  return "unknown";
}

LossMode parse_loss_mode(const std::string& text) {
  for (LossMode m : all_loss_modes()) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown loss mode '" + text + "'");
}

std::vector<LossMode> all_loss_modes() {
  return {LossMode::SegOnly, LossMode::SegFd, LossMode::SegFdExch, LossMode::SegConStub, LossMode::SegDeepsStub};
}

void require_binary(std::span<const float> values, const std::string& op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] != 0.0f && values[i] != 1.0f) {
      throw ContractError(op + ": target must be binary, found " + std::to_string(values[i]) + " at index " +
                          std::to_string(i));
    }
  }
}

namespace {

template <typename T>
void require_binary_tensor(const Tensor<T>& t, const std::string& op) {
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != T(0) && v[i] != T(1)) {
      throw ContractError(op + ": target must be binary, found " + std::to_string(static_cast<double>(v[i])) +
                          " at index " + std::to_string(i));
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& op) {
  if (!(a.shape() == b.shape())) {
    const Shape& x = a.shape();
    const Shape& y = b.shape();
    const char* axis = x.n != y.n ? "n" : x.h != y.h ? "h" : x.w != y.w ? "w" : "c";
    throw DimensionError(op, axis, x.str() + " vs " + y.str());
  }
}

}  // namespace

Mask pool_mask(const Mask& mask, int factor) {
  if (factor < 1 || (factor & (factor - 1)) != 0) {
    throw ContractError("pool_mask: factor must be a power of two, got " + std::to_string(factor));
  }
  if (mask.shape.c != 1) throw DimensionError("pool_mask", "c", "mask must have one channel");
  if (mask.shape.h % factor != 0) {
    throw DimensionError("pool_mask", "h", std::to_string(mask.shape.h) + " not divisible by " + std::to_string(factor));
  }
  if (mask.shape.w % factor != 0) {
    throw DimensionError("pool_mask", "w", std::to_string(mask.shape.w) + " not divisible by " + std::to_string(factor));
  }
  Mask cur = mask;
  for (int f = factor; f > 1; f /= 2) {
    Mask next;
    next.shape = Shape{cur.shape.n, cur.shape.h / 2, cur.shape.w / 2, 1};
    next.values.assign(next.shape.size(), 0.0f);
    for (int n = 0; n < next.shape.n; ++n)
      for (int y = 0; y < next.shape.h; ++y)
        for (int x = 0; x < next.shape.w; ++x) {
          float m = 0.0f;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) m = std::max(m, cur.values[cur.shape.index(n, 2 * y + dy, 2 * x + dx, 0)]);
          next.values[next.shape.index(n, y, x, 0)] = m;
        }
    cur = std::move(next);
  }
  return cur;
}

template <typename T>
Tensor<T> mask_tensor(Tape<T>& tape, const Mask& mask) {
  return tape.constant(mask.shape, std::vector<T>(mask.values.begin(), mask.values.end()), "mask");
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double eps) {
  require_same_shape(pred, target, "dice_loss");
  require_binary_tensor(target, "dice_loss");
  auto inter = sum(mul(pred, target));
  auto num = add_scalar(scale(inter, 2.0), eps);
  auto den = add_scalar(add(sum(pred), sum(target)), eps);
  return add_scalar(scale(div(num, den), -1.0), 1.0);
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "bce_loss");
  require_binary_tensor(target, "bce_loss");
  auto& tape = pred.tape();
  const auto yv = target.values();
  std::vector<T> inv(yv.size());
  for (std::size_t i = 0; i < yv.size(); ++i) inv[i] = T(1) - yv[i];
  auto not_target = tape.constant(target.shape(), std::move(inv), "1-target");
  auto p = clamp(pred, 1e-7, 1.0 - 1e-7);
  auto pos = mul(target, log(p, kLogFloor));
  auto neg = mul(not_target, log(add_scalar(scale(p, -1.0), 1.0), kLogFloor));
  return scale(mean(add(pos, neg)), -1.0);
}

template <typename T>
SummaryTensors<T> feature_summary(const Tensor<T>& features, const Tensor<T>& mask) {
  if (features.shape().h != mask.shape().h || features.shape().w != mask.shape().w ||
      features.shape().n != mask.shape().n) {
    throw ContractError("feature_summary: mask " + mask.shape().str() + " does not match features " +
                        features.shape().str() + " (pool the mask first)");
  }
  SummaryTensors<T> s;
  s.fg = masked_channel_mean(features, mask, false);
  s.bg = masked_channel_mean(features, mask, true);
  const Shape ms = mask.shape();
  const std::size_t pixels = static_cast<std::size_t>(ms.h) * ms.w;
  const auto mv = mask.values();
  for (int n = 0; n < ms.n; ++n) {
    double fg = 0.0;
    for (std::size_t p = 0; p < pixels; ++p) fg += mv[n * pixels + p];
    s.fg_count.push_back(fg);
    s.bg_count.push_back(static_cast<double>(pixels) - fg);
  }
  return s;
}

template <typename T>
MaskedFeatureSummary to_summary(const SummaryTensors<T>& s) {
  MaskedFeatureSummary out;
  const Shape fs = s.fg.shape();
  out.fg_mean.assign(fs.c, 0.0);
  out.bg_mean.assign(fs.c, 0.0);
  const auto fg = s.fg.values();
  const auto bg = s.bg.values();
  for (int n = 0; n < fs.n; ++n)
    for (int k = 0; k < fs.c; ++k) {
      out.fg_mean[k] += fg[n * fs.c + k];
      out.bg_mean[k] += bg[n * fs.c + k];
    }
  for (int k = 0; k < fs.c; ++k) {
    out.fg_mean[k] /= fs.n;
    out.bg_mean[k] /= fs.n;
  }
  out.fg_count = std::accumulate(s.fg_count.begin(), s.fg_count.end(), 0.0) / fs.n;
  out.bg_count = std::accumulate(s.bg_count.begin(), s.bg_count.end(), 0.0) / fs.n;
  return out;
}

template <typename T>
Tensor<T> fd_loss(const Tensor<T>& fg_mean, const Tensor<T>& bg_mean) {
  auto dist = sum(square(sub(fg_mean, bg_mean)));
  return scale(log(add_scalar(dist, kLogFloor), kLogFloor), -1.0);
}

template <typename T>
Tensor<T> fd_loss(const SummaryTensors<T>& summary) {
  return fd_loss(mean_batch(summary.fg), mean_batch(summary.bg));
}

double fd_loss_value(const MaskedFeatureSummary& s) {
  if (s.fg_mean.size() != s.bg_mean.size()) throw ContractError("fd_loss_value: channel count mismatch");
  double d = 0.0;
  for (std::size_t k = 0; k < s.fg_mean.size(); ++k) d += (s.fg_mean[k] - s.bg_mean[k]) * (s.fg_mean[k] - s.bg_mean[k]);
  return -std::log(std::max(d + kLogFloor, kLogFloor));
}

ExchPairing offset_pairing(int n, int k) {
  if (n < 1) throw ContractError("offset_pairing: batch size must be >= 1");
  ExchPairing p;
  p.partner.resize(n);
  const int kk = ((k % n) + n) % n;
  for (int i = 0; i < n; ++i) p.partner[i] = (i + kk) % n;
  return p;
}

ExchPairing shuffled_offset_pairing(int n, std::mt19937_64& rng) {
  if (n < 1) throw ContractError("shuffled_offset_pairing: batch size must be >= 1");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  int k = 0;
  if (n > 1) k = std::uniform_int_distribution<int>(1, n - 1)(rng);
  ExchPairing p;
  p.partner.resize(n);
  for (int pos = 0; pos < n; ++pos) p.partner[order[pos]] = order[(pos + k) % n];
  return p;
}

ExchPairing source_pairing(std::span<const Source> tags, std::mt19937_64& rng) {
  std::vector<int> base, novel;
  for (std::size_t i = 0; i < tags.size(); ++i) (tags[i] == Source::Base ? base : novel).push_back(static_cast<int>(i));
  if (base.empty() || novel.empty()) {
    ExchPairing p = shuffled_offset_pairing(static_cast<int>(tags.size()), rng);
    p.fell_back = true;
    p.warning = std::string("fd_exch: batch has no ") + (base.empty() ? "base" : "novel") +
                " samples; using offset pairing";
    return p;
  }
  std::shuffle(base.begin(), base.end(), rng);
  std::shuffle(novel.begin(), novel.end(), rng);
  ExchPairing p;
  p.partner.resize(tags.size());
  for (std::size_t i = 0; i < base.size(); ++i) p.partner[base[i]] = novel[i % novel.size()];
  for (std::size_t i = 0; i < novel.size(); ++i) p.partner[novel[i]] = base[i % base.size()];
  return p;
}

template <typename T>
Tensor<T> fd_exch_loss(const SummaryTensors<T>& summary, const ExchPairing& pairing) {
  const int n = summary.fg.shape().n;
  if (static_cast<int>(pairing.partner.size()) != n) {
    throw ContractError("fd_exch_loss: pairing has " + std::to_string(pairing.partner.size()) + " entries for batch " +
                        std::to_string(n));
  }
  auto fg_j = gather_batch(summary.fg, std::span<const int>(pairing.partner));
  auto bg_j = gather_batch(summary.bg, std::span<const int>(pairing.partner));
  auto a = sum_per_sample(square(sub(summary.fg, bg_j)));
  auto b = sum_per_sample(square(sub(fg_j, summary.bg)));
  auto per = log(add_scalar(add(a, b), kLogFloor), kLogFloor);
  return scale(mean(per), -1.0);
}

AlphaState AlphaState::make(std::size_t taps, long warmup_steps, double tau, double eta, double alpha_max) {
  AlphaState s;
  s.alpha.assign(taps, 0.0);
  s.warmup_steps = warmup_steps;
  s.tau = tau;
  s.eta = eta;
  s.alpha_max = alpha_max;
  s.phase = warmup_steps > 0 ? AlphaPhase::Warmup : AlphaPhase::Active;
  return s;
}

AlphaState alpha_update(AlphaState state, std::span<const double> drive, long step) {
  if (drive.size() != state.alpha.size()) {
    throw ContractError("alpha_update: " + std::to_string(drive.size()) + " drive values for " +
                        std::to_string(state.alpha.size()) + " taps");
  }
  if (step < state.warmup_steps) {
    state.phase = AlphaPhase::Warmup;
    std::fill(state.alpha.begin(), state.alpha.end(), 0.0);
    return state;
  }
  state.phase = AlphaPhase::Active;
  for (std::size_t l = 0; l < drive.size(); ++l) {
    state.alpha[l] = std::clamp(state.alpha[l] + state.eta * (drive[l] - state.tau), 0.0, state.alpha_max);
  }
  return state;
}

template <typename T>
Tensor<T> con_stub_loss(const SummaryTensors<T>& s, double temperature) {
  auto dot = sum_per_sample(mul(s.fg, s.bg));
  auto nf = sqrt(add_scalar(sum_per_sample(square(s.fg)), 1e-12));
  auto nb = sqrt(add_scalar(sum_per_sample(square(s.bg)), 1e-12));
  auto cosine = div(dot, mul(nf, nb));
  return mean(softplus(scale(cosine, 1.0 / temperature)));
}

template <typename T>
Tensor<T> deeps_stub_loss(const Tensor<T>& tap, const Tensor<T>& pooled_mask, const Tensor<T>& head_kernel,
                          const Tensor<T>& head_bias) {
  auto p = sigmoid(conv2d(tap, head_kernel, head_bias));
  return bce_loss(p, pooled_mask);
}

ParamSet make_aux_heads(const UNet& model) {
  ParamSet heads;
  const auto names = model.tap_names();
  const int depth = model.config().depth;
  for (int j = 1; j <= depth; ++j) {
    const int c = model.config().base_channels << (depth - j);
    const std::string base = "aux.dec_" + std::to_string(j);
    heads.push_back(Param{base + ".kernel", Shape{1, 1, c, 1}, std::vector<float>(c, 0.0f)});
    heads.push_back(Param{base + ".bias", Shape{1, 1, 1, 1}, std::vector<float>(1, 0.0f)});
  }
  return heads;
}

template <typename T>
LossGraph<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<FeatureTap<T>>& taps,
                        const std::vector<Tensor<T>>& pooled_masks, const AlphaState& state,
                        const PenaltyOptions& options, const std::vector<Tensor<T>>& aux_heads) {
  if (taps.size() != pooled_masks.size()) {
    throw ContractError("total_loss: " + std::to_string(taps.size()) + " taps but " +
                        std::to_string(pooled_masks.size()) + " pooled masks");
  }
  if (uses_penalty(options.mode) && state.alpha.size() != taps.size()) {
    throw ContractError("total_loss: alpha has " + std::to_string(state.alpha.size()) + " entries for " +
                        std::to_string(taps.size()) + " taps");
  }
  LossGraph<T> out;
  auto& bd = out.breakdown;
  auto dice = dice_loss(pred, target);
  auto bce = bce_loss(pred, target);
  auto seg = add(dice, bce);
  bd.dice = static_cast<double>(dice.item());
  bd.bce = static_cast<double>(bce.item());
  bd.seg = static_cast<double>(seg.item());
  Tensor<T> total = seg;

  const LossMode mode = options.mode;
  if (mode != LossMode::SegOnly) {
    std::mt19937_64 pairing_rng(options.pairing_seed);
    std::optional<ExchPairing> pairing;
    if (mode == LossMode::SegFdExch) {
      const int n = pred.shape().n;
      if (options.tags) {
        if (static_cast<int>(options.tags->size()) != n) {
          throw ContractError("total_loss: tag count does not match batch size");
        }
        pairing = source_pairing(*options.tags, pairing_rng);
      } else {
        pairing = shuffled_offset_pairing(n, pairing_rng);
      }
      if (pairing->fell_back) bd.warnings.push_back(pairing->warning);
    }
    const int depth = static_cast<int>(taps.size() - 1) / 2;
    for (std::size_t l = 0; l < taps.size(); ++l) {
      const auto& tap = taps[l];
      Tensor<T> penalty;
      bool has_penalty = true;
      if (uses_fd(mode)) {
        auto summary = feature_summary(tap.activation, pooled_masks[l]);
        auto fd = fd_loss(summary);
        bd.fd_per_tap.push_back(static_cast<double>(fd.item()));
        penalty = fd;
        if (pairing) {
          auto fx = fd_exch_loss(summary, *pairing);
          bd.fd_exch_per_tap.push_back(static_cast<double>(fx.item()));
          penalty = add(fd, fx);
        }
      } else if (mode == LossMode::SegConStub) {
        auto summary = feature_summary(tap.activation, pooled_masks[l]);
        penalty = con_stub_loss(summary, options.con_temperature);
        bd.stub_per_tap.push_back(static_cast<double>(penalty.item()));
      } else {
        const int dec = static_cast<int>(l) - depth;  // 1-based decoder index
        if (dec >= 1) {
          if (aux_heads.size() < static_cast<std::size_t>(2 * dec)) {
            throw ContractError("total_loss: deep supervision needs aux heads for every decoder tap");
          }
          penalty = deeps_stub_loss(tap.activation, pooled_masks[l], aux_heads[2 * (dec - 1)],
                                    aux_heads[2 * (dec - 1) + 1]);
          bd.stub_per_tap.push_back(static_cast<double>(penalty.item()));
        } else {
          has_penalty = false;
          bd.stub_per_tap.push_back(0.0);
        }
      }
      out.drive.push_back(has_penalty ? static_cast<double>(penalty.item()) : 0.0);
      const double a = state.alpha[l];
      if (has_penalty && a != 0.0) total = add(total, scale(penalty, a));
    }
  }
  out.total = total;
  bd.total = static_cast<double>(total.item());
  return out;
}

#define FDSEG_INSTANTIATE(T)                                                                               \
  template Tensor<T> mask_tensor(Tape<T>&, const Mask&);                                                   \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double);                                \
  template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&);                                         \
  template SummaryTensors<T> feature_summary(const Tensor<T>&, const Tensor<T>&);                          \
  template MaskedFeatureSummary to_summary(const SummaryTensors<T>&);                                      \
  template Tensor<T> fd_loss(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> fd_loss(const SummaryTensors<T>&);                                                    \
  template Tensor<T> fd_exch_loss(const SummaryTensors<T>&, const ExchPairing&);                           \
  template Tensor<T> con_stub_loss(const SummaryTensors<T>&, double);                                      \
  template Tensor<T> deeps_stub_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template LossGraph<T> total_loss(const Tensor<T>&, const Tensor<T>&, const std::vector<FeatureTap<T>>&,  \
                                   const std::vector<Tensor<T>>&, const AlphaState&, const PenaltyOptions&, \
                                   const std::vector<Tensor<T>>&);

FDSEG_INSTANTIATE(float)
FDSEG_INSTANTIATE(double)

#undef FDSEG_INSTANTIATE

}  // namespace fdseg
