#pragma once

// Dense rank-4 (batch, height, width, channels) tensors recorded on a
// reverse-mode autodiff tape. Kernels reuse the same layout as
// (kh, kw, cin, cout).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fdseg/error.hpp"

namespace fdseg {

struct Shape {
  int n = 1;
  int h = 1;
  int w = 1;
  int c = 1;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  std::size_t index(int b, int y, int x, int ch) const noexcept {
    return ((static_cast<std::size_t>(b) * h + y) * w + x) * c + ch;
  }
  bool is_scalar() const noexcept { return n == 1 && h == 1 && w == 1 && c == 1; }
  std::string str() const;

  static Shape scalar() noexcept { return {1, 1, 1, 1}; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

/// Throws DimensionError if any extent is < 1.
void validate_shape(const Shape& shape, const std::string& op);

template <typename T>
class Tape;

/// Lightweight handle to a node on a Tape. Valid only while the tape lives.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }

  const Shape& shape() const;
  std::span<const T> values() const;
  /// Empty until backward() has run on a root that reaches this tensor.
  std::span<const T> grad() const;
  bool requires_grad() const;
  T item() const;
  T at(int b, int y, int x, int ch) const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of operations. Nodes are appended in execution order, so
/// every node's inputs precede it and reverse index order is a valid
/// backward schedule.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    std::string scope;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  explicit Tape(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> variable(const Shape& shape, std::vector<T> values, std::string name = "variable");
  Tensor<T> constant(const Shape& shape, std::vector<T> values, std::string name = "constant");

  /// Appends an op output. `backward` receives the tape and the new node id;
  /// it is dropped when no input requires a gradient.
  Tensor<T> record(std::string op, const Shape& shape, std::vector<T> value,
                   std::vector<std::size_t> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar root. Gradients of every node are reset
  /// first, then accumulated additively across fan-out.
  void backward(const Tensor<T>& root);

  Node& node(std::size_t id) { return nodes_.at(id); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Grad buffer of an input node, allocated on first use.
  std::vector<T>& grad_of(std::size_t id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::mt19937_64& rng() noexcept { return rng_; }

  /// Label attached to subsequently recorded nodes (e.g. the U-Net tap name).
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const noexcept { return scope_; }

  void set_finite_checks(bool enabled) noexcept { finite_checks_ = enabled; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::string scope_;
  bool finite_checks_ = true;
};

// ---------------------------------------------------------------------------
// Operations. All of them are differentiable w.r.t. every Tensor argument
// except where noted (masks and indices are constants).

/// Same-padded 2-D convolution. kernel shape = (kh, kw, cin, cout) with odd
/// kh, kw; bias shape = (1, 1, 1, cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias);

/// Non-overlapping max pool. Ties route the gradient to the first maximum in
/// row-major scan order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int window = 2);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor = 2);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
/// sqrt(max(x, floor)); zero gradient below the floor.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x, double floor = 1e-12);
/// log(max(x, floor)); zero gradient below the floor.
template <typename T>
Tensor<T> log(const Tensor<T>& x, double floor = 1e-12);
/// Gradient passes where lo <= x <= hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double offset);

/// Sum of all elements -> (1,1,1,1).
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// Sum over (h, w, c) for each batch item -> (n,1,1,1).
template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& x);
/// Mean over the batch axis -> (1,h,w,c).
template <typename T>
Tensor<T> mean_batch(const Tensor<T>& x);
/// Selects batch items by index (repeats allowed) -> (idx.size(),h,w,c).
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& x, std::span<const int> indices);

/// Per-sample, per-channel masked mean:
///   out[b,0,0,k] = sum_ij F[b,i,j,k] m[b,i,j] / (sum_ij m[b,i,j] + eps)
/// with m = mask or (1 - mask) when `complement`. The mask (n,h,w,1) is
/// broadcast over channels and must not require a gradient.
template <typename T>
Tensor<T> masked_channel_mean(const Tensor<T>& features, const Tensor<T>& mask, bool complement,
                              double eps = 1e-6);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using GradCheckFn = std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>;

/// Compares reverse-mode gradients of `f` at `x` against central differences.
/// Error per coordinate is |a - n| / max(1e-8, |a| + |n|). Runs in 64-bit.
GradCheckResult grad_check(const GradCheckFn& f, const Shape& shape, std::span<const double> x,
                           double eps = 1e-3, std::uint64_t seed = 0);

}  // namespace fdseg
