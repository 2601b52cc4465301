#include "fdseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Core>

namespace fdseg {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << h << "," << w << "," << c << ")";
  return os.str();
}

void validate_shape(const Shape& shape, const std::string& op) {
  const char* names[] = {"n", "h", "w", "c"};
  const int dims[] = {shape.n, shape.h, shape.w, shape.c};
  for (int i = 0; i < 4; ++i) {
    if (dims[i] < 1) {
      throw DimensionError(op, names[i], "extent must be >= 1, got " + std::to_string(dims[i]));
    }
  }
}

namespace {

void check_same_shape(const Shape& a, const Shape& b, const std::string& op) {
  const char* names[] = {"n", "h", "w", "c"};
  const int da[] = {a.n, a.h, a.w, a.c};
  const int db[] = {b.n, b.h, b.w, b.c};
  for (int i = 0; i < 4; ++i) {
    if (da[i] != db[i]) {
      throw DimensionError(op, names[i], a.str() + " vs " + b.str());
    }
  }
}

template <typename T>
void check_same_tape(const Tensor<T>& a, const Tensor<T>& b, const std::string& op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw ContractError(op + ": operands must live on the same tape");
  }
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
const Shape& Tensor<T>::shape() const {
  return tape_->node(id_).shape;
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return tape_->node(id_).value;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return tape_->node(id_).grad;
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& node = tape_->node(id_);
  if (!node.shape.is_scalar()) {
    throw ContractError("item(): tensor of shape " + node.shape.str() + " is not a scalar");
  }
  return node.value[0];
}

template <typename T>
T Tensor<T>::at(int b, int y, int x, int ch) const {
  const auto& node = tape_->node(id_);
  return node.value[node.shape.index(b, y, x, ch)];
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tensor<T> Tape<T>::variable(const Shape& shape, std::vector<T> values, std::string name) {
  validate_shape(shape, name);
  if (values.size() != shape.size()) {
    throw DimensionError(name, "size", std::to_string(values.size()) + " values for shape " + shape.str());
  }
  Node node;
  node.op = std::move(name);
  node.scope = scope_;
  node.shape = shape;
  node.value = std::move(values);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T> Tape<T>::constant(const Shape& shape, std::vector<T> values, std::string name) {
  auto t = variable(shape, std::move(values), std::move(name));
  nodes_.back().requires_grad = false;
  return t;
}

template <typename T>
Tensor<T> Tape<T>::record(std::string op, const Shape& shape, std::vector<T> value,
                          std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.op = std::move(op);
  node.scope = scope_;
  node.shape = shape;
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  for (std::size_t id : node.inputs) {
    node.requires_grad = node.requires_grad || nodes_.at(id).requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  if (finite_checks_ && !all_finite(node.value)) {
    throw NumericError(node.op, node.scope, nodes_.size());
  }
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, nodes_.size() - 1);
}

template <typename T>
std::vector<T>& Tape<T>::grad_of(std::size_t id) {
  auto& node = nodes_.at(id);
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.valid() || &root.tape() != this) {
    throw ContractError("backward: root does not belong to this tape");
  }
  const auto& root_node = nodes_.at(root.id());
  if (!root_node.shape.is_scalar()) {
    throw ContractError("backward: root must be a scalar (1,1,1,1), got " + root_node.shape.str());
  }
  for (auto& node : nodes_) {
    if (node.requires_grad) {
      node.grad.assign(node.value.size(), T(0));
    } else {
      node.grad.clear();
    }
  }
  if (!root_node.requires_grad) return;
  nodes_[root.id()].grad[0] = T(1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || !node.backward) continue;
    node.backward(*this, i);
  }
  if (finite_checks_) {
    for (std::size_t i = 0; i <= root.id(); ++i) {
      if (!all_finite(nodes_[i].grad)) {
        throw NumericError(nodes_[i].op + " (gradient)", nodes_[i].scope, i);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

// Rows are output pixels, columns (ky, kx, cin); zero outside the image.
template <typename T>
std::vector<T> im2col(const T* x, const Shape& is, int kh, int kw) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t kdim = static_cast<std::size_t>(kh) * kw * is.c;
  std::vector<T> cols(static_cast<std::size_t>(is.n) * is.h * is.w * kdim, T(0));
  T* dst = cols.data();
  for (int n = 0; n < is.n; ++n)
    for (int y = 0; y < is.h; ++y)
      for (int xo = 0; xo < is.w; ++xo, dst += kdim)
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = y + ky - ph;
          if (iy < 0 || iy >= is.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = xo + kx - pw;
            if (ix < 0 || ix >= is.w) continue;
            const T* src = x + is.index(n, iy, ix, 0);
            std::copy(src, src + is.c, dst + static_cast<std::size_t>(ky * kw + kx) * is.c);
          }
        }
  return cols;
}

template <typename T>
void col2im_add(const T* cols, const Shape& is, int kh, int kw, T* gx) {
  const int ph = kh / 2, pw = kw / 2;
  const std::size_t kdim = static_cast<std::size_t>(kh) * kw * is.c;
  const T* src = cols;
  for (int n = 0; n < is.n; ++n)
    for (int y = 0; y < is.h; ++y)
      for (int xo = 0; xo < is.w; ++xo, src += kdim)
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = y + ky - ph;
          if (iy < 0 || iy >= is.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = xo + kx - pw;
            if (ix < 0 || ix >= is.w) continue;
            T* dst = gx + is.index(n, iy, ix, 0);
            const T* g = src + static_cast<std::size_t>(ky * kw + kx) * is.c;
            for (int ci = 0; ci < is.c; ++ci) dst[ci] += g[ci];
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  check_same_tape(input, kernel, "conv2d");
  check_same_tape(input, bias, "conv2d");
  const Shape is = input.shape();
  const Shape ks = kernel.shape();
  const Shape bs = bias.shape();
  const int kh = ks.n, kw = ks.h, cin = ks.w, cout = ks.c;
  if (kh % 2 == 0) throw DimensionError("conv2d", "kh", "kernel height must be odd, got " + std::to_string(kh));
  if (kw % 2 == 0) throw DimensionError("conv2d", "kw", "kernel width must be odd, got " + std::to_string(kw));
  if (is.c != cin) {
    throw DimensionError("conv2d", "c", "input has " + std::to_string(is.c) + " channels, kernel expects " +
                                            std::to_string(cin));
  }
  if (bs.size() != static_cast<std::size_t>(cout) || bs.c != cout) {
    throw DimensionError("conv2d", "cout", "bias shape " + bs.str() + " vs cout " + std::to_string(cout));
  }
  const int ph = kh / 2, pw = kw / 2;
  const Shape os{is.n, is.h, is.w, cout};
  const Eigen::Index m = static_cast<Eigen::Index>(is.n) * is.h * is.w;
  const Eigen::Index kdim = static_cast<Eigen::Index>(kh) * kw * cin;
  std::vector<T> out(os.size());
  {
    const std::vector<T> cols = im2col(input.values().data(), is, kh, kw);
    RowMat<T> o = ConstRowMap<T>(cols.data(), m, kdim) * ConstRowMap<T>(kernel.values().data(), kdim, cout);
    o.rowwise() += ConstRowMap<T>(bias.values().data(), 1, cout).row(0);
    std::copy(o.data(), o.data() + o.size(), out.begin());
  }
  const std::size_t in_id = input.id(), k_id = kernel.id(), b_id = bias.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const ConstRowMap<T> g(tape.node(self).grad.data(), m, cout);
    if (tape.node(b_id).requires_grad) {
      RowMap<T>(tape.grad_of(b_id).data(), 1, cout) += g.colwise().sum();
    }
    if (tape.node(k_id).requires_grad) {
      const std::vector<T> cols = im2col(tape.node(in_id).value.data(), is, kh, kw);
      RowMap<T>(tape.grad_of(k_id).data(), kdim, cout).noalias() += ConstRowMap<T>(cols.data(), m, kdim).transpose() * g;
    }
    if (tape.node(in_id).requires_grad) {
      const RowMat<T> gcols = g * ConstRowMap<T>(tape.node(k_id).value.data(), kdim, cout).transpose();
      col2im_add(gcols.data(), is, kh, kw, tape.grad_of(in_id).data());
    }
  };
  return input.tape().record("conv2d", os, std::move(out), {in_id, k_id, b_id}, backward);
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int window) {
  const Shape is = input.shape();
  if (window < 1) throw ContractError("maxpool2d: window must be >= 1");
  if (is.h % window != 0) {
    throw DimensionError("maxpool2d", "h", std::to_string(is.h) + " not divisible by " + std::to_string(window));
  }
  if (is.w % window != 0) {
    throw DimensionError("maxpool2d", "w", std::to_string(is.w) + " not divisible by " + std::to_string(window));
  }
  const Shape os{is.n, is.h / window, is.w / window, is.c};
  std::vector<T> out(os.size());
  std::vector<std::size_t> argmax(os.size());
  const auto xv = input.values();
  for (int n = 0; n < os.n; ++n) {
    for (int y = 0; y < os.h; ++y) {
      for (int x = 0; x < os.w; ++x) {
        for (int c = 0; c < os.c; ++c) {
          std::size_t best = is.index(n, y * window, x * window, c);
          for (int dy = 0; dy < window; ++dy) {
            for (int dx = 0; dx < window; ++dx) {
              const std::size_t idx = is.index(n, y * window + dy, x * window + dx, c);
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          const std::size_t o = os.index(n, y, x, c);
          out[o] = xv[best];
          argmax[o] = best;
        }
      }
    }
  }
  const std::size_t in_id = input.id();
  auto backward = [in_id, argmax = std::move(argmax)](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gx = tape.grad_of(in_id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  };
  return input.tape().record("maxpool2d", os, std::move(out), {in_id}, backward);
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, int factor) {
  if (factor < 1) throw ContractError("upsample_nearest: factor must be >= 1");
  const Shape is = input.shape();
  const Shape os{is.n, is.h * factor, is.w * factor, is.c};
  std::vector<T> out(os.size());
  const auto xv = input.values();
  for (int n = 0; n < os.n; ++n)
    for (int y = 0; y < os.h; ++y)
      for (int x = 0; x < os.w; ++x)
        for (int c = 0; c < os.c; ++c) out[os.index(n, y, x, c)] = xv[is.index(n, y / factor, x / factor, c)];
  const std::size_t in_id = input.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gx = tape.grad_of(in_id);
    for (int n = 0; n < os.n; ++n)
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x)
          for (int c = 0; c < os.c; ++c) gx[is.index(n, y / factor, x / factor, c)] += g[os.index(n, y, x, c)];
  };
  return input.tape().record("upsample_nearest", os, std::move(out), {in_id}, backward);
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_tape(a, b, "concat_channels");
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n) throw DimensionError("concat_channels", "n", as.str() + " vs " + bs.str());
  if (as.h != bs.h) throw DimensionError("concat_channels", "h", as.str() + " vs " + bs.str());
  if (as.w != bs.w) throw DimensionError("concat_channels", "w", as.str() + " vs " + bs.str());
  const Shape os{as.n, as.h, as.w, as.c + bs.c};
  std::vector<T> out(os.size());
  const auto av = a.values(), bv = b.values();
  const std::size_t pixels = static_cast<std::size_t>(as.n) * as.h * as.w;
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(av.data() + p * as.c, as.c, out.data() + p * os.c);
    std::copy_n(bv.data() + p * bs.c, bs.c, out.data() + p * os.c + as.c);
  }
  const std::size_t a_id = a.id(), b_id = b.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    if (tape.node(a_id).requires_grad) {
      auto& ga = tape.grad_of(a_id);
      for (std::size_t p = 0; p < pixels; ++p)
        for (int c = 0; c < as.c; ++c) ga[p * as.c + c] += g[p * os.c + c];
    }
    if (tape.node(b_id).requires_grad) {
      auto& gb = tape.grad_of(b_id);
      for (std::size_t p = 0; p < pixels; ++p)
        for (int c = 0; c < bs.c; ++c) gb[p * bs.c + c] += g[p * os.c + as.c + c];
    }
  };
  return a.tape().record("concat_channels", os, std::move(out), {a_id, b_id}, backward);
}

// ---------------------------------------------------------------------------
// Elementwise unary

namespace {

/// Records y = f(x) with dy/dx computed from (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const std::string& op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t in_id = x.id();
  auto backward = [in_id, deriv](Tape<T>& tape, std::size_t self) {
    const auto& node = tape.node(self);
    const auto& xs = tape.node(in_id).value;
    auto& gx = tape.grad_of(in_id);
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += node.grad[i] * deriv(xs[i], node.value[i]);
  };
  return x.tape().record(op, x.shape(), std::move(out), {in_id}, backward);
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>("sigmoid", x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      "softplus", x, [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return stable_sigmoid(v); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x, double floor) {
  const T f = static_cast<T>(floor);
  return unary<T>(
      "sqrt", x, [f](T v) { return std::sqrt(std::max(v, f)); },
      [f](T v, T y) { return v > f ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x, double floor) {
  const T f = static_cast<T>(floor);
  return unary<T>(
      "log", x, [f](T v) { return std::log(std::max(v, f)); }, [f](T v, T) { return v > f ? T(1) / v : T(0); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi) {
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  return unary<T>(
      "clamp", x, [l, h](T v) { return std::clamp(v, l, h); },
      [l, h](T v, T) { return (v >= l && v <= h) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T a = static_cast<T>(factor);
  return unary<T>("scale", x, [a](T v) { return a * v; }, [a](T, T) { return a; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double offset) {
  const T a = static_cast<T>(offset);
  return unary<T>("add_scalar", x, [a](T v) { return v + a; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_tape(a, b, "add");
  check_same_shape(a.shape(), b.shape(), "add");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t a_id = a.id(), b_id = b.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    if (tape.node(a_id).requires_grad) {
      auto& ga = tape.grad_of(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.node(b_id).requires_grad) {
      auto& gb = tape.grad_of(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  };
  return a.tape().record("add", a.shape(), std::move(out), {a_id, b_id}, backward);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a.shape(), b.shape(), "sub");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t a_id = a.id(), b_id = b.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    if (tape.node(a_id).requires_grad) {
      auto& ga = tape.grad_of(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.node(b_id).requires_grad) {
      auto& gb = tape.grad_of(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  };
  return a.tape().record("sub", a.shape(), std::move(out), {a_id, b_id}, backward);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_tape(a, b, "mul");
  check_same_shape(a.shape(), b.shape(), "mul");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t a_id = a.id(), b_id = b.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    const auto& x = tape.node(a_id).value;
    const auto& y = tape.node(b_id).value;
    if (tape.node(a_id).requires_grad) {
      auto& ga = tape.grad_of(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (tape.node(b_id).requires_grad) {
      auto& gb = tape.grad_of(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  };
  return a.tape().record("mul", a.shape(), std::move(out), {a_id, b_id}, backward);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_tape(a, b, "div");
  check_same_shape(a.shape(), b.shape(), "div");
  const auto av = a.values(), bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  const std::size_t a_id = a.id(), b_id = b.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& node = tape.node(self);
    const auto& y = tape.node(b_id).value;
    if (tape.node(a_id).requires_grad) {
      auto& ga = tape.grad_of(a_id);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += node.grad[i] / y[i];
    }
    if (tape.node(b_id).requires_grad) {
      auto& gb = tape.grad_of(b_id);
      for (std::size_t i = 0; i < y.size(); ++i) gb[i] -= node.grad[i] * node.value[i] / y[i];
    }
  };
  return a.tape().record("div", a.shape(), std::move(out), {a_id, b_id}, backward);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  const std::size_t in_id = x.id();
  auto backward = [in_id](Tape<T>& tape, std::size_t self) {
    const T g = tape.node(self).grad[0];
    for (T& v : tape.grad_of(in_id)) v += g;
  };
  return x.tape().record("sum", Shape::scalar(), {acc}, {in_id}, backward);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.shape().size()));
}

template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& x) {
  const Shape is = x.shape();
  const std::size_t per = static_cast<std::size_t>(is.h) * is.w * is.c;
  std::vector<T> out(is.n, T(0));
  const auto xv = x.values();
  for (int n = 0; n < is.n; ++n)
    for (std::size_t i = 0; i < per; ++i) out[n] += xv[n * per + i];
  const std::size_t in_id = x.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gx = tape.grad_of(in_id);
    for (int n = 0; n < is.n; ++n)
      for (std::size_t i = 0; i < per; ++i) gx[n * per + i] += g[n];
  };
  return x.tape().record("sum_per_sample", Shape{is.n, 1, 1, 1}, std::move(out), {in_id}, backward);
}

template <typename T>
Tensor<T> mean_batch(const Tensor<T>& x) {
  const Shape is = x.shape();
  const std::size_t per = static_cast<std::size_t>(is.h) * is.w * is.c;
  std::vector<T> out(per, T(0));
  const auto xv = x.values();
  for (int n = 0; n < is.n; ++n)
    for (std::size_t i = 0; i < per; ++i) out[i] += xv[n * per + i];
  const T inv = T(1) / static_cast<T>(is.n);
  for (T& v : out) v *= inv;
  const std::size_t in_id = x.id();
  auto backward = [=](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gx = tape.grad_of(in_id);
    for (int n = 0; n < is.n; ++n)
      for (std::size_t i = 0; i < per; ++i) gx[n * per + i] += g[i] * inv;
  };
  return x.tape().record("mean_batch", Shape{1, is.h, is.w, is.c}, std::move(out), {in_id}, backward);
}

template <typename T>
Tensor<T> gather_batch(const Tensor<T>& x, std::span<const int> indices) {
  const Shape is = x.shape();
  if (indices.empty()) throw ContractError("gather_batch: empty index list");
  for (int idx : indices) {
    if (idx < 0 || idx >= is.n) {
      throw DimensionError("gather_batch", "n", "index " + std::to_string(idx) + " out of range for " + is.str());
    }
  }
  const std::size_t per = static_cast<std::size_t>(is.h) * is.w * is.c;
  const Shape os{static_cast<int>(indices.size()), is.h, is.w, is.c};
  std::vector<T> out(os.size());
  const auto xv = x.values();
  for (std::size_t j = 0; j < indices.size(); ++j)
    std::copy_n(xv.data() + indices[j] * per, per, out.data() + j * per);
  std::vector<int> idx(indices.begin(), indices.end());
  const std::size_t in_id = x.id();
  auto backward = [in_id, per, idx = std::move(idx)](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gx = tape.grad_of(in_id);
    for (std::size_t j = 0; j < idx.size(); ++j)
      for (std::size_t i = 0; i < per; ++i) gx[idx[j] * per + i] += g[j * per + i];
  };
  return x.tape().record("gather_batch", os, std::move(out), {in_id}, backward);
}

template <typename T>
Tensor<T> masked_channel_mean(const Tensor<T>& features, const Tensor<T>& mask, bool complement, double eps) {
  check_same_tape(features, mask, "masked_channel_mean");
  const Shape fs = features.shape(), ms = mask.shape();
  if (mask.requires_grad()) throw ContractError("masked_channel_mean: mask must be a constant");
  if (ms.n != fs.n) throw DimensionError("masked_channel_mean", "n", fs.str() + " vs mask " + ms.str());
  if (ms.h != fs.h) throw DimensionError("masked_channel_mean", "h", fs.str() + " vs mask " + ms.str());
  if (ms.w != fs.w) throw DimensionError("masked_channel_mean", "w", fs.str() + " vs mask " + ms.str());
  if (ms.c != 1) throw DimensionError("masked_channel_mean", "c", "mask must have one channel, got " + ms.str());
  const std::size_t pixels = static_cast<std::size_t>(fs.h) * fs.w;
  const auto fv = features.values();
  const auto mv = mask.values();
  std::vector<T> weight(mv.size());
  for (std::size_t i = 0; i < mv.size(); ++i) weight[i] = complement ? T(1) - mv[i] : mv[i];
  std::vector<T> inv_mass(fs.n);
  for (int n = 0; n < fs.n; ++n) {
    T m = 0;
    for (std::size_t p = 0; p < pixels; ++p) m += weight[n * pixels + p];
    inv_mass[n] = T(1) / (m + static_cast<T>(eps));
  }
  const Shape os{fs.n, 1, 1, fs.c};
  std::vector<T> out(os.size(), T(0));
  for (int n = 0; n < fs.n; ++n) {
    T* o = out.data() + static_cast<std::size_t>(n) * fs.c;
    for (std::size_t p = 0; p < pixels; ++p) {
      const T wgt = weight[n * pixels + p];
      if (wgt == T(0)) continue;
      const T* f = fv.data() + (n * pixels + p) * fs.c;
      for (int k = 0; k < fs.c; ++k) o[k] += f[k] * wgt;
    }
    for (int k = 0; k < fs.c; ++k) o[k] *= inv_mass[n];
  }
  const std::size_t in_id = features.id();
  auto backward = [=, weight = std::move(weight), inv_mass = std::move(inv_mass)](Tape<T>& tape,
                                                                                  std::size_t self) {
    const auto& g = tape.node(self).grad;
    auto& gf = tape.grad_of(in_id);
    for (int n = 0; n < fs.n; ++n) {
      const T* gn = g.data() + static_cast<std::size_t>(n) * fs.c;
      for (std::size_t p = 0; p < pixels; ++p) {
        const T s = weight[n * pixels + p] * inv_mass[n];
        if (s == T(0)) continue;
        T* gfp = gf.data() + (n * pixels + p) * fs.c;
        for (int k = 0; k < fs.c; ++k) gfp[k] += gn[k] * s;
      }
    }
  };
  return features.tape().record("masked_channel_mean", os, std::move(out), {in_id, mask.id()}, backward);
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const GradCheckFn& f, const Shape& shape, std::span<const double> x, double eps,
                           std::uint64_t seed) {
  if (x.size() != shape.size()) {
    throw DimensionError("grad_check", "size", std::to_string(x.size()) + " values for shape " + shape.str());
  }
  std::vector<double> analytic;
  {
    Tape<double> tape(seed);
    auto xv = tape.variable(shape, std::vector<double>(x.begin(), x.end()), "grad_check.x");
    auto root = f(tape, xv);
    tape.backward(root);
    analytic.assign(xv.grad().begin(), xv.grad().end());
  }
  auto evaluate = [&](const std::vector<double>& point) {
    Tape<double> tape(seed);
    auto xv = tape.variable(shape, point, "grad_check.x");
    return f(tape, xv).item();
  };
  GradCheckResult result;
  std::vector<double> point(x.begin(), x.end());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    point[i] = orig + eps;
    const double plus = evaluate(point);
    point[i] = orig - eps;
    const double minus = evaluate(point);
    point[i] = orig;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (i == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define FDSEG_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                    \
  template class Tape<T>;                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> maxpool2d(const Tensor<T>&, int);                                         \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);                                  \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> softplus(const Tensor<T>&);                                               \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> sqrt(const Tensor<T>&, double);                                           \
  template Tensor<T> log(const Tensor<T>&, double);                                            \
  template Tensor<T> clamp(const Tensor<T>&, double, double);                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, double);                                          \
  template Tensor<T> add_scalar(const Tensor<T>&, double);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> sum_per_sample(const Tensor<T>&);                                         \
  template Tensor<T> mean_batch(const Tensor<T>&);                                             \
  template Tensor<T> gather_batch(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> masked_channel_mean(const Tensor<T>&, const Tensor<T>&, bool, double);

FDSEG_INSTANTIATE(float)
FDSEG_INSTANTIATE(double)

#undef FDSEG_INSTANTIATE

}  // namespace fdseg
