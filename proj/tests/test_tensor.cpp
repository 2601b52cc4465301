#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fdseg/losses.hpp"
#include "fdseg/tensor.hpp"
#include "fdseg/unet.hpp"
#include "grad_cases.hpp"

using namespace fdseg;

namespace {

std::vector<double> iota_values(std::size_t n, double start = 0.0) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

// Direct same-padded convolution, written independently of the library loop.
std::vector<double> conv_oracle(const std::vector<double>& x, const Shape& is, const std::vector<double>& k, int kh,
                                int kw, int cout, const std::vector<double>& b) {
  std::vector<double> out(static_cast<std::size_t>(is.n) * is.h * is.w * cout);
  for (int n = 0; n < is.n; ++n)
    for (int y = 0; y < is.h; ++y)
      for (int xx = 0; xx < is.w; ++xx)
        for (int co = 0; co < cout; ++co) {
          double acc = b[co];
          for (int dy = -(kh / 2); dy <= kh / 2; ++dy)
            for (int dx = -(kw / 2); dx <= kw / 2; ++dx)
              for (int ci = 0; ci < is.c; ++ci) {
                const int iy = y + dy, ix = xx + dx;
                if (iy < 0 || ix < 0 || iy >= is.h || ix >= is.w) continue;
                const double kv = k[((static_cast<std::size_t>(dy + kh / 2) * kw + (dx + kw / 2)) * is.c + ci) * cout + co];
                acc += kv * x[((static_cast<std::size_t>(n) * is.h + iy) * is.w + ix) * is.c + ci];
              }
          out[((static_cast<std::size_t>(n) * is.h + y) * is.w + xx) * cout + co] = acc;
        }
  return out;
}

}  // namespace

TEST(Shape, IndexIsRowMajorNHWC) {
  const Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.size(), 120u);
  EXPECT_EQ(s.index(1, 2, 3, 4), 119u);
  EXPECT_EQ(s.index(0, 0, 1, 0), 5u);
  EXPECT_TRUE(Shape::scalar().is_scalar());
}

TEST(Tape, RejectsBadShapesAndSizes) {
  Tape<double> t;
  EXPECT_THROW(t.variable(Shape{0, 1, 1, 1}, {}), DimensionError);
  EXPECT_THROW(t.variable(Shape{1, 2, 2, 1}, {1.0, 2.0}), DimensionError);
}

TEST(Tape, DimensionErrorNamesAxis) {
  Tape<double> t;
  auto a = t.variable(Shape{1, 2, 2, 1}, iota_values(4));
  auto b = t.variable(Shape{1, 2, 3, 1}, iota_values(6));
  try {
    add(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "w");
  }
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape<double> t;
  auto a = t.variable(Shape{1, 2, 2, 1}, iota_values(4));
  EXPECT_THROW(t.backward(square(a)), ContractError);
}

TEST(Tape, FanOutAccumulates) {
  Tape<double> t;
  auto a = t.variable(Shape{1, 1, 1, 1}, {3.0});
  auto y = add(mul(a, a), a);  // a^2 + a
  t.backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(Tape, BackwardTwiceGivesSameGradient) {
  Tape<double> t;
  auto a = t.variable(Shape{1, 1, 2, 1}, {1.5, -2.0});
  auto y = sum(square(a));
  t.backward(y);
  const std::vector<double> first(a.grad().begin(), a.grad().end());
  t.backward(y);
  EXPECT_EQ(first, std::vector<double>(a.grad().begin(), a.grad().end()));
}

TEST(Tape, ConstantsGetNoGradient) {
  Tape<double> t;
  auto c = t.constant(Shape{1, 1, 1, 1}, {2.0});
  auto v = t.variable(Shape{1, 1, 1, 1}, {5.0});
  t.backward(mul(c, v));
  EXPECT_TRUE(c.grad().empty());
  EXPECT_DOUBLE_EQ(v.grad()[0], 2.0);
}

TEST(Tape, NonFiniteValueRaisesWithScope) {
  Tape<double> t;
  t.set_scope("enc_1");
  auto a = t.variable(Shape{1, 1, 1, 1}, {0.0});
  try {
    div(a, a);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.op(), "div");
    EXPECT_EQ(e.scope(), "enc_1");
  }
}

TEST(Tape, MixingTapesIsAContractError) {
  Tape<double> t1, t2;
  auto a = t1.variable(Shape{1, 1, 1, 1}, {1.0});
  auto b = t2.variable(Shape{1, 1, 1, 1}, {1.0});
  EXPECT_THROW(add(a, b), ContractError);
}

TEST(Conv2d, MatchesDirectOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  const Shape is{2, 5, 4, 3};
  std::vector<double> x(is.size()), k(3 * 3 * 3 * 4), b(4);
  for (double& v : x) v = u(rng);
  for (double& v : k) v = u(rng);
  for (double& v : b) v = u(rng);
  Tape<double> t;
  auto out = conv2d(t.constant(is, x), t.constant(Shape{3, 3, 3, 4}, k), t.constant(Shape{1, 1, 1, 4}, b));
  EXPECT_EQ(out.shape(), (Shape{2, 5, 4, 4}));
  const auto expected = conv_oracle(x, is, k, 3, 3, 4, b);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.values()[i], expected[i], 1e-12);
}

TEST(Conv2d, IdentityKernelCopiesInput) {
  Tape<double> t;
  const Shape is{1, 3, 3, 1};
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto x = t.constant(is, iota_values(9));
  auto out = conv2d(x, t.constant(Shape{3, 3, 1, 1}, k), t.constant(Shape{1, 1, 1, 1}, {0.0}));
  for (int i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(out.values()[i], i);
}

TEST(Conv2d, ShapeErrors) {
  Tape<double> t;
  auto x = t.constant(Shape{1, 4, 4, 2}, std::vector<double>(32, 1.0));
  auto k_even = t.constant(Shape{2, 2, 2, 1}, std::vector<double>(8, 1.0));
  auto k_cin = t.constant(Shape{3, 3, 3, 1}, std::vector<double>(27, 1.0));
  auto b1 = t.constant(Shape{1, 1, 1, 1}, {0.0});
  auto b2 = t.constant(Shape{1, 1, 1, 2}, {0.0, 0.0});
  EXPECT_THROW(conv2d(x, k_even, b1), DimensionError);
  try {
    conv2d(x, k_cin, b1);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "c");
  }
  auto k_ok = t.constant(Shape{3, 3, 2, 1}, std::vector<double>(18, 1.0));
  EXPECT_THROW(conv2d(x, k_ok, b2), DimensionError);
}

TEST(Maxpool, ForwardAndFirstIndexTieBreak) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 2, 2, 1}, {1.0, 1.0, 1.0, 1.0});
  auto y = maxpool2d(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  t.backward(sum(y));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Maxpool, IndivisibleExtentIsAnError) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 3, 2, 1}, iota_values(6));
  try {
    maxpool2d(x);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "h");
  }
}

TEST(Upsample, RepeatsPixels) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 1, 2, 1}, {1.0, 2.0});
  auto y = upsample_nearest(x);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 4, 1}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Concat, InterleavesChannels) {
  Tape<double> t;
  auto a = t.variable(Shape{1, 1, 2, 1}, {1.0, 2.0});
  auto b = t.variable(Shape{1, 1, 2, 2}, {3.0, 4.0, 5.0, 6.0});
  auto y = concat_channels(a, b);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 3, 4, 2, 5, 6}));
  auto c = t.variable(Shape{1, 1, 3, 1}, {0, 0, 0});
  EXPECT_THROW(concat_channels(a, c), DimensionError);
}

TEST(Elementwise, KnownValues) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  auto r = relu(x);
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()), (std::vector<double>{0, 0, 2}));
  EXPECT_DOUBLE_EQ(sigmoid(x).values()[1], 0.5);
  EXPECT_NEAR(softplus(x).values()[1], std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(clamp(x, -0.5, 0.5).values()[0], -0.5);
  EXPECT_DOUBLE_EQ(log(x).values()[1], std::log(1e-12));
  EXPECT_DOUBLE_EQ(sqrt(x).values()[2], std::sqrt(2.0));
}

TEST(Elementwise, LogAndSqrtHaveZeroGradientBelowFloor) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 1, 1, 2}, {-1.0, 4.0});
  t.backward(add(sum(log(x)), sum(sqrt(x))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.25 + 0.25);
}

TEST(Reductions, SumMeanAndPerSample) {
  Tape<double> t;
  auto x = t.variable(Shape{2, 1, 2, 1}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(sum(x).item(), 10.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 2.5);
  auto ps = sum_per_sample(x);
  EXPECT_EQ(ps.shape(), (Shape{2, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(ps.values()[1], 7.0);
  auto mb = mean_batch(x);
  EXPECT_EQ(mb.shape(), (Shape{1, 1, 2, 1}));
  EXPECT_DOUBLE_EQ(mb.values()[0], 2.0);
  EXPECT_THROW(x.item(), ContractError);
}

TEST(GatherBatch, RepeatsAndBounds) {
  Tape<double> t;
  auto x = t.variable(Shape{2, 1, 1, 1}, {5, 7});
  const std::vector<int> idx = {1, 1, 0};
  auto g = gather_batch(x, idx);
  EXPECT_EQ(std::vector<double>(g.values().begin(), g.values().end()), (std::vector<double>{7, 7, 5}));
  t.backward(sum(g));
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
  const std::vector<int> bad = {2};
  EXPECT_THROW(gather_batch(x, bad), DimensionError);
}

TEST(MaskedChannelMean, MatchesOracle) {
  Tape<double> t;
  auto f = t.variable(Shape{1, 2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
  auto m = t.constant(Shape{1, 2, 2, 1}, {1, 0, 0, 1});
  auto fg = masked_channel_mean(f, m, false);
  auto bg = masked_channel_mean(f, m, true);
  EXPECT_NEAR(fg.values()[0], 5.0 / (2 + 1e-6), 1e-12);
  EXPECT_NEAR(fg.values()[1], 50.0 / (2 + 1e-6), 1e-12);
  EXPECT_NEAR(bg.values()[0], 5.0 / (2 + 1e-6), 1e-12);
  EXPECT_NEAR(bg.values()[1], 50.0 / (2 + 1e-6), 1e-12);
}

TEST(MaskedChannelMean, RejectsDifferentiableMask) {
  Tape<double> t;
  auto f = t.variable(Shape{1, 2, 2, 1}, {1, 2, 3, 4});
  auto m = t.variable(Shape{1, 2, 2, 1}, {1, 0, 0, 1});
  EXPECT_THROW(masked_channel_mean(f, m, false), ContractError);
}

// Every differentiable op against central differences, ten seeds each.
class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, CentralDifferencesAgree) {
  const auto cases = fixtures::grad_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = fixtures::draw_input(c, seed);
    const auto r = grad_check(c.fn, c.shape, x, 1e-3, seed);
    EXPECT_LT(r.max_rel_error, 1e-3) << c.name << " seed " << seed << " index " << r.worst_index << " analytic "
                                     << r.analytic << " numeric " << r.numeric;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, fixtures::grad_cases().size()),
                         [](const auto& info) {
                           std::string n = fixtures::grad_cases()[info.param].name;
                           for (char& ch : n)
                             if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
                           return n;
                         });

TEST(Maxpool, MatchesWindowOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  const Shape s{2, 8, 8, 3};
  std::vector<double> x(s.size());
  for (double& v : x) v = u(rng);
  Tape<double> t;
  auto y = maxpool2d(t.constant(s, x));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int c = 0; c < 3; ++c) {
          double m = -1e300;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) m = std::max(m, x[s.index(n, 2 * i + a, 2 * j + b, c)]);
          EXPECT_EQ(y.at(n, i, j, c), m);
        }
}

TEST(Maxpool, ForcedMaxAndConstant) {
  Tape<double> t;
  EXPECT_EQ(maxpool2d(t.constant(Shape{1, 2, 2, 1}, {1, 2, 3, 4})).item(), 4.0);
  auto c = maxpool2d(t.constant(Shape{1, 4, 4, 1}, std::vector<double>(16, 0.3)));
  for (double v : c.values()) EXPECT_EQ(v, 0.3);
}

TEST(Upsample, MaxpoolRoundTrip) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  const Shape s{2, 3, 5, 2};
  std::vector<double> x(s.size());
  for (double& v : x) v = nd(rng);
  Tape<double> t;
  auto back = maxpool2d(upsample_nearest(t.constant(s, x)));
  EXPECT_EQ(std::vector<double>(back.values().begin(), back.values().end()), x);
}

TEST(Upsample, GradientSumsBlock) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 1, 1, 1}, {2.0});
  auto y = upsample_nearest(x);
  t.backward(sum(mul(y, t.constant(y.shape(), {1, 2, 3, 4}))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 10.0);
}

TEST(Conv2d, ZeroKernelGivesZero) {
  Tape<double> t;
  auto x = t.constant(Shape{1, 4, 4, 2}, iota_values(32));
  auto out = conv2d(x, t.constant(Shape{3, 3, 2, 3}, std::vector<double>(54, 0.0)),
                    t.constant(Shape{1, 1, 1, 3}, {0, 0, 0}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, KnownGradients) {
  Tape<double> t;
  auto x = t.variable(Shape{1, 2, 2, 1}, {1, -2, 3, 0.5});
  t.backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  Tape<double> t2;
  auto z = t2.variable(Shape{1, 2, 2, 1}, {1, -2, 3, 0.5});
  t2.backward(scale(sum(square(z)), 0.5));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(z.grad()[i], z.values()[i]);
}

TEST(Backward, IsLinearInTheRoot) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 10; ++trial) {
    const Shape s{2, 4, 4, 2};
    std::vector<double> xv(s.size());
    for (double& v : xv) v = nd(rng);
    const double a = nd(rng), b = nd(rng);
    auto f = [](const Tensor<double>& x) { return sum(sigmoid(mul(x, x))); };
    auto g = [](const Tensor<double>& x) { return mean(softplus(maxpool2d(x))); };
    auto grad_of = [&](auto build) {
      Tape<double> t;
      auto x = t.variable(s, xv);
      t.backward(build(x));
      return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    const auto gf = grad_of(f), gg = grad_of(g);
    const auto gc = grad_of([&](const Tensor<double>& x) { return add(scale(f(x), a), scale(g(x), b)); });
    for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-6);
  }
}

TEST(GradCheck, SumIsExact) {
  const std::vector<double> x = {0.3, -1.2, 4.0, 2.5};
  const auto r = grad_check([](Tape<double>&, const Tensor<double>& v) { return sum(v); }, Shape{1, 2, 2, 1}, x);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, SpecEpsilonOnDiceAndFd) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> p(64), f(2 * 8 * 8 * 3);
    for (double& v : p) v = fixtures::probability(nd(rng));
    for (double& v : f) v = nd(rng);
    auto dice = [](Tape<double>& t, const Tensor<double>& x) { return dice_loss(x, fixtures::random_mask(t, x.shape())); };
    EXPECT_LT(grad_check(dice, Shape{1, 8, 8, 1}, p, 1e-3, seed).max_rel_error, 1e-3);
    auto fd = [](Tape<double>&, const Tensor<double>& x) { return fd_loss(fixtures::random_summary(x)); };
    EXPECT_LT(grad_check(fd, Shape{2, 8, 8, 3}, f, 1e-3, seed).max_rel_error, 1e-3);
  }
}

TEST(CompositeGradient, EveryLossModeAgrees) {
  for (LossMode mode : all_loss_modes()) {
    const auto c = fixtures::composite_case(mode);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto x = fixtures::draw_input(c, seed);
      EXPECT_LT(grad_check(c.fn, c.shape, x, c.eps, seed).max_rel_error, 1e-3) << c.name << " seed " << seed;
    }
  }
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [](std::uint64_t seed) {
    UNetConfig cfg;
    cfg.input_height = cfg.input_width = 8;
    UNet model = init_params(cfg, seed);
    std::vector<float> losses;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0, 1);
    std::vector<float> img(2 * 64);
    for (float& v : img) v = u(rng);
    Mask mask{Shape{2, 8, 8, 1}, std::vector<float>(128, 0.0f)};
    for (int i = 0; i < 128; i += 3) mask.values[i] = 1.0f;
    for (int step = 0; step < 3; ++step) {
      Tape<float> t(seed + step);
      auto fr = model.forward(t, t.constant(Shape{2, 8, 8, 1}, img));
      auto target = mask_tensor(t, mask);
      auto loss = add(dice_loss(fr.prediction, target), bce_loss(fr.prediction, target));
      t.backward(loss);
      losses.push_back(loss.item());
      for (std::size_t p = 0; p < fr.params.size(); ++p) {
        auto& v = model.params()[p].value;
        const auto g = fr.params[p].grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.05f * g[i];
      }
    }
    return losses;
  };
  EXPECT_EQ(run(4), run(4));
}

TEST(GradCheck, DetectsWrongGradient) {
  // A hand-made op whose backward is off by a factor of two.
  auto fn = [](Tape<double>& t, const Tensor<double>& x) {
    std::vector<double> v(x.values().begin(), x.values().end());
    for (double& e : v) e = e * e;
    const std::size_t id = x.id();
    auto y = t.record("bad_square", x.shape(), v, {id}, [id](Tape<double>& tape, std::size_t self) {
      auto& g = tape.grad_of(id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 4.0 * tape.node(id).value[i] * tape.node(self).grad[i];
    });
    return sum(y);
  };
  const std::vector<double> x = {0.5, -1.5};
  EXPECT_GT(grad_check(fn, Shape{1, 1, 1, 2}, x).max_rel_error, 0.3);
}
