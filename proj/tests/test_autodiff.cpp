#include <gtest/gtest.h>

#include "support.hpp"

using namespace usseg;
using namespace testing_support;

namespace {

constexpr int kSeeds = 20;

GradCheckReport check_op(const std::function<Var(Tape&, const Var&)>& op, const Tensor& point,
                         std::uint64_t seed, double tol = 1e-6) {
  return grad_check([&](Tape& t, const Var& x) { return project(t, op(t, x), seed); }, point, 1e-5,
                    tol);
}

}  // namespace

TEST(Tensor, RejectsWrongDataLength) {
  EXPECT_THROW(Tensor(Shape{1, 1, 2, 2}, std::vector<double>(3)), std::invalid_argument);
  EXPECT_EQ(Tensor(Shape{2, 3, 4, 5}).size(), 120u);
}

TEST(Conv2d, AllOnesGivesNine) {
  Tape t;
  const Var y = conv2d(t, Var::constant(Tensor(Shape{1, 1, 3, 3}, 1.0)),
                       Var::constant(Tensor(Shape{1, 1, 3, 3}, 1.0)),
                       Var::constant(Tensor(Shape{1, 1, 1, 1}, 0.0)));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value().item(), 9.0);
}

TEST(Conv2d, IdentityKernelIsBitExact) {
  const Tensor x = random_tensor(Shape{2, 1, 7, 5}, 3);
  Tape t;
  const Var y = conv2d(t, Var::constant(x), Var::constant(Tensor(Shape{1, 1, 1, 1}, 1.0)), Var{});
  EXPECT_EQ(y.value(), x);
  // centred 3x3 delta with same padding is also the identity
  Tensor delta(Shape{1, 1, 3, 3});
  delta.at(0, 0, 1, 1) = 1.0;
  EXPECT_EQ(conv2d(t, Var::constant(x), Var::constant(delta), Var{}, 1, 1).value(), x);
}

TEST(Conv2d, MatchesNaiveLoops) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor(Shape{2, 3, 7, 6}, seed);
    const Tensor k = random_tensor(Shape{4, 3, 3, 3}, seed + 100);
    const Tensor b = random_tensor(Shape{1, 4, 1, 1}, seed + 200);
    for (std::size_t stride : {1u, 2u}) {
      if ((7 + 2 - 3) % stride || (6 + 2 - 3) % stride) continue;
      Tape t;
      const Tensor got =
          conv2d(t, Var::constant(x), Var::constant(k), Var::constant(b), stride, 1).value();
      const Tensor want = naive_conv2d(x, k, &b, stride, 1);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(Conv2d, RejectsMismatchAndFractionalExtent) {
  Tape t;
  const Var x = Var::constant(Tensor(Shape{1, 2, 5, 5}));
  try {
    conv2d(t, x, Var::constant(Tensor(Shape{1, 3, 3, 3})), Var{});
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1x2x5x5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1x3x3x3"), std::string::npos) << msg;
  }
  EXPECT_THROW(conv2d(t, x, Var::constant(Tensor(Shape{1, 2, 2, 2})), Var{}, 2, 0),
               std::invalid_argument);
}

TEST(Conv2d, GradientSpecCase) {
  const Tensor x = random_tensor(Shape{1, 2, 5, 5}, 11);
  const Var k = Var::leaf(random_tensor(Shape{3, 2, 3, 3}, 12));
  const auto r = check_op([&](Tape& t, const Var& in) { return conv2d(t, in, k, Var{}, 1, 1); }, x, 1);
  EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(Conv2d, GradientsAllArgumentsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    Var x = Var::leaf(random_tensor(Shape{2, 2, 7, 7}, s));
    Var k = Var::leaf(random_tensor(Shape{3, 2, 3, 3}, s + 50));
    Var b = Var::leaf(random_tensor(Shape{1, 3, 1, 1}, s + 90));
    const std::size_t stride = s % 2 ? 1 : 2;
    const auto r = grad_check(
        [&](Tape& t) { return project(t, conv2d(t, x, k, b, stride, 1), s); }, {x, k, b},
        {1e-5, 1e-6, 0, 0});
    EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
  }
}

TEST(TransposedConv, NonOverlappingCopy) {
  Tape t;
  const Var y = transposed_conv2d(t, Var::constant(Tensor(Shape{1, 1, 2, 2}, 3.5)),
                                  Var::constant(Tensor(Shape{1, 1, 2, 2}, 1.0)), 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (double v : y.value().data()) EXPECT_EQ(v, 3.5);
}

TEST(TransposedConv, MatchesScatterOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor(Shape{2, 3, 4, 5}, seed);
    const Tensor k = random_tensor(Shape{3, 2, 3, 3}, seed + 7);
    struct Geo {
      std::size_t stride, pad, outpad;
    };
    for (Geo g : {Geo{1, 0, 0}, Geo{2, 0, 0}, Geo{2, 1, 1}, Geo{1, 1, 0}}) {
      Tape t;
      const Tensor got =
          transposed_conv2d(t, Var::constant(x), Var::constant(k), g.stride, Var{}, g.pad, g.outpad)
              .value();
      const Tensor want = naive_tconv(x, k, g.stride, g.pad, g.outpad);
      ASSERT_EQ(got.shape(), want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(TransposedConv, IsAdjointOfConv) {
  // <conv(x), y> == <x, tconv(y)> for the same kernel and stride.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor(Shape{1, 2, 8, 8}, seed);
    const Tensor k = random_tensor(Shape{3, 2, 2, 2}, seed + 1);  // conv layout (out, in)
    Tape t;
    const Tensor cx = conv2d(t, Var::constant(x), Var::constant(k), Var{}, 2, 0).value();
    const Tensor y = random_tensor(cx.shape(), seed + 2);
    // The same memory read as (in=3, out=2) is the transposed kernel's layout.
    const Tensor ty = transposed_conv2d(t, Var::constant(y), Var::constant(k), 2).value();
    ASSERT_EQ(ty.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(TransposedConv, EqualsConvInputGradient) {
  const Tensor k = random_tensor(Shape{3, 2, 2, 2}, 5);
  Var x = Var::leaf(Tensor(Shape{1, 2, 6, 6}));
  const Tensor seed = random_tensor(Shape{1, 3, 3, 3}, 6);
  Tape t;
  const Var y = conv2d(t, x, Var::constant(k), Var{}, 2, 0);
  t.backward(y, seed);
  Tape t2;
  const Tensor ty = transposed_conv2d(t2, Var::constant(seed), Var::constant(k), 2).value();
  for (std::size_t i = 0; i < ty.size(); ++i) EXPECT_NEAR(x.grad()[i], ty[i], 1e-13);
}

TEST(TransposedConv, RejectsChannelMismatch) {
  Tape t;
  EXPECT_THROW(transposed_conv2d(t, Var::constant(Tensor(Shape{1, 2, 3, 3})),
                                 Var::constant(Tensor(Shape{3, 1, 2, 2})), 2),
               std::invalid_argument);
}

TEST(TransposedConv, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    Var x = Var::leaf(random_tensor(Shape{1, 2, 3, 4}, s));
    Var k = Var::leaf(random_tensor(Shape{2, 3, 3, 3}, s + 1));
    Var b = Var::leaf(random_tensor(Shape{1, 3, 1, 1}, s + 2));
    const auto r = grad_check(
        [&](Tape& t) { return project(t, transposed_conv2d(t, x, k, 2, b, 1, 1), s); }, {x, k, b},
        {1e-5, 1e-6, 0, 0});
    EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
  }
}

TEST(MaxPool, SingleWindow) {
  Tape t;
  const auto [y, idx] = maxpool2(t, Var::constant(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4})));
  EXPECT_EQ(y.value().item(), 4.0);
  ASSERT_EQ(idx.source.size(), 1u);
  EXPECT_EQ(idx.source[0], 3u);  // row 1, column 1
}

TEST(MaxPool, ConstantInputRoutesToOneElementPerWindow) {
  Var x = Var::leaf(Tensor(Shape{1, 2, 4, 6}, 0.25));
  Tape t;
  const auto [y, idx] = maxpool2(t, x);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.25);
  t.backward(y, Tensor(y.shape(), 1.0));
  double total = 0;
  std::size_t nonzero = 0;
  for (double g : x.grad().data()) {
    total += g;
    nonzero += g != 0.0;
  }
  EXPECT_EQ(nonzero, y.shape().size());
  EXPECT_EQ(total, static_cast<double>(y.shape().size()));
  // ties break toward the row-major first element of the window
  EXPECT_EQ(x.grad().at(0, 0, 0, 0), 1.0);
}

TEST(MaxPool, IndicesStayInsideWindows) {
  const Tensor x = distinct_tensor(Shape{2, 3, 6, 8}, 9);
  Tape t;
  const auto [y, idx] = maxpool2(t, Var::constant(x));
  const Shape ys = y.shape();
  for (std::size_t o = 0; o < ys.size(); ++o) {
    const std::size_t plane = o / ys.plane();
    const std::size_t oy = (o % ys.plane()) / ys.w, ox = o % ys.w;
    const std::size_t src = idx.source[o];
    ASSERT_EQ(src / (6 * 8), plane);
    const std::size_t sy = (src % 48) / 8, sx = src % 8;
    EXPECT_EQ(sy / 2, oy);
    EXPECT_EQ(sx / 2, ox);
    EXPECT_EQ(x[src], y.value()[o]);
  }
}

TEST(MaxPool, RejectsOddExtent) {
  Tape t;
  EXPECT_THROW(maxpool2(t, Var::constant(Tensor(Shape{1, 1, 5, 4}))), std::invalid_argument);
}

TEST(MaxPool, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    const auto r = check_op([](Tape& t, const Var& x) { return maxpool2(t, x).first; },
                            distinct_tensor(Shape{1, 1, 6, 6}, s), s);
    EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
  }
}

TEST(BatchNorm, ConstantInputCollapsesToBeta) {
  BatchNormStats st(2);
  Tape t;
  const Var y = batchnorm(t, Var::constant(Tensor(Shape{2, 2, 3, 3}, 4.0)),
                          Var::constant(Tensor(Shape{1, 2, 1, 1}, 1.7)),
                          Var::constant(Tensor(Shape{1, 2, 1, 1}, {0.3, -0.2})), Mode::train, st);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_DOUBLE_EQ(y.value()[n * 18 + i], 0.3);
      EXPECT_DOUBLE_EQ(y.value()[n * 18 + 9 + i], -0.2);
    }
}

TEST(BatchNorm, StandardizedInputScalesByEps) {
  // Two values +-1 per channel: mean 0, biased variance 1.
  Tensor x(Shape{1, 1, 1, 2}, {1.0, -1.0});
  BatchNormStats st(1);
  Tape t;
  const Var y = batchnorm(t, Var::constant(x), Var::constant(Tensor(Shape{1, 1, 1, 1}, 1.0)),
                          Var::constant(Tensor(Shape{1, 1, 1, 1}, 0.0)), Mode::train, st);
  const double scale = std::sqrt(1.0 / (1.0 + kBatchNormEps));
  EXPECT_NEAR(y.value()[0], scale, 1e-15);
  EXPECT_NEAR(y.value()[1], -scale, 1e-15);
}

TEST(BatchNorm, RunningStatsAndInferMode) {
  const Tensor x = random_tensor(Shape{3, 2, 4, 4}, 1);
  BatchNormStats st(2);
  Tape t;
  const Var g = Var::constant(Tensor(Shape{1, 2, 1, 1}, 1.0));
  const Var b = Var::constant(Tensor(Shape{1, 2, 1, 1}, 0.0));
  batchnorm(t, Var::constant(x), g, b, Mode::train, st);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, ss = 0;
    const std::size_t cnt = 3 * 16;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += x[(n * 2 + c) * 16 + i];
    m /= cnt;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 16; ++i) ss += std::pow(x[(n * 2 + c) * 16 + i] - m, 2);
    EXPECT_NEAR(st.running_mean[c], 0.1 * m, 1e-15);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * ss / (cnt - 1), 1e-15);
  }
  // infer mode uses the running statistics
  const Var y = batchnorm(t, Var::constant(x), g, b, Mode::infer, st);
  EXPECT_NEAR(y.value()[0],
              (x[0] - st.running_mean[0]) / std::sqrt(st.running_var[0] + kBatchNormEps), 1e-15);
}

TEST(BatchNorm, RejectsEmptyGroupAndBadParams) {
  BatchNormStats st(2);
  Tape t;
  const Var g = Var::constant(Tensor(Shape{1, 2, 1, 1}, 1.0));
  EXPECT_THROW(batchnorm(t, Var::constant(Tensor(Shape{0, 2, 3, 3})), g, g, Mode::train, st),
               std::invalid_argument);
  EXPECT_THROW(batchnorm(t, Var::constant(Tensor(Shape{1, 3, 3, 3})), g, g, Mode::train, st),
               std::invalid_argument);
}

TEST(BatchNorm, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    Var x = Var::leaf(random_tensor(Shape{2, 3, 3, 3}, s));
    Var g = Var::leaf(random_tensor(Shape{1, 3, 1, 1}, s + 1, 0.5, 1.5));
    Var b = Var::leaf(random_tensor(Shape{1, 3, 1, 1}, s + 2));
    BatchNormStats st(3);
    const auto r = grad_check(
        [&](Tape& t) { return project(t, batchnorm(t, x, g, b, Mode::train, st), s); }, {x, g, b},
        {1e-5, 1e-5, 0, 0});
    EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
  }
}

TEST(Activation, ReluAndSigmoidValues) {
  Tape t;
  const Var r = relu(t, Var::constant(Tensor(Shape{1, 1, 1, 3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(r.value(), Tensor(Shape{1, 1, 1, 3}, {0.0, 0.0, 2.0}));
  EXPECT_EQ(sigmoid(t, Var::constant(Tensor::scalar(0.0))).value().item(), 0.5);
}

TEST(Activation, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    const Tensor x = away_from_zero(Shape{2, 2, 3, 3}, s);
    for (Activation a : {Activation::relu, Activation::sigmoid}) {
      const auto r = check_op([a](Tape& t, const Var& v) { return activation(t, a, v); }, x, s);
      EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
    }
  }
}

TEST(Softmax, UniformCases) {
  Tape t;
  const Var c = softmax(t, Var::constant(Tensor(Shape{1, 2, 3, 3}, 0.0)), SoftmaxAxis::channels);
  for (double v : c.value().data()) EXPECT_EQ(v, 0.5);
  const Var s = softmax(t, Var::constant(Tensor(Shape{2, 3, 4, 5}, 7.0)), SoftmaxAxis::spatial);
  for (double v : s.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 20.0);
}

TEST(Softmax, SimplexPropertyAndStability) {
  for (int s = 0; s < kSeeds; ++s) {
    const Tensor x = random_tensor(Shape{2, 3, 4, 4}, s, -800.0, 800.0);
    Tape t;
    const Tensor ch = softmax(t, Var::constant(x), SoftmaxAxis::channels).value();
    const Tensor sp = softmax(t, Var::constant(x), SoftmaxAxis::spatial).value();
    ASSERT_TRUE(ch.all_finite());
    ASSERT_TRUE(sp.all_finite());
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        double sum = 0;
        for (std::size_t c = 0; c < 3; ++c) {
          EXPECT_GE(ch.at(n, c, i / 4, i % 4), 0.0);
          sum += ch.at(n, c, i / 4, i % 4);
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    for (std::size_t p = 0; p < 6; ++p) {
      double sum = 0;
      for (std::size_t i = 0; i < 16; ++i) sum += sp[p * 16 + i];
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    const Tensor x = random_tensor(Shape{2, 3, 3, 3}, s, -2.0, 2.0);
    for (SoftmaxAxis ax : {SoftmaxAxis::channels, SoftmaxAxis::spatial}) {
      const auto r = check_op([ax](Tape& t, const Var& v) { return softmax(t, v, ax); }, x, s);
      EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
    }
  }
}

TEST(Combine, ConcatAddMul) {
  const Tensor a = random_tensor(Shape{1, 2, 4, 4}, 1);
  const Tensor b = random_tensor(Shape{1, 3, 4, 4}, 2);
  Tape t;
  const Tensor c = concat(t, Var::constant(a), Var::constant(b)).value();
  ASSERT_EQ(c.shape(), (Shape{1, 5, 4, 4}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(c[i], a[i]);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(c[a.size() + i], b[i]);
  EXPECT_EQ(add(t, Var::constant(a), Var::constant(Tensor(a.shape()))).value(), a);
  EXPECT_THROW(add(t, Var::constant(a), Var::constant(b)), std::invalid_argument);
  EXPECT_THROW(concat(t, Var::constant(a), Var::constant(Tensor(Shape{1, 1, 4, 5}))),
               std::invalid_argument);
}

TEST(Combine, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    Var a = Var::leaf(random_tensor(Shape{1, 2, 3, 3}, s));
    Var b = Var::leaf(random_tensor(Shape{1, 2, 3, 3}, s + 1));
    for (Combine k : {Combine::concat_channels, Combine::add, Combine::mul}) {
      const auto r = grad_check([&](Tape& t) { return project(t, combine(t, k, a, b), s); }, {a, b},
                                {1e-5, 1e-6, 0, 0});
      EXPECT_TRUE(r.passed) << "seed " << s << " max " << r.max_error;
    }
    // d(a*b)/da = b exactly
    Tape t;
    a.zero_grad();
    t.backward(mul(t, a, b), Tensor(a.shape(), 1.0));
    EXPECT_EQ(a.grad(), b.value());
  }
}

TEST(ChannelMean, ValuesAndGradients) {
  Tape t;
  const Tensor x = random_tensor(Shape{1, 1, 3, 3}, 4);
  EXPECT_EQ(channel_mean(t, Var::constant(x)).value(), x);
  const Var m = channel_mean(t, Var::constant(Tensor(Shape{1, 2, 1, 1}, {2.0, 4.0})));
  EXPECT_EQ(m.value().item(), 3.0);
  for (int s = 0; s < kSeeds; ++s) {
    const auto r = check_op([](Tape& tt, const Var& v) { return channel_mean(tt, v); },
                            random_tensor(Shape{2, 3, 3, 3}, s), s);
    EXPECT_TRUE(r.passed) << r.max_error;
  }
}

TEST(OtherOps, GradientsManySeeds) {
  for (int s = 0; s < kSeeds; ++s) {
    const Tensor pos = random_tensor(Shape{2, 3, 3, 3}, s, 0.2, 2.0);
    std::vector<std::pair<const char*, std::function<Var(Tape&, const Var&)>>> ops = {
        {"spatial_mean", [](Tape& t, const Var& v) { return spatial_mean(t, v); }},
        {"broadcast", [](Tape& t, const Var& v) { return broadcast_channels(t, channel_mean(t, v), 4); }},
        {"select", [](Tape& t, const Var& v) { return select_channel(t, v, 1); }},
        {"log", [](Tape& t, const Var& v) { return log(t, v); }},
        {"square", [](Tape& t, const Var& v) { return square(t, v); }},
        {"affine", [](Tape& t, const Var& v) { return affine(t, v, -1.5, 0.25); }},
        {"div", [](Tape& t, const Var& v) { return div(t, affine(t, v, 2.0, 1.0), v); }},
        {"sub", [](Tape& t, const Var& v) { return sub(t, square(t, v), v); }},
        {"sum_items", [](Tape& t, const Var& v) { return sum_items(t, v); }},
        {"clamp", [](Tape& t, const Var& v) { return clamp(t, v, 0.1, 5.0); }},
    };
    for (const auto& [name, op] : ops) {
      const auto r = check_op(op, pos, s);
      EXPECT_TRUE(r.passed) << name << " seed " << s << " max " << r.max_error;
    }
  }
}

TEST(Backward, IdentityAndFanOut) {
  Var x = Var::leaf(random_tensor(Shape{1, 1, 2, 3}, 1));
  {
    Tape t;
    const Var y = affine(t, x, 1.0, 0.0);
    t.backward(y, Tensor(y.shape(), 1.0));
    for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
  }
  x.zero_grad();
  {
    Tape t;
    const Var y = add(t, x, x);
    t.backward(y, Tensor(y.shape(), 1.0));
    for (double g : x.grad().data()) EXPECT_EQ(g, 2.0);
  }
}

TEST(Backward, TwoPathGraphSumsPathGradients) {
  // y = x*a + exp-free second path x*x; dy/dx = a + 2x
  for (int s = 0; s < kSeeds; ++s) {
    Var x = Var::leaf(random_tensor(Shape{1, 2, 2, 2}, s));
    const Tensor a = random_tensor(x.shape(), s + 1);
    Tape t;
    const Var y = sum(t, add(t, mul(t, x, Var::constant(a)), mul(t, x, x)));
    backward(t, y);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(x.grad()[i], a[i] + 2.0 * x.value()[i], 1e-15);
    }
  }
}

TEST(Backward, SeedShapeMismatchRejected) {
  Var x = Var::leaf(Tensor(Shape{1, 1, 2, 2}, 1.0));
  Tape t;
  const Var y = affine(t, x, 2.0, 0.0);
  EXPECT_THROW(t.backward(y, Tensor(Shape{1, 1, 1, 1}, 1.0)), std::invalid_argument);
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  Var x = Var::leaf(random_tensor(Shape{1, 1, 2, 2}, 2));
  Tape t;
  const Var a = square(t, x);
  const Var b = mul(t, a, x);
  const Var y = sum(t, add(t, a, b));
  // every operand of entry k is a leaf or the output of an entry < k
  std::vector<const Node*> produced;
  for (const auto& e : t.entries()) {
    for (const Var& in : e.inputs) {
      if (in.node() == x.node() || !in.requires_grad()) continue;
      EXPECT_NE(std::find(produced.begin(), produced.end(), in.node()), produced.end()) << e.op;
    }
    produced.push_back(e.output.node());
  }
  int visits = 0;
  Tape counting;
  for (const auto& e : t.entries()) {
    counting.record(e.op, e.inputs, e.output, [&visits, f = e.backward] {
      ++visits;
      f();
    });
  }
  counting.backward(y, Tensor(y.shape(), 1.0));
  EXPECT_EQ(visits, static_cast<int>(t.entries().size()));
}

TEST(GradCheck, SumOfElementsIsExact) {
  const auto r = grad_check([](Tape& t, const Var& x) { return sum(t, x); },
                            random_tensor(Shape{1, 2, 3, 3}, 5), 1e-5, 1e-8);
  EXPECT_TRUE(r.passed) << r.max_error;
  EXPECT_LT(r.max_error, 1e-9);
}

TEST(GradCheck, SoftDiceLoss) {
  const Tensor g = random_binary(Shape{1, 1, 6, 6}, 3);
  const auto r = grad_check([&](Tape& t, const Var& s) { return soft_dice_expr(t, s, g); },
                            random_scores(Shape{1, 1, 6, 6}, 4), 1e-5, 1e-5);
  EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(GradCheck, WrongBackwardIsReported) {
  // Negative control: an op whose backward rule is off by a factor of two.
  struct Local {
    static Var run(Tape& t, const Var& x) {
      Tensor v = x.value();
      for (double& e : v.data()) e *= 3.0;
      Var y(std::move(v), x.requires_grad());
      t.record("broken", {x}, y, [x, y] {
        Tensor& gx = x.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * y.grad()[i] * 3.0;
      });
      return sum(t, y);
    }
  };
  const auto r = grad_check(&Local::run, random_tensor(Shape{1, 1, 2, 2}, 1), 1e-5, 1e-5);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_error, 0.5, 1e-6);
}

TEST(GradCheck, NonFiniteValueRejected) {
  EXPECT_THROW(grad_check([](Tape& t, const Var& x) { return sum(t, log(t, x)); },
                          Tensor(Shape{1, 1, 1, 2}, -1.0), 1e-5, 1e-5),
               std::invalid_argument);
}

TEST(Finiteness, ForwardOpsOnFiniteInputs) {
  for (int s = 0; s < kSeeds; ++s) {
    const Tensor x = random_tensor(Shape{2, 2, 4, 4}, s, -50.0, 50.0);
    Tape t;
    BatchNormStats st(2);
    const Var v = Var::constant(x);
    EXPECT_TRUE(softmax(t, v, SoftmaxAxis::spatial).value().all_finite());
    EXPECT_TRUE(sigmoid(t, v).value().all_finite());
    EXPECT_TRUE(batchnorm(t, v, Var::constant(Tensor(Shape{1, 2, 1, 1}, 1.0)),
                          Var::constant(Tensor(Shape{1, 2, 1, 1}, 0.0)), Mode::train, st)
                    .value()
                    .all_finite());
  }
}
