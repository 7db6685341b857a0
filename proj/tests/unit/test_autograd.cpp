#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/ops.hpp"
#include "orthokd/optim.hpp"

using namespace orthokd;

namespace {

constexpr int kSeeds = 20;
constexpr double kGradTol = 1e-4;

// Contracts a tensor-valued output with a fixed random weight so every
// element contributes a distinct sensitivity to the scalar loss.
Variable weighted_sum(Tape& tape, const Variable& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xabcdefULL);
  Variable w(oracle::random_tensor(out.shape(), rng));
  return sum(tape, mul(tape, out, w));
}

Variable leaf(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  return Variable(oracle::random_tensor(std::move(s), rng, scale), true);
}

}  // namespace

TEST(Tensor, ShapeAndValues) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_DOUBLE_EQ(t.sum(), 9.0);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Autograd, SumGivesOnes) {
  Variable w(Tensor::from({1.0, -2.0, 3.0}), true);
  Tape tape;
  tape.backward(sum(tape, w));
  for (double g : w.grad().values()) EXPECT_EQ(g, 1.0);
}

TEST(Autograd, SumOfSquares) {
  Variable w(Tensor::from({1.0, 2.0}), true);
  Tape tape;
  tape.backward(sum(tape, mul(tape, w, w)));
  EXPECT_EQ(w.grad()[0], 2.0);
  EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Autograd, SecondBackwardRejected) {
  Variable w(Tensor::from({1.0}), true);
  Tape tape;
  Variable loss = sum(tape, w);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
}

TEST(Autograd, NonScalarLossRejected) {
  Variable w(Tensor::from({1.0, 2.0}), true);
  Tape tape;
  EXPECT_THROW(tape.backward(scale(tape, w, 2.0)), ShapeError);
}

TEST(Autograd, ForeignLossRejected) {
  Variable w(Tensor::from({1.0, 2.0}), true);
  Tape a, b;
  Variable loss = sum(a, w);
  EXPECT_THROW(b.backward(loss), std::logic_error);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  // loss = sum(w*w + w) reuses w three times
  Variable w(Tensor::from({3.0}), true);
  Tape tape;
  tape.backward(sum(tape, add(tape, mul(tape, w, w), w)));
  EXPECT_EQ(w.grad()[0], 7.0);
}

TEST(Autograd, ConstantsNotRecorded) {
  Variable x(Tensor::from({1.0, 2.0}));
  Tape tape;
  relu(tape, scale(tape, x, 2.0));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Conv2d, OnesGiveNine) {
  Tape tape;
  Variable x(Tensor({1, 1, 3, 3}, 1.0)), w(Tensor({1, 1, 3, 3}, 1.0));
  Variable y = conv2d(tape, x, w, {}, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(3);
  Tensor xin = oracle::random_tensor({2, 1, 5, 5}, rng);
  Tensor k({1, 1, 3, 3});
  k.at(0, 0, 1, 1) = 1.0;
  Tape tape;
  Variable y = conv2d(tape, Variable(xin), Variable(k), {}, {1, 1});
  EXPECT_EQ(y.value(), xin);
}

TEST(Conv2d, MatchesLoopOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
    Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tensor b = oracle::random_tensor({4}, rng);
    for (std::size_t stride : {1, 2})
      for (std::size_t pad : {0, 1}) {
        Tape tape;
        Variable y = conv2d(tape, Variable(x), Variable(w), Variable(b), {stride, pad});
        Tensor ref = oracle::conv2d(x, w, &b, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LE(oracle::max_rel_diff(y.value(), ref), 1e-12);
      }
  }
}

TEST(Conv2d, OutputExtent) {
  EXPECT_EQ(conv_out_extent(8, 3, 1, 1), 8u);
  EXPECT_EQ(conv_out_extent(8, 3, 2, 1), 4u);
  EXPECT_EQ(conv_out_extent(7, 3, 2, 0), 3u);
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  Tape tape;
  Variable x(Tensor({1, 2, 4, 4})), w(Tensor({1, 3, 3, 3}));
  try {
    conv2d(tape, x, w, {}, {1, 1});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
  }
  EXPECT_THROW(conv2d(tape, Variable(Tensor({1, 3, 4, 4})), w, {}, {0, 1}), ConfigError);
}

TEST(BatchNorm, ConstantInputGivesShift) {
  Tape tape;
  Variable x(Tensor({4, 2, 3, 3}, 7.0));
  Variable g(Tensor::from({0.5, 2.0})), b(Tensor::from({0.25, -1.0}));
  BatchNormState st(2);
  Variable y = batchnorm2d(tape, x, g, b, &st, true);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      EXPECT_NEAR(y.value()[n * 18 + i], 0.25, 1e-12);
      EXPECT_NEAR(y.value()[n * 18 + 9 + i], -1.0, 1e-12);
    }
}

TEST(BatchNorm, StandardizedInputPassesThrough) {
  // two samples per channel at +-1: mean 0, biased variance 1
  Tensor xin({2, 1, 1, 1}, std::vector<double>{1.0, -1.0});
  Tape tape;
  Variable y = batchnorm2d(tape, Variable(xin), Variable(Tensor::from({1.0})),
                           Variable(Tensor::from({0.0})), nullptr, true);
  EXPECT_NEAR(y.value()[0], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y.value()[1], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, OutputStatisticsMatchAffine) {
  std::mt19937_64 rng(5);
  Tensor xin = oracle::random_tensor({16, 3, 4, 4}, rng, 10.0);
  Tensor gamma = Tensor::from({0.5, 1.5, 2.0}), shift = Tensor::from({-1.0, 0.0, 0.75});
  Tape tape;
  Variable y = batchnorm2d(tape, Variable(xin), Variable(gamma), Variable(shift), nullptr, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const std::size_t cnt = 16 * 16;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += y.value()[(n * 3 + c) * 16 + i];
    m /= cnt;
    for (std::size_t n = 0; n < 16; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        const double d = y.value()[(n * 3 + c) * 16 + i] - m;
        v += d * d;
      }
    EXPECT_NEAR(m, shift[c], 1e-6);
    EXPECT_NEAR(std::sqrt(v / cnt), gamma[c], 1e-6);
  }
}

TEST(BatchNorm, RunningStatsAndEval) {
  Tensor xin({2, 1, 1, 2}, std::vector<double>{1.0, 3.0, 5.0, 7.0});
  BatchNormState st(1);
  Tape tape;
  batchnorm2d(tape, Variable(xin), Variable(Tensor::from({1.0})), Variable(Tensor::from({0.0})),
              &st, true);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 4.0, 1e-12);
  // running variance tracks the unbiased estimate: 20 / 3
  EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * 20.0 / 3.0, 1e-12);
  Variable e = batchnorm2d(tape, Variable(xin), Variable(Tensor::from({1.0})),
                           Variable(Tensor::from({0.0})), &st, false);
  EXPECT_NEAR(e.value()[0], (1.0 - 0.4) / std::sqrt(st.running_var[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, SingleSampleTrainingRejected) {
  Tape tape;
  EXPECT_THROW(batchnorm2d(tape, Variable(Tensor({1, 1, 2, 2})), Variable(Tensor::from({1.0})),
                           Variable(Tensor::from({0.0})), nullptr, true),
               ShapeError);
  EXPECT_THROW(batchnorm2d(tape, Variable(Tensor({2, 2, 2, 2})), Variable(Tensor::from({1.0})),
                           Variable(Tensor::from({0.0})), nullptr, true),
               ShapeError);
}

TEST(Elementwise, ReluValuesAndKink) {
  Variable x(Tensor::from({-1.0, 0.0, 2.0}), true);
  Tape tape;
  Variable y = relu(tape, x);
  EXPECT_EQ(y.value(), Tensor::from({0.0, 0.0, 2.0}));
  tape.backward(sum(tape, y));
  EXPECT_EQ(x.grad(), Tensor::from({0.0, 0.0, 1.0}));
}

TEST(Elementwise, GlobalPoolOfConstant) {
  Tensor xin({2, 3, 4, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) xin[(n * 3 + c) * 16 + i] = 1.0 + c;
  Tape tape;
  Variable y = global_avg_pool(tape, Variable(xin));
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.value().at(1, c), 1.0 + c);
}

TEST(Elementwise, LinearMatchesOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random_tensor({5, 7}, rng), w = oracle::random_tensor({3, 7}, rng),
           b = oracle::random_tensor({3}, rng);
    Tape tape;
    Variable y = linear(tape, Variable(x), Variable(w), Variable(b));
    EXPECT_LE(oracle::max_rel_diff(y.value(), oracle::linear(x, w, &b)), 1e-12);
  }
  Tape tape;
  EXPECT_THROW(linear(tape, Variable(Tensor({2, 4})), Variable(Tensor({3, 5})), {}), ShapeError);
}

TEST(Elementwise, ShortcutPadsAndSubsamples) {
  Tensor xin({1, 2, 4, 4});
  for (std::size_t i = 0; i < xin.numel(); ++i) xin[i] = static_cast<double>(i);
  Tape tape;
  Variable y = shortcut(tape, Variable(xin), 2, 4);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 2, 2}));
  // channel padding is symmetric: one zero channel on each side
  EXPECT_EQ(y.value().at(0, 0, 0, 0), 0.0);
  EXPECT_EQ(y.value().at(0, 1, 1, 1), xin.at(0, 0, 2, 2));
  EXPECT_EQ(y.value().at(0, 2, 0, 1), xin.at(0, 1, 0, 2));
  EXPECT_EQ(y.value().at(0, 3, 1, 0), 0.0);
}

// ------------------------------------------------------------- gradients

TEST(GradCheck, Conv2d) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({2, 2, 5, 5}, rng), leaf({3, 2, 3, 3}, rng), leaf({3}, rng)};
    const std::size_t stride = 1 + s % 2;
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return weighted_sum(t, conv2d(t, p[0], p[1], p[2], {stride, 1}), s);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, BatchNormTraining) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({3, 2, 3, 3}, rng, 2.0), leaf({2}, rng), leaf({2}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return weighted_sum(t, batchnorm2d(t, p[0], p[1], p[2], nullptr, true), s);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, BatchNormEval) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    BatchNormState st(2);
    st.running_mean = Tensor::from({0.3, -0.2});
    st.running_var = Tensor::from({1.7, 0.4});
    std::vector<Variable> v{leaf({2, 2, 3, 3}, rng), leaf({2}, rng), leaf({2}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return weighted_sum(t, batchnorm2d(t, p[0], p[1], p[2], &st, false), s);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, ElementwisePrimitives) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({2, 3, 4, 4}, rng), leaf({2, 3, 4, 4}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      Variable a = relu(t, p[0]);
      Variable b = scale(t, mul(t, a, p[1]), -1.5);
      return add(t, weighted_sum(t, add(t, b, p[0]), s), scale(t, abs_sum(t, p[1]), 0.3));
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, PoolingAndShortcut) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({2, 2, 4, 4}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      Variable m = weighted_sum(t, max_pool2x2(t, p[0]), s);
      Variable g = weighted_sum(t, global_avg_pool(t, p[0]), s + 1);
      Variable sc = weighted_sum(t, shortcut(t, p[0], 2, 4), s + 2);
      return add(t, add(t, m, g), sc);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, Linear) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({4, 6}, rng), leaf({3, 6}, rng), leaf({3}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return weighted_sum(t, linear(t, p[0], p[1], p[2]), s);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, SoftmaxLosses) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({4, 5}, rng, 2.0)};
    Tensor targets({4, 5});
    Tensor probs({4, 5});
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (std::size_t n = 0; n < 4; ++n) {
      double z = 0, zp = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        targets.at(n, c) = u(rng);
        probs.at(n, c) = u(rng);
        z += targets.at(n, c);
        zp += probs.at(n, c);
      }
      for (std::size_t c = 0; c < 5; ++c) {
        targets.at(n, c) /= z;
        probs.at(n, c) /= zp;
      }
    }
    const double temp = 1.0 + s % 5;
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return add(t, softmax_cross_entropy(t, p[0], targets, temp),
                 kl_div_with_logits(t, p[0], probs, temp));
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, NormalizedL1) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({3, 2, 2, 2}, rng), leaf({3, 2, 2, 2}, rng)};
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      return normalized_l1_distance(t, p[0], p[1]);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

TEST(GradCheck, ComposedNetwork) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    std::vector<Variable> v{leaf({3, 2, 6, 6}, rng), leaf({4, 2, 3, 3}, rng, 0.5),
                            leaf({4}, rng), leaf({4}, rng), leaf({3, 4}, rng), leaf({3}, rng)};
    Tensor targets({3, 3});
    for (std::size_t n = 0; n < 3; ++n) targets.at(n, (n + s) % 3) = 1.0;
    auto f = [&](Tape& t, const std::vector<Variable>& p) {
      Variable h = conv2d(t, p[0], p[1], {}, {1, 1});
      h = batchnorm2d(t, h, p[2], p[3], nullptr, true);
      h = relu(t, h);
      h = max_pool2x2(t, h);
      h = global_avg_pool(t, h);
      return softmax_cross_entropy(t, linear(t, h, p[4], p[5]), targets);
    };
    EXPECT_LE(oracle::gradcheck(f, v), kGradTol) << "seed " << s;
  }
}

// ------------------------------------------------------------------ SGD

namespace {
OptimizerConfig plain(double lr, double wd, int p, double momentum = 0.0) {
  OptimizerConfig c;
  c.learning_rate = lr;
  c.weight_decay = wd;
  c.norm_order = p;
  c.momentum = momentum;
  return c;
}
}  // namespace

TEST(Sgd, DecayGradientL2) {
  Tensor th = Tensor::from({1.0}), v;
  sgd_update(th, Tensor::from({0.0}), v, plain(0.1, 0.5, 2), 0);
  EXPECT_NEAR(th[0], 0.9, 1e-15);
}

TEST(Sgd, PlainStepExact) {
  Tensor th = Tensor::from({2.0}), v;
  sgd_update(th, Tensor::from({1.0}), v, plain(0.1, 0.0, 2), 0);
  EXPECT_EQ(th[0], 2.0 - 0.1 * 1.0);
}

TEST(Sgd, DecayGradientL1Sign) {
  Tensor th = Tensor::from({-3.0}), v;
  sgd_update(th, Tensor::from({0.0}), v, plain(0.1, 1.0, 1), 0);
  EXPECT_NEAR(th[0], -2.9, 1e-15);
  EXPECT_EQ(decay_gradient(0.0, 1.0, 1), 0.0);
}

TEST(Sgd, MomentumAccumulatesDecayedGradient) {
  Tensor th = Tensor::from({1.0}), v;
  OptimizerConfig c = plain(0.1, 0.5, 2, 0.9);
  sgd_update(th, Tensor::from({1.0}), v, c, 0);
  // v = 1 + 1 = 2; theta = 1 - 0.2
  EXPECT_NEAR(v[0], 2.0, 1e-15);
  EXPECT_NEAR(th[0], 0.8, 1e-15);
  sgd_update(th, Tensor::from({1.0}), v, c, 1);
  EXPECT_NEAR(v[0], 0.9 * 2.0 + 1.0 + 0.8, 1e-15);
}

TEST(Sgd, DecayScheduleMultipliers) {
  OptimizerConfig c = plain(0.1, 0.0, 2);
  c.decay_schedule = {{10, 0.1}, {20, 0.5}};
  EXPECT_DOUBLE_EQ(c.rate_at(9), 0.1);
  EXPECT_DOUBLE_EQ(c.rate_at(10), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(c.rate_at(25), 0.1 * 0.1 * 0.5);
  c.decay_schedule = {{10, 0.1}, {10, 0.1}};
  EXPECT_THROW(c.validate(), ConfigError);
  c.decay_schedule = {{10, 1.5}};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(plain(0.1, 0.0, 3).validate(), ConfigError);
  EXPECT_THROW(plain(0.1, 0.0, 2, 1.0).validate(), ConfigError);
}

TEST(Sgd, NonFiniteGradientNamesParameter) {
  Variable p(Tensor::from({1.0, 2.0}), true, "block.weight");
  p.mutable_grad()[1] = std::nan("");
  std::vector<Variable> params{p};
  Sgd opt(plain(0.1, 0.0, 2));
  try {
    opt.step(params);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block.weight"), std::string::npos);
  }
}

TEST(Sgd, MaskZeroesValueGradientAndMomentum) {
  Variable p(Tensor::from({1.0, 2.0, 3.0}), true, "w");
  p.mutable_grad() = Tensor::from({1.0, 1.0, 1.0});
  std::vector<Variable> params{p};
  WeightMask mask{{"w", {true, false, true}}};
  Sgd opt(plain(0.1, 1e-4, 2, 0.9));
  opt.step(params, &mask);
  EXPECT_EQ(p.value()[1], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
  EXPECT_EQ(opt.momentum_buffers().at("w")[1], 0.0);
  EXPECT_NE(p.value()[0], 0.0);
}

TEST(Sgd, WeightDecayAloneShrinksNorm) {
  std::mt19937_64 rng(9);
  Variable p(oracle::random_tensor({32}, rng), true, "w");
  std::vector<Variable> params{p};
  Sgd opt(plain(0.1, 1e-2, 2, 0.9));
  auto norm = [&] {
    double s = 0;
    for (double v : p.value().values()) s += v * v;
    return std::sqrt(s);
  };
  double prev = norm();
  for (int i = 0; i < 200; ++i) {
    p.mutable_grad().fill(0.0);
    opt.step(params);
    const double n = norm();
    ASSERT_LT(n, prev) << "step " << i;
    prev = n;
  }
}
