#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "smlp/layers.hpp"
#include "smlp/verification.hpp"

using namespace smlp;

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = 2.0 * uniform01(rng) - 1.0;
  return t;
}

}  // namespace

TEST(Linear, IdentityWeightCopiesInput) {
  Rng rng(0);
  Linear<double> fc(3, 3, true, rng);
  fc.weight().value = Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape<double> tape(false);
  const Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(fc.forward(tape, tape.constant(x)).value(), x);
}

TEST(Linear, HandComputedWithBias) {
  Rng rng(0);
  Linear<double> fc(2, 1, true, rng);
  fc.weight().value = Tensor<double>({1, 2}, {0.5, 1.0});
  fc.bias().value = Tensor<double>({1}, {1.0});
  Tape<double> tape(false);
  // 0.5 * 1 + 1.0 * 2 + 1 = 3.5
  const auto y = fc.forward(tape, tape.constant(Tensor<double>({1, 2}, {1, 2}))).value();
  EXPECT_EQ(y[0], 3.5);
}

TEST(Linear, TrailingExtentMismatchIsAnError) {
  Rng rng(0);
  Linear<double> fc(4, 2, false, rng);
  Tape<double> tape(false);
  EXPECT_THROW(fc.forward(tape, tape.constant(Tensor<double>({3, 5}))), ShapeError);
}

TEST(Linear, ParameterCount) {
  Rng rng(0);
  EXPECT_EQ(Linear<float>(7, 5, true, rng).param_count(), 40u);
  EXPECT_EQ(Linear<float>(7, 5, false, rng).param_count(), 35u);
}

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
  Rng rng(1);
  DepthwiseConv3x3<double> conv(2, false, rng);
  auto& k = conv.kernel().value;
  k.fill(0.0);
  k.at({0, 1, 1}) = 1.0;
  k.at({1, 1, 1}) = 1.0;
  const auto x = random_tensor({1, 4, 5, 2}, rng);
  Tape<double> tape(false);
  EXPECT_EQ(conv.forward(tape, tape.constant(x)).value(), x);
}

TEST(DepthwiseConv, OnesKernelCountsNeighbours) {
  Rng rng(1);
  DepthwiseConv3x3<double> conv(3, false, rng);
  conv.kernel().value.fill(1.0);
  Tensor<double> x({1, 4, 4, 3});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i % 3 + 1);
  Tape<double> tape(false);
  const auto y = conv.forward(tape, tape.constant(x)).value();
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(y.at({0, 1, 2, c}), 9.0 * static_cast<double>(c + 1));  // interior
    EXPECT_EQ(y.at({0, 0, 0, c}), 4.0 * static_cast<double>(c + 1));  // corner sees 2x2 of zero-padded input
    EXPECT_EQ(y.at({0, 0, 2, c}), 6.0 * static_cast<double>(c + 1));  // edge
  }
}

TEST(DepthwiseConv, ChannelsDoNotLeak) {
  Rng rng(2);
  DepthwiseConv3x3<double> conv(3, true, rng);
  Tensor<double> x({1, 5, 5, 3});
  for (std::size_t i = 0; i < 25; ++i) x[i * 3 + 1] = 1.0;  // only channel 1 is nonzero
  Tape<double> tape(false);
  const auto y = conv.forward(tape, tape.constant(x)).value();
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_EQ(y[i * 3 + 0], 0.0);
    EXPECT_EQ(y[i * 3 + 2], 0.0);
  }
}

TEST(DepthwiseConv, ChannelMismatchIsAnError) {
  Rng rng(0);
  DepthwiseConv3x3<double> conv(3, false, rng);
  Tape<double> tape(false);
  EXPECT_THROW(conv.forward(tape, tape.constant(Tensor<double>({1, 4, 4, 2}))), ShapeError);
}

TEST(Norm, BatchNormOfConstantInputIsZero) {
  Norm<double> bn(NormKind::batch, 2);
  Tape<double> tape(false);
  const auto y = bn.forward(tape, tape.constant(Tensor<double>({3, 2, 2, 2}, 4.0)), Mode::train).value();
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Norm, LayerNormOfTwoValues) {
  Norm<double> ln(NormKind::layer, 2);
  Tape<double> tape(false);
  const auto y = ln.forward(tape, tape.constant(Tensor<double>({1, 2}, {1, 3})), Mode::train).value();
  // mean 2, population variance 1: (x - 2) / sqrt(1 + 1e-5)
  EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(Norm, EvalBatchNormWithUnitStatsIsNearIdentity) {
  Norm<double> bn(NormKind::batch, 3);
  Rng rng(4);
  const auto x = random_tensor({2, 3, 3, 3}, rng);
  Tape<double> tape(false);
  const auto y = bn.forward(tape, tape.constant(x), Mode::eval).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(Norm, RunningStatisticsUpdate) {
  Norm<double> bn(NormKind::batch, 1);
  Tape<double> tape(false);
  // Batch {1, 3}: mean 2, unbiased variance 2.
  bn.forward(tape, tape.constant(Tensor<double>({2, 1}, {1, 3})), Mode::train);
  EXPECT_NEAR(bn.running_mean()[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(bn.running_var()[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
  bn.forward(tape, tape.constant(Tensor<double>({2, 1}, {1, 3})), Mode::eval);
  EXPECT_NEAR(bn.running_mean()[0], 0.2, 1e-15);
}

TEST(DropPath, ZeroRateIsIdentity) {
  DropPath<double> dp(0.0);
  Rng rng(0);
  Tape<double> tape(false);
  const auto x = random_tensor({4, 2, 2, 3}, rng);
  EXPECT_EQ(dp.forward(tape.constant(x), Mode::train, &rng).value(), x);
}

TEST(DropPath, EvalModeIsIdentity) {
  DropPath<double> dp(0.5);
  Rng rng(0);
  Tape<double> tape(false);
  const auto x = random_tensor({4, 3}, rng);
  EXPECT_EQ(dp.forward(tape.constant(x), Mode::eval, nullptr).value(), x);
}

TEST(DropPath, PreservesExpectationPerSample) {
  DropPath<double> dp(0.3);
  Rng rng(7);
  Tape<double> tape(false);
  const std::size_t n = 10000;
  const auto y = dp.forward(tape.constant(Tensor<double>({n, 2}, 1.0)), Mode::train, &rng).value();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(y[2 * i], y[2 * i + 1]);  // one decision per sample
    EXPECT_TRUE(y[2 * i] == 0.0 || std::abs(y[2 * i] - 1.0 / 0.7) < 1e-12);
    total += y[2 * i];
  }
  const double mean = total / static_cast<double>(n);
  EXPECT_GT(mean, 0.97);
  EXPECT_LT(mean, 1.03);
}

TEST(DropPath, RateOfOneIsRejected) {
  EXPECT_THROW(DropPath<double>(1.0), ConfigError);
  EXPECT_THROW(DropPath<double>(-0.1), ConfigError);
}

TEST(LayerGradients, AllLayersPassFiniteDifferences) {
  for (const auto& c : verify::layer_gradchecks(0)) {
    EXPECT_TRUE(c.passed()) << c.name << " max rel error " << c.result.max_rel_error;
  }
}
