#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "abus/errors.hpp"
#include "abus/ops.hpp"
#include "abus/reference_ops.hpp"
#include "support/gradcheck.hpp"

using namespace abus;
using abus::testing::check_gradient;
using abus::testing::dot;
using abus::testing::random_tensor;
using abus::testing::random_vector;

namespace {

template <typename T>
ConvWeights<T> make_weights(const Shape& kernel_shape, std::mt19937_64& rng, Padding padding = Padding::same,
                            Extent3 stride = {1, 1, 1}, bool zero_bias = false) {
  ConvWeights<T> w;
  w.kernel = random_tensor<T>(kernel_shape, rng);
  w.bias = zero_bias ? std::vector<T>(static_cast<std::size_t>(kernel_shape[0]), T(0))
                     : random_vector<T>(static_cast<std::size_t>(kernel_shape[0]), rng);
  w.padding = padding;
  w.stride = stride;
  return w;
}

double max_rel_diff(const TensorF& a, const TensorF& b) {
  double worst = 0;
  for (Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / std::max(1.0, std::abs(double(b[i]))));
  return worst;
}

}  // namespace

TEST(Convolve, SumOfOnes) {
  ConvWeights<float> w;
  w.kernel = TensorF({1, 1, 2, 2, 2}, 1.0f);
  w.bias = {0.0f};
  w.padding = Padding::valid;
  TensorF out = convolve(TensorF({1, 1, 2, 2, 2}, 1.0f), w);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(out[0], 8.0f);
}

TEST(Convolve, IdentityKernel) {
  std::mt19937_64 rng(1);
  TensorF x = random_tensor<float>({2, 1, 3, 4, 5}, rng);
  ConvWeights<float> w;
  w.kernel = TensorF({1, 1, 1, 1, 1}, 1.0f);
  w.bias = {0.0f};
  EXPECT_EQ(convolve(x, w), x);
}

TEST(Convolve, MatchesNestedLoopReference) {
  std::mt19937_64 rng(2);
  TensorF x = random_tensor<float>({2, 3, 4, 4, 4}, rng);
  auto w = make_weights<float>({5, 3, 3, 3, 3}, rng);
  TensorF fast = convolve(x, w);
  TensorF slow = reference::convolve(x, w);
  ASSERT_EQ(fast.shape(), (Shape{2, 5, 4, 4, 4}));
  EXPECT_LT(max_rel_diff(fast, slow), 1e-5);
}

TEST(Convolve, StridedAndValidMatchReference) {
  std::mt19937_64 rng(3);
  TensorF x = random_tensor<float>({1, 2, 5, 6, 7}, rng);
  for (Padding p : {Padding::same, Padding::valid}) {
    auto w = make_weights<float>({3, 2, 3, 2, 3}, rng, p, {2, 1, 2});
    EXPECT_LT(max_rel_diff(convolve(x, w), reference::convolve(x, w)), 1e-5);
  }
  TensorF x2 = random_tensor<float>({2, 2, 9, 8}, rng);
  auto w2 = make_weights<float>({4, 2, 3, 3}, rng);
  EXPECT_LT(max_rel_diff(convolve(x2, w2), reference::convolve(x2, w2)), 1e-5);
}

TEST(Convolve, ShapeMismatchNamesBothShapes) {
  std::mt19937_64 rng(4);
  TensorF x({1, 2, 4, 4, 4});
  auto w = make_weights<float>({1, 3, 3, 3, 3}, rng);
  try {
    convolve(x, w);
    FAIL() << "expected ContractViolation";
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1x2x4x4x4)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(1x3x3x3x3)"), std::string::npos) << msg;
  }
}

TEST(TransposedConvolve, SingleVoxelBroadcast) {
  ConvWeights<float> w;
  w.kernel = TensorF({1, 1, 2, 2, 2}, 1.0f);
  w.bias = {0.0f};
  w.stride = {2, 2, 2};
  w.padding = Padding::valid;
  TensorF out = transposed_convolve(TensorF({1, 1, 1, 1, 1}, 1.0f), w);
  EXPECT_EQ(out, TensorF({1, 1, 2, 2, 2}, 1.0f));
}

TEST(TransposedConvolve, ZeroInputDoublesExtents) {
  std::mt19937_64 rng(5);
  auto w = make_weights<float>({4, 3, 2, 2, 2}, rng, Padding::valid, {2, 2, 2}, true);
  TensorF out = transposed_convolve(TensorF({2, 3, 3, 4, 5}), w);
  EXPECT_EQ(out.shape(), (Shape{2, 4, 6, 8, 10}));
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
  auto w2 = make_weights<float>({2, 3, 2, 2}, rng, Padding::same, {1, 2, 2}, true);
  EXPECT_EQ(transposed_convolve(TensorF({1, 3, 5, 7}), w2).shape(), (Shape{1, 2, 10, 14}));
}

TEST(TransposedConvolve, MatchesScatterAddAndConvAdjoint) {
  std::mt19937_64 rng(6);
  TensorF x = random_tensor<float>({2, 3, 3, 2, 4}, rng);
  auto w = make_weights<float>({2, 3, 2, 2, 2}, rng, Padding::valid, {2, 2, 2}, true);
  TensorF up = transposed_convolve(x, w);
  EXPECT_LT(max_rel_diff(up, reference::transposed_convolve(x, w)), 1e-5);

  // The strided convolution whose input gradient this is: swap channel axes.
  ConvWeights<float> conv;
  conv.kernel = TensorF({3, 2, 2, 2, 2});
  for (Index a = 0; a < 3; ++a)
    for (Index b = 0; b < 2; ++b)
      for (Index k = 0; k < 8; ++k) conv.kernel[(a * 2 + b) * 8 + k] = w.kernel[(b * 3 + a) * 8 + k];
  conv.bias = {0.0f, 0.0f, 0.0f};
  conv.stride = {2, 2, 2};
  conv.padding = Padding::valid;
  TensorF dummy(up.shape());
  TensorF adjoint = convolve_backward(dummy, conv, x).input;
  EXPECT_LT(max_rel_diff(up, adjoint), 1e-5);
}

TEST(TransposedConvolve, SamePaddingNeedsKernelAtLeastStride) {
  std::mt19937_64 rng(7);
  auto w = make_weights<float>({1, 1, 1, 1, 1}, rng, Padding::same, {2, 2, 2});
  EXPECT_THROW(transposed_convolve(TensorF({1, 1, 2, 2, 2}), w), ContractViolation);
}

TEST(LinearOps, LinearityAndAdjointIdentity) {
  std::mt19937_64 rng(8);
  const Shape xs{2, 3, 4, 4, 4};
  auto w = make_weights<double>({2, 3, 3, 3, 3}, rng, Padding::same, {1, 1, 1}, true);
  TensorD x = random_tensor<double>(xs, rng), y = random_tensor<double>(xs, rng);
  const double alpha = 0.7, beta = -1.3;
  TensorD mix(xs);
  for (Index i = 0; i < mix.size(); ++i) mix[i] = alpha * x[i] + beta * y[i];
  TensorD fmix = convolve(mix, w), fx = convolve(x, w), fy = convolve(y, w);
  for (Index i = 0; i < fmix.size(); ++i) EXPECT_NEAR(fmix[i], alpha * fx[i] + beta * fy[i], 1e-5);

  TensorD probe = random_tensor<double>(fx.shape(), rng);
  const double lhs = dot<double>(fx.values(), probe.values());
  const double rhs = dot<double>(x.values(), convolve_backward(x, w, probe).input.values());
  EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-4);

  auto wt = make_weights<double>({2, 3, 2, 2, 2}, rng, Padding::valid, {2, 2, 2}, true);
  TensorD small = random_tensor<double>({1, 3, 2, 3, 2}, rng);
  TensorD small2 = random_tensor<double>({1, 3, 2, 3, 2}, rng);
  TensorD tmix(small.shape());
  for (Index i = 0; i < tmix.size(); ++i) tmix[i] = alpha * small[i] + beta * small2[i];
  TensorD t1 = transposed_convolve(small, wt), t2 = transposed_convolve(small2, wt), tm = transposed_convolve(tmix, wt);
  for (Index i = 0; i < tm.size(); ++i) EXPECT_NEAR(tm[i], alpha * t1[i] + beta * t2[i], 1e-5);
  TensorD tprobe = random_tensor<double>(t1.shape(), rng);
  const double tl = dot<double>(t1.values(), tprobe.values());
  const double tr = dot<double>(small.values(), transposed_convolve_backward(small, wt, tprobe).input.values());
  EXPECT_LT(std::abs(tl - tr) / std::abs(tl), 1e-4);
}

TEST(MaxPool, WindowMaximumAndArgmax) {
  TensorF x({1, 1, 2, 2, 2});
  const float vals[] = {3, 8, 1, 5, 2, 7, 4, 6};
  for (int i = 0; i < 8; ++i) x[i] = vals[i];
  auto r = max_pool(x);
  ASSERT_EQ(r.output.size(), 1);
  EXPECT_EQ(r.output[0], 8.0f);
  EXPECT_EQ(r.argmax[0], 1);
}

TEST(MaxPool, ConstantAndTieBreak) {
  auto r = max_pool(TensorF({1, 2, 4, 4, 4}, 2.5f));
  EXPECT_EQ(r.output, TensorF({1, 2, 2, 2, 2}, 2.5f));
  // Every window ties; the winner is its first (lowest linear index) element.
  EXPECT_EQ(r.argmax[0], 0);
  EXPECT_EQ(r.argmax[1], 2);
  auto r2 = max_pool(TensorF({1, 1, 4, 4}, 1.0f));
  EXPECT_EQ(r2.output.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(r2.argmax[3], 10);
}

TEST(MaxPool, OddExtentRejected) {
  EXPECT_THROW(max_pool(TensorF({1, 1, 3, 4, 4})), ContractViolation);
  EXPECT_THROW(max_pool(TensorF({1, 1, 4, 5})), ContractViolation);
}

TEST(MaxPool, GradientMassConserved) {
  std::mt19937_64 rng(9);
  TensorD x = random_tensor<double>({2, 3, 4, 6, 8}, rng);
  auto r = max_pool(x);
  TensorD g = random_tensor<double>(r.output.shape(), rng);
  TensorD gin = max_pool_backward(x.shape(), r.argmax, g);
  const double in_sum = std::accumulate(gin.values().begin(), gin.values().end(), 0.0);
  const double out_sum = std::accumulate(g.values().begin(), g.values().end(), 0.0);
  EXPECT_NEAR(in_sum, out_sum, 1e-12);
  for (Index o = 0; o < g.size(); ++o) EXPECT_EQ(gin[r.argmax[o]], g[o]);
}

TEST(BatchNorm, NormalizedInputIsFixedPoint) {
  std::mt19937_64 rng(10);
  TensorD x = random_tensor<double>({4, 2, 4, 4, 4}, rng);
  for (Index c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    const Index vol = 64;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < vol; ++i) m += x.plane(n, c)[i];
    m /= 256;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < vol; ++i) v += std::pow(x.plane(n, c)[i] - m, 2);
    const double sd = std::sqrt(v / 256);
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < vol; ++i) x.plane(n, c)[i] = (x.plane(n, c)[i] - m) / sd;
  }
  auto state = BatchNormState<double>::fresh(2);
  TensorD y = batch_norm(x, state);
  for (Index i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-3);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  std::mt19937_64 rng(11);
  auto state = BatchNormState<float>::fresh(3);
  state.gamma = {0, 0, 0};
  state.beta = {0.5f, -1.0f, 2.0f};
  TensorF y = batch_norm(random_tensor<float>({2, 3, 4, 4}, rng), state);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 16; ++i) EXPECT_EQ(y.plane(n, c)[i], state.beta[static_cast<std::size_t>(c)]);
}

TEST(BatchNorm, TrainModeMomentsAndRunningUpdate) {
  std::mt19937_64 rng(12);
  TensorD x = random_tensor<double>({3, 4, 4, 4, 4}, rng, -3.0, 5.0);
  auto state = BatchNormState<double>::fresh(4);
  BatchNormCache<double> cache;
  TensorD y = batch_norm(x, state, &cache);
  for (Index c = 0; c < 4; ++c) {
    double m = 0, q = 0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 64; ++i) m += y.plane(n, c)[i];
    m /= 192;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 64; ++i) q += std::pow(y.plane(n, c)[i] - m, 2);
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(q / 192, 1.0, 1e-4);
    const auto ci = static_cast<std::size_t>(c);
    EXPECT_NEAR(state.running_mean[ci], 0.1 * cache.mean[ci], 1e-12);
    EXPECT_NEAR(state.running_var[ci], 0.9 + 0.1 * cache.variance[ci], 1e-12);
  }
  state.mode = BatchNormMode::infer;
  state.running_mean = cache.mean;
  state.running_var = cache.variance;
  TensorD yi = batch_norm(x, state);
  EXPECT_EQ(yi, y);
}

TEST(BatchNorm, ChannelMismatchRejected) {
  auto state = BatchNormState<float>::fresh(2);
  EXPECT_THROW(batch_norm(TensorF({1, 3, 2, 2}), state), ContractViolation);
}

TEST(Relu, Examples) {
  TensorF x({1, 3, 1, 1});
  x[0] = -1;
  x[1] = 0;
  x[2] = 2;
  TensorF y = relu(x);
  EXPECT_EQ(y[0], 0.0f);
  EXPECT_EQ(y[1], 0.0f);
  EXPECT_EQ(y[2], 2.0f);
  TensorF pos({1, 2, 2, 2}, 3.0f);
  EXPECT_EQ(relu(pos), pos);
  TensorF g({1, 3, 1, 1}, 1.0f);
  TensorF gx = relu_backward(x, g);
  EXPECT_EQ(gx[0], 0.0f);
  EXPECT_EQ(gx[1], 0.0f);  // subgradient 0 at exactly 0
  EXPECT_EQ(gx[2], 1.0f);
}

TEST(Softmax, SymmetryStabilityAndNormalization) {
  TensorF eq({1, 2, 1, 1}, 0.3f);
  TensorF p = softmax_over_channels(eq);
  EXPECT_FLOAT_EQ(p[0], 0.5f);
  EXPECT_FLOAT_EQ(p[1], 0.5f);
  TensorF big({1, 2, 1, 1});
  big[0] = 1000.0f;
  big[1] = 0.0f;
  TensorF pb = softmax_over_channels(big);
  EXPECT_EQ(pb[0], 1.0f);
  EXPECT_EQ(pb[1], 0.0f);
  std::mt19937_64 rng(13);
  TensorD logits = random_tensor<double>({3, 4, 3, 5, 2}, rng, -20, 20);
  TensorD probs = softmax_over_channels(logits);
  const Index vol = 30;
  for (Index n = 0; n < 3; ++n)
    for (Index v = 0; v < vol; ++v) {
      double s = 0;
      for (Index c = 0; c < 4; ++c) s += probs.plane(n, c)[v];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  EXPECT_THROW(softmax_over_channels(TensorF({1, 1, 2, 2})), ContractViolation);
}

TEST(Concat, ChannelsAddAndRoundTrip) {
  std::mt19937_64 rng(14);
  TensorF a = random_tensor<float>({2, 4, 3, 4, 5}, rng), b = random_tensor<float>({2, 8, 3, 4, 5}, rng);
  TensorF c = concat_channels(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 12, 3, 4, 5}));
  auto [a2, b2] = split_channels(c, 4);
  EXPECT_EQ(a2, a);
  EXPECT_EQ(b2, b);
  EXPECT_THROW(concat_channels(a, TensorF({2, 1, 3, 4, 6})), ContractViolation);
  // A zero-channel operand cannot even be constructed.
  EXPECT_THROW(TensorF({2, 0, 3, 4, 5}), ContractViolation);
}

// Double-precision finite-difference checks; loss = <f(x), probe>.
class GradientCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  static constexpr double kTol = 1e-5;
};

TEST_F(GradientCheck, Convolution) {
  TensorD x = random_tensor<double>({2, 2, 3, 4, 4}, rng);
  auto w = make_weights<double>({3, 2, 3, 3, 3}, rng);
  TensorD probe = random_tensor<double>({2, 3, 3, 4, 4}, rng);
  auto loss = [&] { return dot<double>(convolve(x, w).values(), probe.values()); };
  auto g = convolve_backward(x, w, probe);
  int checked = 0;
  auto r1 = check_gradient(x.values(), g.input.values(), loss, 60, rng);
  auto r2 = check_gradient(w.kernel.values(), g.kernel.values(), loss, 60, rng);
  auto r3 = check_gradient(w.bias, g.bias, loss, 60, rng);
  checked = r1.checked + r2.checked + r3.checked;
  EXPECT_GE(checked, 100);
  EXPECT_LT(r1.max_relative_error, kTol);
  EXPECT_LT(r2.max_relative_error, kTol);
  EXPECT_LT(r3.max_relative_error, kTol);
}

TEST_F(GradientCheck, TransposedConvolution) {
  TensorD x = random_tensor<double>({2, 3, 2, 3, 2}, rng);
  auto w = make_weights<double>({2, 3, 2, 2, 2}, rng, Padding::valid, {2, 2, 2});
  TensorD probe = random_tensor<double>({2, 2, 4, 6, 4}, rng);
  auto loss = [&] { return dot<double>(transposed_convolve(x, w).values(), probe.values()); };
  auto g = transposed_convolve_backward(x, w, probe);
  auto r1 = check_gradient(x.values(), g.input.values(), loss, 60, rng);
  auto r2 = check_gradient(w.kernel.values(), g.kernel.values(), loss, 60, rng);
  auto r3 = check_gradient(w.bias, g.bias, loss, 60, rng);
  EXPECT_GE(r1.checked + r2.checked + r3.checked, 100);
  EXPECT_LT(r1.max_relative_error, kTol);
  EXPECT_LT(r2.max_relative_error, kTol);
  EXPECT_LT(r3.max_relative_error, kTol);
}

TEST_F(GradientCheck, MaxPool) {
  // A permutation keeps all window entries well separated relative to the step.
  TensorD x({2, 2, 4, 4, 4});
  std::vector<double> perm(static_cast<std::size_t>(x.size()));
  std::iota(perm.begin(), perm.end(), 0.0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (Index i = 0; i < x.size(); ++i) x[i] = perm[static_cast<std::size_t>(i)] * 0.01;
  auto pooled = max_pool(x);
  TensorD probe = random_tensor<double>(pooled.output.shape(), rng);
  auto loss = [&] { return dot<double>(max_pool(x).output.values(), probe.values()); };
  TensorD g = max_pool_backward(x.shape(), pooled.argmax, probe);
  auto r = check_gradient(x.values(), g.values(), loss, 120, rng);
  EXPECT_GE(r.checked, 100);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST_F(GradientCheck, BatchNormTrainMode) {
  TensorD x = random_tensor<double>({2, 3, 2, 4, 4}, rng, -2, 3);
  auto state = BatchNormState<double>::fresh(3);
  state.gamma = random_vector<double>(3, rng, 0.5, 1.5);
  state.beta = random_vector<double>(3, rng);
  TensorD probe = random_tensor<double>(x.shape(), rng);
  auto loss = [&] {
    auto s = state;
    return dot<double>(batch_norm(x, s).values(), probe.values());
  };
  auto s = state;
  BatchNormCache<double> cache;
  batch_norm(x, s, &cache);
  auto g = batch_norm_backward(state, cache, probe);
  auto r1 = check_gradient(x.values(), g.input.values(), loss, 100, rng);
  auto r2 = check_gradient(state.gamma, g.gamma, loss, 10, rng);
  auto r3 = check_gradient(state.beta, g.beta, loss, 10, rng);
  EXPECT_GE(r1.checked, 100);
  EXPECT_LT(r1.max_relative_error, kTol);
  EXPECT_LT(r2.max_relative_error, kTol);
  EXPECT_LT(r3.max_relative_error, kTol);
}

TEST_F(GradientCheck, ReluAwayFromKink) {
  TensorD x = random_tensor<double>({2, 3, 4, 4, 4}, rng);
  TensorD probe = random_tensor<double>(x.shape(), rng);
  auto loss = [&] { return dot<double>(relu(x).values(), probe.values()); };
  TensorD g = relu_backward(x, probe);
  auto r = check_gradient(x.values(), g.values(), loss, 150, rng, 1e-4,
                          [&](std::size_t i) { return std::abs(x.values()[i]) > 1e-3; });
  EXPECT_GE(r.checked, 100);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST_F(GradientCheck, Softmax) {
  TensorD x = random_tensor<double>({2, 3, 2, 4, 4}, rng, -3, 3);
  TensorD probe = random_tensor<double>(x.shape(), rng);
  auto loss = [&] { return dot<double>(softmax_over_channels(x).values(), probe.values()); };
  TensorD g = softmax_backward(softmax_over_channels(x), probe);
  auto r = check_gradient(x.values(), g.values(), loss, 120, rng);
  EXPECT_GE(r.checked, 100);
  EXPECT_LT(r.max_relative_error, kTol);
}

TEST_F(GradientCheck, ConcatAndInterpolate) {
  TensorD a = random_tensor<double>({1, 2, 4, 4, 4}, rng), b = random_tensor<double>({1, 3, 4, 4, 4}, rng);
  TensorD probe = random_tensor<double>({1, 5, 4, 4, 4}, rng);
  auto loss = [&] { return dot<double>(concat_channels(a, b).values(), probe.values()); };
  auto [ga, gb] = split_channels(probe, 2);
  auto r1 = check_gradient(a.values(), ga.values(), loss, 60, rng);
  auto r2 = check_gradient(b.values(), gb.values(), loss, 60, rng);
  EXPECT_LT(std::max(r1.max_relative_error, r2.max_relative_error), kTol);

  const LinearMap3 maps{LinearAxisMap::sampling(4, 6, 0.75, 0.5), LinearAxisMap::sampling(4, 4, 0.3, 0.8),
                        LinearAxisMap::sampling(4, 8, -0.2, 0.5)};
  TensorD y = interpolate(a, maps);
  TensorD iprobe = random_tensor<double>(y.shape(), rng);
  auto iloss = [&] { return dot<double>(interpolate(a, maps).values(), iprobe.values()); };
  TensorD gi = interpolate_backward(a.shape(), maps, iprobe);
  auto r3 = check_gradient(a.values(), gi.values(), iloss, 128, rng);
  EXPECT_GE(r3.checked, 100);
  EXPECT_LT(r3.max_relative_error, kTol);
}
