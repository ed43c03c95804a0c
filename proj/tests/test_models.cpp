#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "abus/errors.hpp"
#include "abus/model.hpp"
#include "support/gradcheck.hpp"

using namespace abus;
using abus::testing::check_gradient;
using abus::testing::random_tensor;

namespace {

ModelConfig tiny(int dims, int depth, int c0, bool dual = false) {
  ModelConfig c;
  c.dimensionality = dims;
  c.depth = depth;
  c.base_channels = c0;
  c.dual_path = dual;
  return c;
}

// Closed-form parameter count of one path up to (not including) the head.
Index path_count_closed_form(const ModelConfig& c) {
  const Index k3 = c.dimensionality == 3 ? 27 : 9;
  const Index k2 = c.dimensionality == 3 ? 8 : 4;
  auto conv = [](Index in, Index out, Index kvol) { return in * out * kvol + out; };
  Index total = 0;
  Index in = c.in_channels;
  for (int l = 0; l <= c.depth; ++l) {
    const Index ch = c.channels_at(l);
    total += conv(in, ch, k3) + 2 * ch + conv(ch, ch, k3) + 2 * ch;
    in = ch;
  }
  for (int l = 0; l < c.depth; ++l) {
    const Index ch = c.channels_at(l);
    total += conv(c.channels_at(l + 1), ch, k2) + conv(2 * ch, ch, k3) + conv(ch, ch, k3);
  }
  return total;
}

Index head_count(const ModelConfig& c) {
  const Index in = c.base_channels * (c.dual_path ? 2 : 1);
  return in * c.num_labels + c.num_labels;
}

void zero_head(Model& m) {
  for (auto& p : m.parameters())
    if (p.name.rfind("head", 0) == 0) std::fill(p.value.begin(), p.value.end(), 0.0f);
}

}  // namespace

TEST(Model, ShapeExample3d) {
  Model m = build_unet(tiny(3, 2, 8), 1);
  TensorF out = m.forward(TensorF({1, 1, 16, 32, 32}, 0.5f), Mode::infer);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 16, 32, 32}));
}

TEST(Model, ShapeExample2dPatch80) {
  Model m = build_unet(tiny(2, 2, 8), 1);
  std::mt19937_64 rng(3);
  TensorF out = m.forward(random_tensor<float>({1, 1, 80, 80}, rng), Mode::infer);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 80, 80}));
}

TEST(Model, DualPathShape) {
  ModelConfig c = tiny(3, 2, 8, true);
  Model m = build_dual_path_unet(c, 1);
  std::vector<TensorF> in{TensorF({1, 1, 16, 32, 32}, 0.1f), TensorF({1, 1, 16, 32, 32}, 0.2f)};
  EXPECT_EQ(m.forward(in, Mode::infer).shape(), (Shape{1, 2, 16, 32, 32}));
}

TEST(Model, ParameterCountClosedForm) {
  const ModelConfig c = tiny(3, 1, 1);
  EXPECT_EQ(path_count_closed_form(c) + head_count(c), 338);
  EXPECT_EQ(build_unet(c, 0).parameter_count(), 338);
  for (int dims : {2, 3})
    for (int depth : {1, 2, 3}) {
      ModelConfig s = tiny(dims, depth, 3);
      s.num_labels = 3;
      EXPECT_EQ(build_unet(s, 0).parameter_count(), path_count_closed_form(s) + head_count(s));
    }
}

TEST(Model, DualParameterCount) {
  ModelConfig c = tiny(3, 2, 8, true);
  EXPECT_EQ(build_dual_path_unet(c, 0).parameter_count(), 2 * path_count_closed_form(c) + head_count(c));
}

TEST(Model, ZeroFusionHeadGivesUniformSoftmax) {
  Model m = build_dual_path_unet(tiny(3, 2, 4, true), 5);
  zero_head(m);
  std::mt19937_64 rng(1);
  std::vector<TensorF> in{random_tensor<float>({1, 1, 8, 8, 8}, rng), random_tensor<float>({1, 1, 8, 8, 8}, rng)};
  TensorF logits = m.forward(in, Mode::infer);
  for (float v : logits.values()) ASSERT_EQ(v, 0.0f);
}

TEST(Model, InferIsDeterministic) {
  Model m = build_unet(tiny(3, 2, 4), 9);
  std::mt19937_64 rng(2);
  TensorF x = random_tensor<float>({2, 1, 8, 16, 16}, rng);
  EXPECT_EQ(m.forward(x, Mode::infer), m.forward(x, Mode::infer));
}

TEST(Model, TrainEqualsInferAfterCommittingBatchStatistics) {
  BasicModel<double> m(tiny(3, 2, 3), 4);
  std::mt19937_64 rng(5);
  TensorD x = random_tensor<double>({2, 1, 8, 8, 8}, rng);
  TensorD train = m.forward(x, Mode::train);
  m.commit_batch_statistics();
  TensorD infer = m.forward(x, Mode::infer);
  for (Index i = 0; i < train.size(); ++i) ASSERT_NEAR(train[i], infer[i], 1e-9);
}

TEST(Model, CommitWithoutTrainForwardThrows) {
  Model m = build_unet(tiny(3, 1, 2), 0);
  EXPECT_THROW(m.commit_batch_statistics(), StateError);
}

TEST(Model, ZeroGradLogitsGiveZeroGradients) {
  Model m = build_dual_path_unet(tiny(3, 1, 2, true), 3);
  std::mt19937_64 rng(6);
  std::vector<TensorF> in{random_tensor<float>({2, 1, 4, 4, 4}, rng), random_tensor<float>({2, 1, 4, 4, 4}, rng)};
  TensorF logits = m.forward(in, Mode::train);
  m.backward(TensorF(logits.shape(), 0.0f));
  for (auto& p : m.parameters())
    for (float g : p.grad) ASSERT_EQ(g, 0.0f) << p.name;
}

TEST(Model, BackwardTwiceIsIdentical) {
  Model m = build_unet(tiny(3, 1, 2), 3);
  std::mt19937_64 rng(7);
  TensorF logits = m.forward(random_tensor<float>({2, 1, 4, 4, 4}, rng), Mode::train);
  TensorF g = random_tensor<float>(logits.shape(), rng);
  m.backward(g);
  std::vector<std::vector<float>> first;
  for (auto& p : m.parameters()) first.emplace_back(p.grad.begin(), p.grad.end());
  m.backward(g);
  std::size_t i = 0;
  for (auto& p : m.parameters()) EXPECT_EQ(std::vector<float>(p.grad.begin(), p.grad.end()), first[i++]);
}

TEST(Model, BackwardWithoutForwardIsStateError) {
  Model m = build_unet(tiny(3, 1, 2), 0);
  EXPECT_THROW(m.backward(TensorF({1, 2, 4, 4, 4})), StateError);
  m.forward(TensorF({1, 1, 4, 4, 4}), Mode::infer);
  EXPECT_THROW(m.backward(TensorF({1, 2, 4, 4, 4})), StateError);
}

TEST(Model, ContractAndConfigErrors) {
  Model m = build_unet(tiny(3, 2, 2), 0);
  EXPECT_THROW(m.forward(TensorF({1, 1, 6, 8, 8}), Mode::infer), ContractViolation);
  EXPECT_THROW(m.forward(TensorF({1, 2, 8, 8, 8}), Mode::infer), ContractViolation);
  EXPECT_THROW(m.forward(TensorF({1, 1, 8, 8}), Mode::infer), ContractViolation);
  std::vector<TensorF> two{TensorF({1, 1, 8, 8, 8}), TensorF({1, 1, 8, 8, 8})};
  EXPECT_THROW(m.forward(two, Mode::infer), ContractViolation);

  EXPECT_THROW(build_unet(tiny(3, 2, 2, true), 0), ConfigError);
  EXPECT_THROW(build_dual_path_unet(tiny(3, 2, 2), 0), ConfigError);
  ModelConfig bad = tiny(4, 2, 2);
  EXPECT_THROW(build_model(bad, 0), ConfigError);
  bad = tiny(3, 0, 2);
  EXPECT_THROW(build_model(bad, 0), ConfigError);
  bad = tiny(3, 2, 2);
  bad.num_labels = 1;
  EXPECT_THROW(build_model(bad, 0), ConfigError);
  bad = tiny(3, 2, 2, true);
  bad.second_path_scale = 1.0;
  EXPECT_THROW(build_model(bad, 0), ConfigError);
}

TEST(Model, BatchEquivarianceInInferMode) {
  Model m = build_unet(tiny(3, 2, 3), 8);
  std::mt19937_64 rng(8);
  TensorF x = random_tensor<float>({3, 1, 4, 8, 8}, rng);
  const Index plane = x.size() / 3;
  TensorF perm(x.shape());
  const int order[3] = {2, 0, 1};
  for (int b = 0; b < 3; ++b) std::copy_n(x.data() + order[b] * plane, plane, perm.data() + b * plane);
  TensorF a = m.forward(x, Mode::infer);
  TensorF p = m.forward(perm, Mode::infer);
  const Index out_plane = a.size() / 3;
  for (int b = 0; b < 3; ++b)
    for (Index i = 0; i < out_plane; ++i) ASSERT_EQ(p[b * out_plane + i], a[order[b] * out_plane + i]);
}

TEST(Model, ZeroedSecondPathFusionIgnoresPathTwo) {
  ModelConfig c = tiny(3, 2, 4, true);
  Model m = build_dual_path_unet(c, 2);
  for (auto& p : m.parameters())
    if (p.name == "head.kernel")
      for (Index o = 0; o < p.shape[0]; ++o)
        for (Index i = c.base_channels; i < p.shape[1]; ++i) p.value[static_cast<std::size_t>(o * p.shape[1] + i)] = 0;
  std::mt19937_64 rng(4);
  TensorF x1 = random_tensor<float>({1, 1, 8, 8, 8}, rng);
  std::vector<TensorF> a{x1, random_tensor<float>({1, 1, 8, 8, 8}, rng)};
  std::vector<TensorF> b{x1, random_tensor<float>({1, 1, 8, 8, 8}, rng)};
  EXPECT_EQ(m.forward(a, Mode::infer), m.forward(b, Mode::infer));
}

TEST(Model, StateRoundTrip) {
  Model a = build_unet(tiny(3, 2, 2), 1);
  Model b = build_unet(tiny(3, 2, 2), 2);
  b.load_state(a.state());
  EXPECT_EQ(a.state(), b.state());
  Model other = build_unet(tiny(3, 2, 3), 1);
  EXPECT_THROW(other.load_state(a.state()), ContractViolation);
}

TEST(Model, FusionAxisTransformIsConcentric) {
  const auto t = fusion_axis_transform(16, 0.5);
  const double c = 7.5;
  EXPECT_DOUBLE_EQ(t[0] + t[1] * c, c);
  EXPECT_DOUBLE_EQ(t[1], 0.5);
}

// Loss <logits, R> for a fixed random R; every parameter and every input
// voxel is checked against central differences.
class WholeModelGradient : public ::testing::TestWithParam<bool> {};

TEST_P(WholeModelGradient, MatchesFiniteDifferences) {
  const bool dual = GetParam();
  BasicModel<double> m(tiny(3, 1, 2, dual), 11);
  std::mt19937_64 rng(12);
  std::vector<TensorD> in;
  for (Index p = 0; p < m.path_count(); ++p) in.push_back(random_tensor<double>({1, 1, 4, 4, 4}, rng));
  TensorD logits = m.forward(in, Mode::train);
  TensorD r = random_tensor<double>(logits.shape(), rng);
  m.backward(r);
  auto loss = [&] {
    TensorD y = m.forward(in, Mode::train);
    double s = 0;
    for (Index i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  double worst = 0;
  int checked = 0;
  for (auto& p : m.parameters()) {
    std::vector<double> analytic(p.grad.begin(), p.grad.end());
    auto res = check_gradient(p.value, analytic, loss, 20, rng);
    worst = std::max(worst, res.max_relative_error);
    checked += res.checked;
  }
  for (std::size_t k = 0; k < in.size(); ++k) {
    const TensorD& g = m.input_gradients()[k];
    std::vector<double> analytic(g.values().begin(), g.values().end());
    auto res = check_gradient(in[k].values(), analytic, loss, 64, rng);
    worst = std::max(worst, res.max_relative_error);
    checked += res.checked;
  }
  EXPECT_GE(checked, 100);
  EXPECT_LT(worst, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(SingleAndDual, WholeModelGradient, ::testing::Values(false, true));

TEST(Model, WholeModelGradient2d) {
  BasicModel<double> m(tiny(2, 1, 2), 13);
  std::mt19937_64 rng(14);
  TensorD x = random_tensor<double>({1, 1, 4, 4}, rng);
  TensorD r = random_tensor<double>(m.forward(x, Mode::train).shape(), rng);
  m.backward(r);
  auto loss = [&] {
    TensorD y = m.forward(x, Mode::train);
    double s = 0;
    for (Index i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  double worst = 0;
  for (auto& p : m.parameters()) {
    std::vector<double> analytic(p.grad.begin(), p.grad.end());
    worst = std::max(worst, check_gradient(p.value, analytic, loss, 20, rng).max_relative_error);
  }
  EXPECT_LT(worst, 1e-4);
}
