#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "beamsight/graph.hpp"
#include "beamsight/testing/gradcheck.hpp"

namespace bs = beamsight;

namespace beamsight {
inline void PrintTo(OpKind k, std::ostream* os) { *os << to_string(k); }
}  // namespace beamsight
using bs::Graph;
using bs::Mode;
using bs::Tensor;

TEST(TensorCore, TensorRejectsMismatchedElementCount) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), bs::Error);
  EXPECT_THROW(Tensor<double>(bs::Shape{0, 3}), bs::Error);
}

TEST(TensorCore, IdentityOneByOneConvLeavesInputUnchanged) {
  Graph<double> g;
  bs::RandomStream rng(3);
  Tensor<double> x = bs::testing::random_tensor({2, 1, 4, 5}, rng);
  const auto xi = g.input(x);
  const auto w = g.parameter(Tensor<double>({1, 1, 1, 1}, {1.0}));
  EXPECT_EQ(g.value(g.conv2d(xi, w)), x);
}

TEST(TensorCore, ReluClampsNegatives) {
  Graph<double> g;
  const auto y = g.relu(g.input(Tensor<double>({3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(g.value(y), Tensor<double>({3}, {0.0, 0.0, 2.0}));
}

TEST(TensorCore, OnesConvolutionSumsWindow) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>(bs::Shape{1, 1, 3, 3}, 1.0));
  const auto w = g.parameter(Tensor<double>(bs::Shape{1, 1, 2, 2}, 1.0));
  EXPECT_EQ(g.value(g.conv2d(x, w)), Tensor<double>(bs::Shape{1, 1, 2, 2}, 4.0));
}

TEST(TensorCore, SoftmaxXentOfTiedLogitsIsLn2) {
  for (double z : {-7.5, 0.0, 3.25, 40.0}) {
    Graph<double> g;
    const auto loss = g.softmax_xent(g.input(Tensor<double>({1, 2}, {z, z})), {0});
    EXPECT_NEAR(g.value(loss)[0], std::log(2.0), 1e-15);
  }
}

TEST(TensorCore, AffineGradientIsWeightRow) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>({1, 2}, {0.3, -0.7}), true);
  const auto w = g.parameter(Tensor<double>({2, 1}, {2.0, -1.0}));
  const auto b = g.parameter(Tensor<double>({1}, {0.0}));
  const auto y = g.affine(x, w, b);
  const auto grads = g.backward(y);
  EXPECT_EQ(grads.of(x), Tensor<double>({1, 2}, {2.0, -1.0}));
}

TEST(TensorCore, DisconnectedLeafGetsZeroGradient) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>({1, 2}, {1.0, 2.0}), true);
  const auto c = g.input(Tensor<double>({1, 1}, {5.0}), true);
  const auto y = g.relu(c);
  const auto grads = g.backward(y);
  EXPECT_FALSE(grads.connected(x));
  EXPECT_EQ(grads.of(x), Tensor<double>(bs::Shape{1, 2}));
}

TEST(TensorCore, BackwardRequiresScalar) {
  Graph<double> g;
  const auto y = g.relu(g.input(Tensor<double>({2}, {1.0, 2.0}), true));
  try {
    g.backward(y);
    FAIL();
  } catch (const bs::Error& e) {
    EXPECT_EQ(e.kind(), bs::ErrorKind::NotScalar);
  }
}

TEST(TensorCore, ShapeErrors) {
  Graph<double> g;
  const auto a = g.input(Tensor<double>(bs::Shape{2, 3}));
  const auto b = g.input(Tensor<double>(bs::Shape{3, 2}));
  EXPECT_THROW(g.add(a, b), bs::Error);
  const auto x = g.input(Tensor<double>(bs::Shape{1, 2, 4, 4}));
  const auto w = g.input(Tensor<double>(bs::Shape{1, 3, 3, 3}));
  EXPECT_THROW(g.conv2d(x, w), bs::Error);
}

TEST(TensorCore, NonFiniteOutputIsAnError) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>({1, 1}, {1e300}));
  const auto w = g.parameter(Tensor<double>({1, 1}, {1e300}));
  const auto b = g.parameter(Tensor<double>({1}, {0.0}));
  try {
    g.affine(x, w, b);
    FAIL();
  } catch (const bs::Error& e) {
    EXPECT_EQ(e.kind(), bs::ErrorKind::NonFinite);
  }
}

TEST(TensorCore, ResidualAddSplitsGradientIdentically) {
  Graph<double> g;
  bs::RandomStream rng(11);
  const auto a = g.input(bs::testing::random_tensor({2, 3}, rng), true);
  const auto b = g.input(bs::testing::random_tensor({2, 3}, rng), true);
  const auto y = g.add(a, b);
  Tensor<double> seed = bs::testing::random_tensor({2, 3}, rng);
  const auto grads = g.backward(y, seed);
  EXPECT_EQ(grads.of(a), seed);
  EXPECT_EQ(grads.of(b), seed);
}

TEST(TensorCore, SoftmaxRowsArePositiveAndNormalized) {
  bs::RandomStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> z = bs::testing::random_tensor({4, 2 + rng.below(5)}, rng, -30.0, 30.0);
    const Tensor<double> p = bs::softmax_rows(z);
    const std::size_t k = p.dim(1);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_GT(p[i * k + j], 0.0);
        s += p[i * k + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(TensorCore, DropoutZeroFractionAndScaling) {
  const std::size_t n = 10000;
  const double keep = 0.7;
  Graph<double> g;
  const auto x = g.input(Tensor<double>(bs::Shape{1, n}, 1.0));
  const auto y = g.dropout(x, 1.0 - keep, Mode::train, bs::RandomStream(99));
  std::size_t zeros = 0;
  for (double v : g.value(y).values()) {
    if (v == 0.0)
      ++zeros;
    else
      EXPECT_DOUBLE_EQ(v, 1.0 / keep);
  }
  const double expected = (1.0 - keep) * n;
  const double sigma = std::sqrt(n * keep * (1.0 - keep));
  EXPECT_LT(std::abs(static_cast<double>(zeros) - expected), 3.0 * sigma);

  Graph<double> ge;
  const auto xe = ge.input(Tensor<double>(bs::Shape{1, n}, 1.0));
  EXPECT_EQ(ge.value(ge.dropout(xe, 0.3, Mode::eval, bs::RandomStream(99))), ge.value(xe));
}

TEST(TensorCore, BatchNormEvalUsesRunningStatistics) {
  Graph<double> g;
  bs::BatchNormStats<double> stats(1);
  stats.running_mean[0] = 2.0;
  stats.running_var[0] = 4.0 - bs::kBatchNormEps;
  const auto x = g.input(Tensor<double>({2, 1}, {4.0, 0.0}));
  const auto gamma = g.parameter(Tensor<double>({1}, {1.0}));
  const auto beta = g.parameter(Tensor<double>({1}, {0.0}));
  const auto y = g.batch_norm(x, gamma, beta, stats, Mode::eval);
  EXPECT_NEAR(g.value(y)[0], 1.0, 1e-12);
  EXPECT_NEAR(g.value(y)[1], -1.0, 1e-12);
  EXPECT_EQ(stats.running_mean[0], 2.0);
}

TEST(TensorCore, BatchNormTrainUpdatesRunningStatistics) {
  Graph<double> g;
  bs::BatchNormStats<double> stats(1);
  const auto x = g.input(Tensor<double>({2, 1}, {1.0, 3.0}));
  const auto gamma = g.parameter(Tensor<double>({1}, {1.0}));
  const auto beta = g.parameter(Tensor<double>({1}, {0.0}));
  g.batch_norm(x, gamma, beta, stats, Mode::train);
  EXPECT_NEAR(stats.running_mean[0], 0.2, 1e-12);
  // unbiased batch variance is 2
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * 2.0, 1e-12);
}

TEST(TensorCore, ReplayReproducesActivationsBitExactly) {
  bs::RandomStream rng(21);
  Tensor<float> x = bs::testing::random_tensor({2, 3, 8, 8}, rng).cast<float>();
  Tensor<float> w = bs::testing::random_tensor({4, 3, 3, 3}, rng).cast<float>();
  auto run = [&] {
    Graph<float> g;
    const auto y = g.max_pool2(g.relu(g.conv2d(g.input(x), g.parameter(w), {1, 1})));
    return g.value(g.global_avg_pool(y));
  };
  EXPECT_TRUE(bs::bitwise_equal(run(), run()));
}

class OpGradient : public ::testing::TestWithParam<bs::OpKind> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto summary = bs::testing::check_op(GetParam(), 20, 20260101);
  EXPECT_EQ(summary.instances, 20u);
  EXPECT_EQ(summary.passed, summary.instances) << "worst relative error " << summary.worst;
}

INSTANTIATE_TEST_SUITE_P(AllKinds, OpGradient, ::testing::ValuesIn(bs::testing::differentiable_ops()),
                         [](const auto& info) { return std::string(bs::to_string(info.param)); });

TEST(TensorCore, CompositeNetworkGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = bs::testing::check_small_network(seed);
    EXPECT_GT(r.checked, 50u);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}
