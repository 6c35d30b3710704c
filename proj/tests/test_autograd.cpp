#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace calibkd;
using calibkd::testing::randn;

TEST(GradCheck, EveryOpMatchesCentralDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (auto& c : calibkd::testing::op_grad_cases(seed)) {
      const auto r = check_gradients(c.f, c.point, calibkd::testing::kGradEps);
      EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " seed " << seed << " index " << r.worst_index
                                            << " analytic " << r.analytic << " numeric " << r.numeric;
    }
  }
}

TEST(GradCheck, ComposedDistillationLossMatchesCentralDifferences) {
  for (auto& c : calibkd::testing::composite_grad_cases(11)) {
    const auto r = check_gradients(c.f, c.point, calibkd::testing::kGradEps);
    EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " analytic " << r.analytic << " numeric " << r.numeric;
  }
}

TEST(GradCheck, RejectsNondeterministicFunction) {
  int calls = 0;
  auto f = [&](Tensor<double>& x) { return ops::scale(ops::sum(x), static_cast<double>(++calls)); };
  EXPECT_THROW(check_gradients(f, Tensor<double>::full({2}, 1.0), 1e-6), OracleError);
}

TEST(Autograd, ReusedInputAccumulatesBothPaths) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5}, true);
  {
    Tape<double> tape;
    auto y = ops::sum(ops::add(ops::mul(x, x), ops::scale(x, 3.0)));
    tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 4.0);
}

TEST(Autograd, NoTapeRecordsNothing) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  auto y = ops::sum(ops::mul(x, x));
  EXPECT_EQ(y.item(), 5.0);
  EXPECT_FALSE(x.has_grad());
  EXPECT_THROW(backprop(y), ContractError);
}

TEST(Autograd, DetachedInputsGetNoGradient) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  auto y = ops::sum(ops::mul(x.detach(), x));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Autograd, BackwardNeedsScalarLoss) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  auto y = ops::scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Ops, ShapeMismatchNamesOperation) {
  Tensor<double> a = Tensor<double>::zeros({2, 3}), b = Tensor<double>::zeros({3, 2});
  try {
    ops::add(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
}

TEST(Ops, NonFiniteOutputRaises) {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor<double> a({2}, {inf, 1.0});
  EXPECT_THROW(ops::sub(a, a), NumericError);
}

TEST(Ops, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(4);
  auto x = randn({5, 7}, rng, 30.0);
  for (double tau : {1e-3, 0.5, 1.0, 1e6}) {
    auto p = ops::softmax(x, tau);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(p[i * 7 + j], 0.0);
        s += p[i * 7 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(ops::softmax(x, 0.0), ConfigError);
}

TEST(Ops, LogSoftmaxIsStableForLargeLogits) {
  Tensor<double> x({1, 3}, {1000.0, 0.0, -1000.0});
  auto l = ops::log_softmax(x, 1.0);
  EXPECT_NEAR(l[0], 0.0, 1e-12);
  EXPECT_NEAR(l[1], -1000.0, 1e-9);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogK) {
  auto x = Tensor<double>::zeros({4, 10});
  std::vector<int> y{0, 3, 9, 5};
  EXPECT_NEAR(ops::cross_entropy(x, y).item(), std::log(10.0), 1e-12);
  std::vector<int> bad{0, 3, 10, 5};
  EXPECT_THROW(ops::cross_entropy(x, bad), DataError);
}

TEST(Ops, KlOfIdenticalLogitsIsZero) {
  std::mt19937_64 rng(2);
  auto x = randn({3, 4}, rng);
  EXPECT_NEAR(ops::kl_divergence(x, x, 4.0).item(), 0.0, 1e-12);
  EXPECT_GT(ops::kl_divergence(x, ops::scale(x, -1.0), 4.0).item(), 0.0);
}

TEST(Ops, KlTargetIsConstant) {
  std::mt19937_64 rng(3);
  auto x = randn({2, 3}, rng, 1.0, true), t = randn({2, 3}, rng, 1.0, true);
  Tape<double> tape;
  tape.backward(ops::kl_divergence(x, t, 2.0));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(Ops, ConvMatchesDirectSummation) {
  std::mt19937_64 rng(9);
  auto x = randn({2, 3, 5, 4}, rng), w = randn({2, 3, 3, 3}, rng), b = randn({2}, rng);
  for (std::size_t stride : {1u, 2u}) {
    auto y = ops::conv2d(x, w, b, stride, 1);
    const std::size_t oh = (5 + 2 - 3) / stride + 1, ow = (4 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 2, oh, ow}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = b[o];
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t ki = 0; ki < 3; ++ki)
                for (std::size_t kj = 0; kj < 3; ++kj) {
                  const long r = static_cast<long>(i * stride + ki) - 1, q = static_cast<long>(j * stride + kj) - 1;
                  if (r < 0 || q < 0 || r >= 5 || q >= 4) continue;
                  acc += w[((o * 3 + c) * 3 + ki) * 3 + kj] * x[((n * 3 + c) * 5 + r) * 4 + q];
                }
            EXPECT_NEAR(y[((n * 2 + o) * oh + i) * ow + j], acc, 1e-12);
          }
  }
}

TEST(Ops, AdaptivePoolAveragesBins) {
  Tensor<double> x({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto y = ops::adaptive_avg_pool2d(x, 1, 2);
  EXPECT_DOUBLE_EQ(y[0], (1 + 2 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(y[1], (3 + 4 + 7 + 8) / 4.0);
  auto same = ops::adaptive_avg_pool2d(x, 2, 4);
  EXPECT_EQ(same.values(), x.values());
}

TEST(Ops, L2NormalizeGivesUnitRows) {
  std::mt19937_64 rng(3);
  auto y = ops::l2_normalize(randn({4, 6}, rng));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += y[i * 6 + j] * y[i * 6 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}
