#include <cmath>

#include <gtest/gtest.h>

#include "calibkd/analysis.hpp"
#include "support.hpp"

using namespace calibkd;
using calibkd::testing::randn;

namespace {

NetworkSpec tiny(std::vector<StageSpec> stages, std::size_t hw = 8) {
  NetworkSpec s;
  s.stages = std::move(stages);
  s.in_height = s.in_width = hw;
  s.num_classes = 4;
  return s;
}

std::vector<SimilarityMatrix<double>> random_grams(std::size_t layers, std::size_t b, Side side, std::mt19937_64& rng) {
  std::vector<Tensor<double>> taps;
  for (std::size_t l = 0; l < layers; ++l) taps.push_back(randn({b, 2 + l, 3, 3}, rng));
  return similarity_matrices(taps, side);
}

}  // namespace

TEST(Nets, TapShapesFollowStrides) {
  const auto spec = tiny({{4, 1, true}, {6, 2, true}, {8, 1, false}}, 9);
  const auto shapes = spec.tap_shapes();
  ASSERT_EQ(shapes.size(), 3u);
  EXPECT_EQ(shapes[0], (TapShape{4, 5, 5}));
  EXPECT_EQ(shapes[1], (TapShape{6, 3, 3}));
  EXPECT_EQ(shapes[2], (TapShape{8, 3, 3}));
  auto net = build_network<double>(spec, 1);
  std::mt19937_64 rng(1);
  auto rec = forward_with_taps(net, randn({2, 1, 9, 9}, rng));
  for (std::size_t l = 0; l < 3; ++l)
    EXPECT_EQ(rec.taps[l].shape(), (Shape{2, shapes[l].channels, shapes[l].height, shapes[l].width}));
  EXPECT_EQ(rec.logits.shape(), (Shape{2, 4}));
  EXPECT_EQ(rec.penultimate.shape(), (Shape{2, 8}));
}

TEST(Nets, PostActivationTapsAreNonNegative) {
  auto net = build_network<double>(tiny({{4, 1, true}, {4, 1, true}}), 2);
  std::mt19937_64 rng(2);
  auto rec = forward_with_taps(net, randn({3, 1, 8, 8}, rng));
  for (const auto& t : rec.taps)
    for (double v : t.data()) EXPECT_GE(v, 0.0);
  for (std::size_t i = 0; i < rec.taps[0].numel(); ++i)
    EXPECT_EQ(rec.taps[0][i], std::max(0.0, rec.taps_preactivation[0][i]));
}

TEST(Nets, InvalidSpecsRaiseConfigError) {
  EXPECT_THROW(tiny({{4, 1, true}}).validate(), ConfigError);
  EXPECT_THROW(tiny({{4, 1, true}, {4, 1, true}}, 1).validate(), ConfigError);
  auto s = tiny({{4, 1, true}, {4, 1, true}});
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Nets, WrongInputShapeRaises) {
  auto net = build_network<double>(tiny({{4, 1, true}, {4, 1, true}}), 2);
  EXPECT_THROW(forward_with_taps(net, Tensor<double>::zeros({2, 3, 8, 8})), DimensionError);
}

TEST(Nets, SameSeedSameWeights) {
  const auto spec = tiny({{4, 1, true}, {4, 1, true}});
  auto a = build_network<float>(spec, 7), b = build_network<float>(spec, 7), c = build_network<float>(spec, 8);
  EXPECT_EQ(a.stages()[0][0].weight.values(), b.stages()[0][0].weight.values());
  EXPECT_NE(a.stages()[0][0].weight.values(), c.stages()[0][0].weight.values());
}

TEST(Similarity, GramIsSymmetricPsd) {
  std::mt19937_64 rng(3);
  auto grams = random_grams(2, 5, Side::student, rng);
  for (const auto& g : grams) {
    analysis::Matrix m(5, 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) m(i, j) = g.values[i * 5 + j];
    EXPECT_LT((m - m.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<analysis::Matrix> es(m);
    EXPECT_GT(es.eigenvalues().minCoeff(), -1e-9);
  }
  EXPECT_EQ(grams[1].layer, 1u);
}

TEST(Similarity, BatchOfOneIsRejected) {
  std::vector<Tensor<double>> taps{Tensor<double>::zeros({1, 2, 2, 2})};
  EXPECT_THROW(similarity_matrices(taps, Side::teacher), ConfigError);
}

TEST(Attention, WeightsFormSimplexPerInstance) {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t b = 4 + seed % 3;
    auto s = random_grams(3, b, Side::student, rng);
    auto t = random_grams(4, b, Side::teacher, rng);
    for (bool shared : {false, true}) {
      auto params = build_allocator<double>(b, 3, 4, seed % 2 ? MlpMode::linear : MlpMode::nonlinear, 0.5,
                                            seed % 3 == 0, seed);
      auto alpha = attention_allocate(s, t, params, shared);
      for (std::size_t sl = 0; sl < 3; ++sl)
        for (std::size_t i = 0; i < b; ++i) {
          double total = 0.0;
          for (std::size_t tl = 0; tl < 4; ++tl) {
            EXPECT_GE(alpha(sl, tl, i), 0.0);
            total += alpha(sl, tl, i);
            if (shared) {
              EXPECT_EQ(alpha(sl, tl, i), alpha(sl, tl, 0));
            }
          }
          EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
  }
}

TEST(Attention, TemperatureLimits) {
  std::mt19937_64 rng(6);
  auto s = random_grams(2, 6, Side::student, rng);
  auto t = random_grams(3, 6, Side::teacher, rng);
  auto hot = build_allocator<double>(6, 2, 3, MlpMode::nonlinear, 1e6, false, 1);
  auto alpha = attention_allocate(s, t, hot);
  for (std::size_t sl = 0; sl < 2; ++sl)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t tl = 0; tl < 3; ++tl) EXPECT_NEAR(alpha(sl, tl, i), 1.0 / 3.0, 1e-3);
  auto cold = build_allocator<double>(6, 2, 3, MlpMode::nonlinear, 1e-3, false, 1);
  auto sharp = attention_allocate(s, t, cold);
  for (std::size_t sl = 0; sl < 2; ++sl)
    for (std::size_t i = 0; i < 6; ++i) {
      double top = 0.0;
      std::vector<double> logits;
      for (std::size_t tl = 0; tl < 3; ++tl) {
        top = std::max(top, sharp(sl, tl, i));
        logits.push_back(sharp.logits[sl][i * 3 + tl]);
      }
      std::sort(logits.begin(), logits.end());
      // The sharp limit needs a distinct maximum; an all-zero query row ties
      // every logit and stays uniform.
      if (logits[2] - logits[1] > 0.05) {
        EXPECT_GT(top, 0.999);
      }
      if (logits[2] == logits[0]) {
        EXPECT_NEAR(top, 1.0 / 3.0, 1e-9);
      }
    }
}

TEST(Attention, MismatchedWidthIsConfigError) {
  std::mt19937_64 rng(7);
  auto s = random_grams(2, 5, Side::student, rng);
  auto t = random_grams(2, 5, Side::teacher, rng);
  auto params = build_allocator<double>(4, 2, 2, MlpMode::nonlinear, 1.0, false, 1);
  EXPECT_THROW(attention_allocate(s, t, params), ConfigError);
}

TEST(Attention, FixedSchemes) {
  auto eq = fixed_allocation<double>(Allocation::equal, 2, 4, 3);
  auto oh = fixed_allocation<double>(Allocation::one_hot, 2, 4, 3, {1, 2});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(eq(s, t, i), 0.25);
        EXPECT_DOUBLE_EQ(oh(s, t, i), (s == 1 && t == 2) ? 1.0 : 0.0);
      }
  EXPECT_TRUE(eq.fixed);
}

TEST(Projection, OutputMatchesTeacherTap) {
  const std::vector<TapShape> s{{2, 5, 5}, {3, 3, 3}}, t{{4, 4, 4}, {5, 2, 2}, {6, 2, 2}};
  ProjectionStack<double> stacks(s, t, 3);
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      auto y = project(randn({3, s[i].channels, s[i].height, s[i].width}, rng), stacks.at(i, j));
      EXPECT_EQ(y.shape(), (Shape{3, t[j].channels, t[j].height, t[j].width}));
    }
  EXPECT_THROW(project(Tensor<double>::zeros({3, 7, 5, 5}), stacks.at(0, 0)), ConfigError);
}

TEST(Loss, OneHotAllocationEqualsSingleHintMse) {
  std::mt19937_64 rng(8);
  const std::vector<TapShape> s{{2, 4, 4}, {3, 2, 2}}, t{{3, 4, 4}, {4, 2, 2}, {4, 1, 1}};
  ProjectionStack<double> stacks(s, t, 9);
  std::vector<Tensor<double>> st, tt;
  for (const auto& x : s) st.push_back(randn({5, x.channels, x.height, x.width}, rng));
  for (const auto& x : t) tt.push_back(randn({5, x.channels, x.height, x.width}, rng));
  for (std::size_t ps = 0; ps < 2; ++ps)
    for (std::size_t pt = 0; pt < 3; ++pt) {
      auto alpha = fixed_allocation<double>(Allocation::one_hot, 2, 3, 5, {ps, pt});
      const double loss = semckd_loss(st, tt, alpha, stacks).item();
      const double direct = ops::mse(tt[pt], project(st[ps], stacks.at(ps, pt))).item();
      EXPECT_NEAR(loss, direct, 1e-12 * std::max(1.0, direct));
    }
}

TEST(Loss, SumReductionIsBatchTimesMean) {
  std::mt19937_64 rng(9);
  const std::vector<TapShape> s{{2, 2, 2}}, t{{3, 2, 2}};
  ProjectionStack<double> stacks(s, t, 1);
  std::vector<Tensor<double>> st{randn({4, 2, 2, 2}, rng)}, tt{randn({4, 3, 2, 2}, rng)};
  auto alpha = fixed_allocation<double>(Allocation::equal, 1, 1, 4);
  EXPECT_NEAR(semckd_loss(st, tt, alpha, stacks, Reduction::sum).item(),
              4.0 * semckd_loss(st, tt, alpha, stacks, Reduction::mean).item(), 1e-12);
}

TEST(Loss, KdAtEqualLogitsIsCrossEntropy) {
  std::mt19937_64 rng(1);
  auto x = randn({3, 5}, rng);
  std::vector<int> y{1, 4, 0};
  EXPECT_NEAR(kd_loss(x, x, y, 4.0).item(), ops::cross_entropy(x, y).item(), 1e-12);
}

TEST(Loss, BetaZeroDropsFeatureTerm) {
  auto kd = Tensor<double>::scalar(1.5), fmd = Tensor<double>::scalar(10.0);
  EXPECT_EQ(total_loss(kd, fmd, 0.0).item(), 1.5);
  EXPECT_EQ(total_loss(kd, fmd, 2.0).item(), 21.5);
  EXPECT_THROW(total_loss(kd, fmd, -1.0), ConfigError);
}

TEST(Loss, TeacherTapsReceiveNoGradient) {
  std::mt19937_64 rng(2);
  const std::vector<TapShape> s{{2, 2, 2}}, t{{3, 2, 2}};
  ProjectionStack<double> stacks(s, t, 1);
  auto sx = randn({4, 2, 2, 2}, rng, 1.0, true);
  auto tx = randn({4, 3, 2, 2}, rng, 1.0, true);
  Tape<double> tape;
  auto alpha = fixed_allocation<double>(Allocation::equal, 1, 1, 4);
  tape.backward(semckd_loss(std::vector{sx}, std::vector{tx}, alpha, stacks));
  EXPECT_TRUE(sx.has_grad());
  EXPECT_FALSE(tx.has_grad());
}

TEST(DistillConfig, ValidationMessages) {
  DistillConfig dc;
  dc.tau = 0.0;
  EXPECT_THROW(dc.validate(3, 4), ConfigError);
  dc.tau = 1.0;
  dc.allocation = Allocation::one_hot;
  dc.pair = {3, 0};
  EXPECT_THROW(dc.validate(3, 4), ConfigError);
  dc.pair = {2, 3};
  EXPECT_NO_THROW(dc.validate(3, 4));
}
