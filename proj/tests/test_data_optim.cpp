#include <cmath>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "calibkd/data.hpp"
#include "calibkd/optim.hpp"

using namespace calibkd;

namespace {

void put_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<std::uint8_t> out;
  put_be(out, 0x803);
  put_be(out, n);
  put_be(out, rows);
  put_be(out, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) out.push_back(static_cast<std::uint8_t>((i * 37) % 256));
  return out;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  put_be(out, 0x801);
  put_be(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

Dataset labelled(std::vector<int> labels, std::size_t classes) {
  Dataset ds;
  ds.num_classes = classes;
  ds.labels = std::move(labels);
  ds.images.resize(ds.labels.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<float>(i);
  return ds;
}

}  // namespace

TEST(Idx, ParsesHandBuiltFixture) {
  const auto ds = parse_idx(idx_images(3, 2, 2), idx_labels({0, 1, 2}));
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.height, 2u);
  EXPECT_EQ(ds.num_classes, 3u);
  EXPECT_FLOAT_EQ(ds.images[1], 37.0f / 255.0f);
  EXPECT_EQ(ds.labels[2], 2);
}

TEST(Idx, BadMagicTruncationAndCountMismatch) {
  auto img = idx_images(3, 2, 2);
  auto bad = img;
  bad[3] = 0x04;
  EXPECT_THROW(parse_idx(bad, idx_labels({0, 1, 2})), FormatError);
  auto cut = img;
  cut.resize(cut.size() - 1);
  try {
    parse_idx(cut, idx_labels({0, 1, 2}));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_idx(img, idx_labels({0, 1})), FormatError);
  EXPECT_THROW(parse_idx(img, idx_labels({0, 1, 5}), 3), DataError);
}

TEST(Csv, HeaderLabelAndScaling) {
  std::istringstream in("p0,label,p1\n255,1,0\n51,0,102\n");
  const auto ds = parse_csv(in, 1, 1, 2);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.labels[0], 1);
  EXPECT_FLOAT_EQ(ds.images[0], 1.0f);
  EXPECT_FLOAT_EQ(ds.images[3], 0.4f);
  std::istringstream unit("label,p0\n0,0.5\n1,1.0\n");
  EXPECT_FLOAT_EQ(parse_csv(unit, 1, 1, 1).images[0], 0.5f);
}

TEST(Csv, MalformedRowsNameTheLine) {
  std::istringstream in("label,p0,p1\n0,1,2\n1,2\n");
  try {
    parse_csv(in, 1, 1, 2);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::istringstream nolabel("a,b\n0,1\n");
  EXPECT_THROW(parse_csv(nolabel, 1, 1, 1), FormatError);
  std::istringstream text("label,p0\n0,x\n");
  EXPECT_THROW(parse_csv(text, 1, 1, 1), FormatError);
}

TEST(Synthetic, DeterministicBalancedAndBounded) {
  SyntheticSpec spec;
  spec.train_per_class = 5;
  spec.test_per_class = 3;
  const auto a = gen_synthetic(spec), b = gen_synthetic(spec);
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.train.size(), 50u);
  EXPECT_EQ(a.test.size(), 30u);
  for (auto c : a.train.class_counts()) EXPECT_EQ(c, 5u);
  for (float v : a.train.images) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  spec.seed = 2;
  EXPECT_NE(gen_synthetic(spec).train.images, a.train.images);
}

TEST(Synthetic, DifficultyZeroGivesTemplates) {
  SyntheticSpec spec;
  spec.difficulty = 0.0;
  spec.train_per_class = 2;
  spec.test_per_class = 1;
  const auto d = gen_synthetic(spec);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto img = d.train.image(i);
    const auto& tpl = d.templates[static_cast<std::size_t>(d.train.labels[i])];
    for (std::size_t j = 0; j < img.size(); ++j) EXPECT_FLOAT_EQ(img[j], tpl[j]);
  }
}

TEST(FewShot, StratifiedCeilCounts) {
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 7; ++i) labels.push_back(k);
  const auto ds = labelled(labels, 3);
  const auto half = subsample_few_shot(ds, 0.5, 4);
  for (auto c : half.class_counts()) EXPECT_EQ(c, 4u);
  EXPECT_EQ(subsample_few_shot(ds, 1.0, 4).images, ds.images);
  EXPECT_EQ(subsample_few_shot(ds, 0.5, 4).images, half.images);
  EXPECT_THROW(subsample_few_shot(ds, 0.0, 4), ConfigError);
  // Kept instances are a subset in the original order.
  for (std::size_t i = 1; i < half.size(); ++i) EXPECT_LT(half.images[i - 1], half.images[i]);
}

TEST(LabelNoise, ExactCountAlwaysDifferentClass) {
  std::vector<int> labels(100);
  for (int i = 0; i < 100; ++i) labels[i] = i % 10;
  const auto ds = labelled(labels, 10);
  for (double f : {0.0, 0.2, 0.55}) {
    const auto noisy = inject_label_noise(ds, f, 9);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < 100; ++i) changed += noisy.labels[i] != ds.labels[i];
    EXPECT_EQ(changed, static_cast<std::size_t>(std::floor(f * 100 + 1e-9)));
    EXPECT_EQ(noisy.images, ds.images);
  }
  auto test = ds;
  test.split = Split::test;
  EXPECT_EQ(inject_label_noise(test, 0.5, 9).labels, test.labels);
  EXPECT_THROW(inject_label_noise(ds, 1.0, 9), ConfigError);
}

TEST(Batching, PermutationOfFullBatches) {
  BatchPlan plan{4, 3};
  const auto e1 = epoch_batches(18, plan, 1), e2 = epoch_batches(18, plan, 2);
  ASSERT_EQ(e1.size(), 4u);
  std::set<std::size_t> seen;
  for (const auto& b : e1) {
    EXPECT_EQ(b.size(), 4u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen.size(), 16u);
  EXPECT_NE(e1, e2);
  EXPECT_EQ(e1, epoch_batches(18, plan, 1));
  EXPECT_THROW(epoch_batches(3, plan, 1), ConfigError);
}

TEST(Batching, NormalizesWithChannelStats) {
  Dataset ds;
  ds.channels = 2;
  ds.height = ds.width = 1;
  ds.num_classes = 2;
  ds.images = {0.0f, 1.0f, 2.0f, 3.0f};
  ds.labels = {0, 1};
  const auto st = ChannelStats::compute(ds);
  EXPECT_FLOAT_EQ(st.mean[0], 1.0f);
  EXPECT_FLOAT_EQ(st.stddev[1], 1.0f);
  std::vector<std::size_t> idx{1, 0};
  const auto b = make_batch<float>(ds, idx, st);
  EXPECT_EQ(b.images.shape(), (Shape{2, 2, 1, 1}));
  EXPECT_FLOAT_EQ(b.images[0], 1.0f);
  EXPECT_FLOAT_EQ(b.images[3], -1.0f);
  EXPECT_EQ(b.labels, (std::vector<int>{1, 0}));
}

TEST(Optim, LrStepSchedule) {
  LrSchedule s{0.1, {3, 5}, 0.5};
  EXPECT_DOUBLE_EQ(s.at(1), 0.1);
  EXPECT_DOUBLE_EQ(s.at(3), 0.05);
  EXPECT_DOUBLE_EQ(s.at(4), 0.05);
  EXPECT_DOUBLE_EQ(s.at(5), 0.025);
  EXPECT_THROW((LrSchedule{0.0, {}, 0.1}.validate()), ConfigError);
}

TEST(Optim, NesterovMatchesLinearRecurrenceOnQuadratic) {
  // f(p) = 0.5 * a * p^2 with weight decay wd: the state (p, v) evolves by a
  // fixed 2x2 matrix, so five steps are one matrix power.
  const double a = 1.7, lr = 0.1, mu = 0.9, wd = 0.01, p0 = 2.0;
  const double k = a + wd;
  Eigen::Matrix2d m;
  // v' = mu v + k p ; p' = p - lr (k p + mu v') = (1 - lr k - lr mu k) p - lr mu^2 v
  m << 1 - lr * k * (1 + mu), -lr * mu * mu, k, mu;
  Eigen::Vector2d state(p0, 0.0);
  for (int i = 0; i < 5; ++i) state = m * state;

  Tensor<double> p({1}, {p0}, true);
  NesterovSgd<double> opt(mu, wd);
  opt.add({p}, true);
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    p.mutable_grad()[0] = a * p[0];
    opt.step(lr);
  }
  EXPECT_NEAR(p[0], state(0), 1e-12);
}

TEST(Optim, DecayFlagAndMissingGradients) {
  Tensor<double> a({1}, {1.0}, true), b({1}, {1.0}, true);
  NesterovSgd<double> opt(0.0, 0.5);
  opt.add({a}, true);
  opt.add({b}, false);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(a[0], 0.95);
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  EXPECT_THROW(NesterovSgd<double>(1.0, 0.0), ConfigError);
}
