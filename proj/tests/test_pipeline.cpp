#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "calibkd/config.hpp"
#include "calibkd/report.hpp"

using namespace calibkd;
namespace fs = std::filesystem;

namespace {

/// Seconds-scale experiment: 4 classes of 8x8 images.
ExperimentConfig small_config(double difficulty = 0.5) {
  ExperimentConfig cfg;
  auto& s = cfg.data.synthetic;
  s.num_classes = 4;
  s.train_per_class = 24;
  s.test_per_class = 12;
  s.height = s.width = 8;
  s.difficulty = difficulty;
  cfg.teacher.stages = {{6, 1, true}, {8, 1, true}, {8, 1, false}};
  cfg.student.stages = {{4, 1, true}, {4, 1, true}};
  for (auto* tc : {&cfg.teacher_train, &cfg.student_train}) {
    tc->epochs = 3;
    tc->batch_size = 8;
    tc->lr = {0.01, {}, 0.1};
  }
  cfg.student_train.distill.pair = {1, 2};
  cfg.sync();
  cfg.validate();
  return cfg;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("calibkd_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> sample_checkpoint_bytes() {
  Checkpoint c;
  c.config = {{"config.seed", "3"}, {"note", "a = b"}};
  c.epoch = 7;
  c.rng_state = "123 456";
  c.tensors.emplace_back("w", Tensor<float>({2, 3}, {1, -2, 3.5f, 0, 1e-30f, -0.0f}));
  c.tensors.emplace_back("s", Tensor<float>::scalar(4.25f));
  return save_checkpoint(c);
}

void refresh_crc(std::vector<std::uint8_t>& bytes) {
  const auto crc = detail::crc32_of(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto bytes = sample_checkpoint_bytes();
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CKDC");
  const auto c = load_checkpoint(bytes);
  EXPECT_EQ(c.epoch, 7u);
  EXPECT_EQ(c.rng_state, "123 456");
  EXPECT_EQ(c.get("note"), "a = b");
  EXPECT_EQ(c.tensor("w").shape(), (Shape{2, 3}));
  EXPECT_EQ(std::memcmp(c.tensor("w").data().data(), Tensor<float>({6}, {1, -2, 3.5f, 0, 1e-30f, -0.0f}).data().data(),
                        6 * sizeof(float)),
            0);
  EXPECT_EQ(c.tensor("s").rank(), 0u);
  EXPECT_EQ(save_checkpoint(c), bytes);
}

TEST(Checkpoint, CorruptionTruncationAndVersion) {
  auto bytes = sample_checkpoint_bytes();
  auto flipped = bytes;
  flipped[20] ^= 0x10;
  try {
    load_checkpoint(flipped);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC32"), std::string::npos);
  }
  auto cut = bytes;
  cut.resize(cut.size() - 9);
  EXPECT_THROW(load_checkpoint(cut), FormatError);
  EXPECT_THROW(load_checkpoint(std::vector<std::uint8_t>(5, 0)), FormatError);
  auto future = bytes;
  future[4] = 2;
  refresh_crc(future);
  try {
    load_checkpoint(future);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported version 2"), std::string::npos);
  }
}

TEST(Checkpoint, NetworkForwardIsBitIdenticalAfterReload) {
  auto cfg = small_config();
  auto net = build_network<float>(cfg.student, 5);
  const auto stats = ChannelStats{{0.3f}, {0.2f}};
  const auto bytes = save_checkpoint(make_checkpoint(net, stats, to_key_values(cfg), "student", 3, "x"));
  const auto loaded = load_checkpoint(bytes);
  const auto back = model_from_checkpoint(loaded);
  EXPECT_EQ(back.spec(), net.spec());
  const auto data = prepare_data(cfg.data, 1);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto batch = make_batch<float>(data.test, idx, stats_from_checkpoint(loaded));
  EXPECT_EQ(forward_with_taps(net, batch.images).logits.values(), forward_with_taps(back, batch.images).logits.values());
  EXPECT_FALSE(back.fc_weight().requires_grad());
}

TEST(Checkpoint, AtomicWriteLeavesNoTemporary) {
  const auto dir = scratch("atomic");
  write_file_atomic(dir / "a.txt", std::string("hello"));
  EXPECT_TRUE(fs::exists(dir / "a.txt"));
  EXPECT_FALSE(fs::exists(dir / "a.txt.tmp"));
  EXPECT_THROW(read_checkpoint_file(dir / "missing.ckdc"), FormatError);
}

TEST(Config, DefaultsRoundTripThroughYaml) {
  ExperimentConfig def;
  const auto text = to_yaml(def);
  const auto back = parse_config(text);
  EXPECT_EQ(to_yaml(back), text);
  EXPECT_EQ(to_key_values(back), to_key_values(def));
  EXPECT_EQ(back.student_train.distill.pair, def.student_train.distill.pair);
}

TEST(Config, UnknownKeyNamesKeyAndPosition) {
  try {
    parse_config("distill:\n  betaa: 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("distill.betaa"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  }
}

TEST(Config, BadValuesRaiseConfigError) {
  EXPECT_THROW(parse_config("mode: bogus\n"), ConfigError);
  EXPECT_THROW(parse_config("distill:\n  tau: -1\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("data:\n  few_shot: 0\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("teacher:\n  train:\n    epochs: many\n"), ConfigError);
  EXPECT_THROW(parse_config("distill:\n  pair: [0, 1]\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.yaml"), ConfigError);
}

TEST(Config, OverridesAreApplied) {
  auto cfg = parse_config("seed: 9\nmode: fitnet\ndata:\n  classes: 3\n  shape: [2, 12, 10]\ndistill:\n  pair: [3, 4]\n");
  cfg.sync();
  EXPECT_EQ(cfg.mode, Mode::fitnet);
  EXPECT_EQ(cfg.teacher.num_classes, 3u);
  EXPECT_EQ(cfg.student.in_channels, 2u);
  EXPECT_EQ(cfg.student.in_width, 10u);
  EXPECT_EQ(cfg.student_train.seed, 9u);
  EXPECT_EQ(cfg.student_train.distill.pair, (LayerPair{2, 3}));
}

TEST(Modes, ConfigureModeSettings) {
  DistillConfig base;
  base.beta = 2.0;
  base.tau = 0.5;
  EXPECT_EQ(configure_mode(Mode::kd, base).beta, 0.0);
  EXPECT_EQ(configure_mode(Mode::fitnet, base).allocation, Allocation::one_hot);
  EXPECT_EQ(configure_mode(Mode::semckd, base).tau, 1.0);
  EXPECT_EQ(configure_mode(Mode::semckd_tau, base).tau, 0.5);
  EXPECT_EQ(configure_mode(Mode::shared, base).allocation, Allocation::shared);
  EXPECT_THROW(parse_mode("fitnets"), ConfigError);
}

TEST(Trainer, TrivialTaskIsLearnedPerfectly) {
  auto cfg = small_config(0.0);
  cfg.student_train.epochs = 8;
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  const auto r = train_supervised(cfg.student, data.train, data.test, stats, cfg.student_train);
  EXPECT_DOUBLE_EQ(r.test_accuracy, 1.0);
  EXPECT_EQ(r.history.size(), 8u);
}

TEST(Trainer, RandomNetworkIsNearChance) {
  auto cfg = small_config(1.0);
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  double sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 8; ++seed) sum += evaluate(build_network<float>(cfg.student, seed), data.test, stats);
  // 8 networks x 48 instances, chance 0.25: the mean is within a generous band.
  EXPECT_GT(sum / 8, 0.1);
  EXPECT_LT(sum / 8, 0.5);
}

TEST(Trainer, EvaluateIgnoresInstanceOrder) {
  auto cfg = small_config();
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  auto net = build_network<float>(cfg.student, 4);
  std::vector<std::size_t> rev(data.test.size());
  for (std::size_t i = 0; i < rev.size(); ++i) rev[i] = rev.size() - 1 - i;
  EXPECT_EQ(evaluate(net, data.test, stats), evaluate(net, data.test.subset(rev), stats));
  auto wrong = data.test;
  wrong.num_classes = 5;
  EXPECT_THROW(evaluate(net, wrong, stats), ConfigError);
}

TEST(Trainer, DistillationIsDeterministicAndLeavesTeacherFrozen) {
  auto cfg = small_config();
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  auto teacher = train_supervised(cfg.teacher, data.train, data.test, stats, cfg.teacher_train).net;
  teacher.set_trainable(false);
  const auto before = parameter_hash(teacher.named_parameters());
  auto tc = cfg.student_train;
  tc.distill = configure_mode(Mode::semckd, tc.distill);
  const auto a = distill(teacher, cfg.student, data.train, data.test, stats, tc);
  const auto b = distill(teacher, cfg.student, data.train, data.test, stats, tc);
  EXPECT_EQ(parameter_hash(teacher.named_parameters()), before);
  EXPECT_EQ(a.teacher_hash, before);
  EXPECT_EQ(metrics_csv({"r", 1, Mode::semckd, true}, a), metrics_csv({"r", 1, Mode::semckd, true}, b));
  EXPECT_EQ(parameter_hash(a.net.named_parameters()), parameter_hash(b.net.named_parameters()));
  ASSERT_EQ(a.mean_alpha.size(), 2u);
  for (const auto& row : a.mean_alpha) {
    double s = 0.0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
  EXPECT_FALSE(std::isnan(a.sm_score));
  EXPECT_FALSE(std::isnan(a.history.back().fmd_loss));
}

TEST(Trainer, BetaZeroHasNoFeatureTerm) {
  auto cfg = small_config();
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  auto teacher = build_network<float>(cfg.teacher, 3);
  teacher.set_trainable(false);
  auto tc = cfg.student_train;
  tc.epochs = 1;
  tc.distill = configure_mode(Mode::kd, tc.distill);
  const auto r = distill(teacher, cfg.student, data.train, data.test, stats, tc);
  EXPECT_TRUE(std::isnan(r.history[0].fmd_loss));
  const auto csv = metrics_csv({"kd", 1, Mode::kd, false}, r);
  EXPECT_EQ(csv.find("fmd_loss"), std::string::npos);
}

TEST(Trainer, IncompatibleDataIsConfigError) {
  auto cfg = small_config();
  const auto data = prepare_data(cfg.data, cfg.seed);
  auto spec = cfg.student;
  spec.num_classes = 7;
  EXPECT_THROW(train_supervised(spec, data.train, data.test, ChannelStats::compute(data.train), cfg.student_train),
               ConfigError);
}

TEST(Report, AggregatesRunDirectories) {
  const auto root = scratch("report");
  auto cfg = small_config();
  const auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  for (std::uint64_t seed : {1u, 2u}) {
    auto tc = cfg.student_train;
    tc.seed = seed;
    tc.epochs = 2;
    const auto r = train_supervised(cfg.student, data.train, data.test, stats, tc);
    const RunInfo info{"student-seed" + std::to_string(seed), seed, Mode::student, false};
    const auto dir = root / info.run_id;
    fs::create_directories(dir);
    write_file_atomic(dir / "metrics.csv", metrics_csv(info, r));
    auto summary = summary_json(info, r, nullptr, Json::object());
    add_timing(summary, std::chrono::system_clock::now(), std::chrono::system_clock::now());
    EXPECT_TRUE(summary.contains("timing"));
    EXPECT_FALSE(summary.contains("started"));
    write_file_atomic(dir / "summary.json", summary.dump());
  }
  const auto rows = aggregate_runs(collect_runs(root));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].runs, 2u);
  EXPECT_NE(format_table(rows).find("student"), std::string::npos);
  EXPECT_NE(svg_plot(collect_runs(root), "test_accuracy", false).find("<svg"), std::string::npos);
  EXPECT_THROW(collect_runs(scratch("empty")), DataError);
}

TEST(Report, MeanStdIsSampleStd) {
  const auto [m, s] = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-12);
}
