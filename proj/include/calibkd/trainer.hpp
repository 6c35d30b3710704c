#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "calibkd/analysis.hpp"
#include "calibkd/checkpoint.hpp"
#include "calibkd/data.hpp"
#include "calibkd/nets.hpp"
#include "calibkd/optim.hpp"
#include "calibkd/semckd.hpp"

namespace calibkd {

/// Run flavours. `student` trains the small network on labels alone.
enum class Mode { semckd, kd, fitnet, equal, shared, semckd_tau, student };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::semckd: return "semckd";
    case Mode::kd: return "kd";
    case Mode::fitnet: return "fitnet";
    case Mode::equal: return "equal";
    case Mode::shared: return "shared";
    case Mode::semckd_tau: return "semckd_tau";
    case Mode::student: return "student";
  }
  return "?";
}

inline Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::semckd, Mode::kd, Mode::fitnet, Mode::equal, Mode::shared, Mode::semckd_tau, Mode::student})
    if (name == mode_name(m)) return m;
  throw ConfigError("unknown mode '" + name + "' (expected semckd|kd|fitnet|equal|shared|semckd_tau|student)");
}

/// Distillation settings implied by a mode; pair and tau come from `base`.
inline DistillConfig configure_mode(Mode mode, DistillConfig base) {
  switch (mode) {
    case Mode::semckd:
      base.allocation = Allocation::learned;
      base.tau = 1.0;
      break;
    case Mode::semckd_tau: base.allocation = Allocation::learned; break;
    case Mode::kd: base.beta = 0.0; break;
    case Mode::fitnet: base.allocation = Allocation::one_hot; break;
    case Mode::equal: base.allocation = Allocation::equal; break;
    case Mode::shared: base.allocation = Allocation::shared; break;
    case Mode::student: base.beta = 0.0; break;
  }
  return base;
}

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  LrSchedule lr{0.05, {25, 35}, 0.1};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;
  DistillConfig distill;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    lr.validate();
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  }
};

inline constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;       // mean total loss over the epoch's batches
  double fmd_loss = kNan;  // mean feature-map term (before beta); NaN when unused
  double train_accuracy = 0.0;
  double test_accuracy = kNan;     // NaN on epochs skipped by eval_every
  double sm_score = kNan;          // on the fixed probe batch
  double attention_entropy = kNan; // mean over student layers and instances, nats
};

struct RunResult {
  Network<float> net;
  std::vector<EpochMetrics> history;
  double test_accuracy = 0.0;
  double sm_score = kNan;  // mean over the final (up to) 10 epochs
  std::vector<std::vector<double>> mean_alpha;  // s_L x t_L on the probe batch, final epoch
  std::vector<std::vector<double>> cka;         // s_L x t_L linear CKA on the probe set
  std::string teacher_hash;                     // FNV-1a of theta^t, distillation only
  std::string rng_state;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// ---------------------------------------------------------------------------
// Helpers

/// SplitMix64 step, used to derive independent initialization streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a over the raw bytes of every named tensor.
inline std::string parameter_hash(const std::vector<NamedTensor<float>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.numel() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::size_t count_correct(const Tensor<float>& logits, std::span<const int> labels) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return correct;
}

inline void require_compatible(const NetworkSpec& spec, const Dataset& ds) {
  if (spec.num_classes != ds.num_classes) {
    throw ConfigError("network predicts " + std::to_string(spec.num_classes) + " classes, dataset has " +
                      std::to_string(ds.num_classes));
  }
  if (spec.in_channels != ds.channels || spec.in_height != ds.height || spec.in_width != ds.width) {
    throw ConfigError("network input " + std::to_string(spec.in_channels) + "x" + std::to_string(spec.in_height) +
                      "x" + std::to_string(spec.in_width) + " does not match dataset images " +
                      std::to_string(ds.channels) + "x" + std::to_string(ds.height) + "x" + std::to_string(ds.width));
  }
}

/// Top-1 accuracy of argmax logits, evaluated in fixed-size chunks.
inline double evaluate(const Network<float>& net, const Dataset& ds, const ChannelStats& stats) {
  require_compatible(net.spec(), ds);
  if (ds.size() == 0) throw DataError("evaluate: empty dataset");
  constexpr std::size_t kChunk = 250;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + kChunk); ++i) idx.push_back(i);
    auto batch = make_batch<float>(ds, idx, stats);
    auto rec = forward_with_taps(net, batch.images);
    correct += count_correct(rec.logits, batch.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

inline constexpr std::uint64_t kProbeSeed = 20201;
inline constexpr std::size_t kCkaProbeSize = 256;

inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t count) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(kProbeSeed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(n, count));
  return order;
}

inline std::vector<Tensor<float>> select_taps(const ForwardRecord<float>& rec, TapPosition pos) {
  return pos == TapPosition::post_activation ? rec.taps : rec.taps_preactivation;
}

inline std::vector<analysis::Matrix> gram_matrices(const std::vector<Tensor<float>>& taps) {
  std::vector<analysis::Matrix> out;
  for (const auto& t : taps) {
    auto r = analysis::flatten_instances(t);
    out.push_back(r * r.transpose());
  }
  return out;
}

inline analysis::PairWeights to_pair_weights(const AttentionWeights<float>& alpha) {
  analysis::PairWeights w(alpha.student_layers(),
                          std::vector<std::vector<double>>(alpha.teacher_layers(), std::vector<double>(alpha.batch())));
  for (std::size_t s = 0; s < alpha.student_layers(); ++s)
    for (std::size_t t = 0; t < alpha.teacher_layers(); ++t)
      for (std::size_t i = 0; i < alpha.batch(); ++i) w[s][t][i] = alpha(s, t, i);
  return w;
}

/// Mean Shannon entropy of the rows of alpha that carry weight.
inline double attention_entropy(const AttentionWeights<float>& alpha) {
  double total = 0.0;
  std::size_t rows = 0;
  for (std::size_t s = 0; s < alpha.student_layers(); ++s)
    for (std::size_t i = 0; i < alpha.batch(); ++i) {
      double mass = 0.0, h = 0.0;
      for (std::size_t t = 0; t < alpha.teacher_layers(); ++t) {
        const double a = alpha(s, t, i);
        mass += a;
        if (a > 0.0) h -= a * std::log(a);
      }
      if (mass > 0.0) {
        total += h;
        ++rows;
      }
    }
  return rows == 0 ? kNan : total / static_cast<double>(rows);
}

inline std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

template <class Fn>
void guarded(std::size_t epoch, std::size_t batch, Fn&& fn) {
  try {
    fn();
  } catch (const NumericError& e) {
    throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                       ": " + e.what());
  }
}

inline void check_loss(float value) {
  if (!std::isfinite(value)) throw NumericError("loss is " + std::to_string(value));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Supervised training (teacher pretraining and the plain student baseline)

inline RunResult train_supervised(const NetworkSpec& spec, const Dataset& train, const Dataset& test,
                                  const ChannelStats& stats, const TrainConfig& config,
                                  const EpochCallback& on_epoch = {}) {
  config.validate();
  spec.validate();
  require_compatible(spec, train);
  require_compatible(spec, test);

  RunResult result;
  result.net = build_network<float>(spec, derive_seed(config.seed, 0));
  NesterovSgd<float> opt(config.momentum, config.weight_decay);
  for (auto& [name, t] : result.net.named_parameters()) opt.add({t}, name.ends_with(".weight"));

  std::mt19937_64 rng(derive_seed(config.seed, 1));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = config.lr.at(epoch - 1);
    const BatchPlan plan{config.batch_size, rng()};
    const auto order = epoch_batches(train.size(), plan, epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      detail::guarded(epoch, bi + 1, [&] {
        auto batch = make_batch<float>(train, order[bi], stats);
        Tape<float> tape;
        auto rec = forward_with_taps(result.net, batch.images);
        auto loss = ops::cross_entropy(rec.logits, batch.labels);
        detail::check_loss(loss.item());
        opt.zero_grad();
        tape.backward(loss);
        opt.step(m.lr);
        loss_sum += loss.item();
        correct += count_correct(rec.logits, batch.labels);
        seen += batch.labels.size();
      });
    }
    m.loss = loss_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (epoch % config.eval_every == 0 || epoch == config.epochs) m.test_accuracy = evaluate(result.net, test, stats);
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.net.set_trainable(false);
  result.test_accuracy = result.history.back().test_accuracy;
  result.rng_state = detail::rng_text(rng);
  return result;
}

// ---------------------------------------------------------------------------
// Distillation

/// Trains a student against a frozen teacher with the KD loss plus beta times
/// the attention-weighted feature-map loss. Only student-side parameters
/// (network, projections, allocator) are updated.
inline RunResult distill(const Network<float>& teacher, const NetworkSpec& student_spec, const Dataset& train,
                         const Dataset& test, const ChannelStats& stats, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  student_spec.validate();
  const auto& dc = config.distill;
  const auto& teacher_spec = teacher.spec();
  if (teacher_spec.num_classes != student_spec.num_classes) {
    throw ConfigError("teacher predicts " + std::to_string(teacher_spec.num_classes) + " classes, student " +
                      std::to_string(student_spec.num_classes));
  }
  require_compatible(student_spec, train);
  require_compatible(teacher_spec, train);
  require_compatible(student_spec, test);
  const std::size_t sl = student_spec.stages.size(), tl = teacher_spec.stages.size();
  dc.validate(sl, tl);
  const bool use_fmd = dc.beta > 0.0;
  const bool learned = dc.allocation == Allocation::learned || dc.allocation == Allocation::shared;
  const std::size_t b = config.batch_size;

  RunResult result;
  result.net = build_network<float>(student_spec, derive_seed(config.seed, 0));
  ProjectionStack<float> stacks;
  AllocatorParams<float> allocator;
  NesterovSgd<float> opt(config.momentum, config.weight_decay);
  for (auto& [name, t] : result.net.named_parameters()) opt.add({t}, name.ends_with(".weight"));
  if (use_fmd) {
    stacks = ProjectionStack<float>(student_spec.tap_shapes(), teacher_spec.tap_shapes(), derive_seed(config.seed, 2));
    for (auto& [name, t] : stacks.named_parameters()) opt.add({t}, false);
    if (learned) {
      allocator = build_allocator<float>(b, sl, tl, dc.mlp_mode, dc.tau, dc.per_layer_mlp, derive_seed(config.seed, 3));
      for (auto& [name, t] : allocator.named_parameters()) opt.add({t}, false);
    }
  }
  auto alpha_for = [&](const std::vector<Tensor<float>>& s_taps, const std::vector<Tensor<float>>& t_taps) {
    if (!learned) return fixed_allocation<float>(dc.allocation, sl, tl, s_taps.front().dim(0), dc.pair);
    return allocate(dc, similarity_matrices(s_taps, Side::student), similarity_matrices(t_taps, Side::teacher),
                    allocator);
  };

  const auto teacher_params = teacher.named_parameters();
  result.teacher_hash = parameter_hash(teacher_params);
  for (const auto& [name, t] : teacher_params)
    if (t.requires_grad()) throw ContractError("teacher parameter " + name + " is trainable");

  const auto probe = make_batch<float>(test, detail::probe_indices(test.size(), b), stats);
  const auto probe_teacher = forward_with_taps(teacher, probe.images);
  const auto probe_teacher_taps = detail::select_taps(probe_teacher, dc.tap_position);
  const auto probe_teacher_gram = detail::gram_matrices(probe_teacher_taps);

  std::mt19937_64 rng(derive_seed(config.seed, 1));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = config.lr.at(epoch - 1);
    const BatchPlan plan{b, rng()};
    const auto order = epoch_batches(train.size(), plan, epoch);
    double loss_sum = 0.0, fmd_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      detail::guarded(epoch, bi + 1, [&] {
        auto batch = make_batch<float>(train, order[bi], stats);
        const auto t_rec = forward_with_taps(teacher, batch.images);
        Tape<float> tape;
        auto s_rec = forward_with_taps(result.net, batch.images);
        auto kd = kd_loss(s_rec.logits, t_rec.logits, batch.labels, dc.temperature, dc.reduction);
        Tensor<float> fmd;
        if (use_fmd) {
          const auto s_taps = detail::select_taps(s_rec, dc.tap_position);
          const auto t_taps = detail::select_taps(t_rec, dc.tap_position);
          fmd = semckd_loss(s_taps, t_taps, alpha_for(s_taps, t_taps), stacks, dc.reduction);
          fmd_sum += fmd.item();
        }
        auto loss = total_loss(kd, fmd, dc.beta);
        detail::check_loss(loss.item());
        opt.zero_grad();
        tape.backward(loss);
        opt.step(m.lr);
        loss_sum += loss.item();
        correct += count_correct(s_rec.logits, batch.labels);
        seen += batch.labels.size();
      });
    }
    m.loss = loss_sum / static_cast<double>(order.size());
    if (use_fmd) m.fmd_loss = fmd_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (epoch % config.eval_every == 0 || epoch == config.epochs) m.test_accuracy = evaluate(result.net, test, stats);

    const auto probe_student = detail::select_taps(forward_with_taps(result.net, probe.images), dc.tap_position);
    const auto student_gram = detail::gram_matrices(probe_student);
    if (use_fmd) {
      const auto alpha = alpha_for(probe_student, probe_teacher_taps);
      m.sm_score = analysis::sm_score(student_gram, probe_teacher_gram, detail::to_pair_weights(alpha));
      m.attention_entropy = detail::attention_entropy(alpha);
      if (epoch == config.epochs) {
        result.mean_alpha.assign(sl, std::vector<double>(tl, 0.0));
        for (std::size_t s = 0; s < sl; ++s)
          for (std::size_t t = 0; t < tl; ++t) {
            for (std::size_t i = 0; i < alpha.batch(); ++i) result.mean_alpha[s][t] += alpha(s, t, i);
            result.mean_alpha[s][t] /= static_cast<double>(alpha.batch());
          }
      }
    } else {
      m.sm_score = analysis::sm_score(student_gram, probe_teacher_gram, analysis::unit_weights(sl, tl, b));
    }
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }

  if (parameter_hash(teacher.named_parameters()) != result.teacher_hash) {
    throw ContractError("teacher parameters changed during distillation");
  }

  const std::size_t window = std::min<std::size_t>(10, result.history.size());
  double sm = 0.0;
  for (std::size_t k = result.history.size() - window; k < result.history.size(); ++k) sm += result.history[k].sm_score;
  result.sm_score = sm / static_cast<double>(window);

  const auto cka_batch = make_batch<float>(test, detail::probe_indices(test.size(), detail::kCkaProbeSize), stats);
  const auto cka_s = detail::select_taps(forward_with_taps(result.net, cka_batch.images), dc.tap_position);
  const auto cka_t = detail::select_taps(forward_with_taps(teacher, cka_batch.images), dc.tap_position);
  result.cka.assign(sl, std::vector<double>(tl, kNan));
  for (std::size_t s = 0; s < sl; ++s)
    for (std::size_t t = 0; t < tl; ++t) {
      try {
        result.cka[s][t] =
            analysis::linear_cka(analysis::flatten_instances(cka_s[s]), analysis::flatten_instances(cka_t[t]));
      } catch (const NumericError&) {
        // zero-variance representation (e.g. a dead ReLU layer): left as NaN
      }
    }

  result.net.set_trainable(false);
  result.test_accuracy = result.history.back().test_accuracy;
  result.rng_state = detail::rng_text(rng);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint assembly

inline std::string format_float_list(const std::vector<float>& values) {
  std::string out;
  char buf[32];
  for (float v : values) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    if (!out.empty()) out += ",";
    out += buf;
  }
  return out;
}

inline std::vector<float> parse_float_list(const std::string& text) {
  std::vector<float> out;
  std::stringstream ss(text);
  std::string item;
  try {
    while (std::getline(ss, item, ',')) out.push_back(std::stof(item));
  } catch (const std::logic_error&) {
    throw FormatError("malformed number list '" + text + "'");
  }
  return out;
}

/// Model network under the "model" prefix, normalization statistics and
/// the caller's config snapshot.
inline Checkpoint make_checkpoint(const Network<float>& net, const ChannelStats& stats, KeyValues config,
                                  const std::string& role, std::uint64_t epoch, std::string rng_state) {
  Checkpoint ckpt;
  encode_network_spec(net.spec(), "model", config);
  config["model.role"] = role;
  config["data.mean"] = format_float_list(stats.mean);
  config["data.std"] = format_float_list(stats.stddev);
  ckpt.config = std::move(config);
  ckpt.epoch = epoch;
  ckpt.rng_state = std::move(rng_state);
  ckpt.tensors = network_tensors(net, "model");
  return ckpt;
}

inline Network<float> model_from_checkpoint(const Checkpoint& ckpt) { return network_from_checkpoint(ckpt, "model"); }

inline ChannelStats stats_from_checkpoint(const Checkpoint& ckpt) {
  ChannelStats st{parse_float_list(ckpt.get("data.mean")), parse_float_list(ckpt.get("data.std"))};
  if (st.mean.size() != st.stddev.size() || st.mean.empty()) throw FormatError("checkpoint normalization malformed");
  return st;
}

inline double evaluate(const Checkpoint& ckpt, const Dataset& ds) {
  return evaluate(model_from_checkpoint(ckpt), ds, stats_from_checkpoint(ckpt));
}

}  // namespace calibkd
