#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "calibkd/nets.hpp"
#include "calibkd/ops.hpp"

// Semantic-calibration distillation: similarity matrices, attention
// allocation of student layers over teacher layers, projection stacks and
// the loss terms built on them.
namespace calibkd {

enum class Side { student, teacher };

enum class Allocation { learned, equal, one_hot, shared };
enum class TapPosition { post_activation, pre_activation };
enum class MlpMode { nonlinear, linear };
/// How batch-indexed loss terms are reduced: the batch mean keeps the
/// feature-map weight independent of the batch size.
enum class Reduction { mean, sum };

struct LayerPair {
  std::size_t student = 0;
  std::size_t teacher = 0;

  bool operator==(const LayerPair&) const = default;
};

inline constexpr double kMinTau = 1e-4;

struct DistillConfig {
  double temperature = 4.0;  // T of the KD term
  double beta = 400.0;
  double tau = 1.0;
  Allocation allocation = Allocation::learned;
  LayerPair pair{};  // zero-based, used by one_hot
  TapPosition tap_position = TapPosition::post_activation;
  MlpMode mlp_mode = MlpMode::nonlinear;
  Reduction reduction = Reduction::mean;
  bool per_layer_mlp = false;

  void validate(std::size_t student_layers, std::size_t teacher_layers) const {
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature T must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("distill: beta must be >= 0");
    if (!(tau >= kMinTau) || !std::isfinite(tau)) {
      throw ConfigError("distill: tau must be finite and >= 1e-4, got " + std::to_string(tau));
    }
    if (allocation == Allocation::one_hot &&
        (pair.student >= student_layers || pair.teacher >= teacher_layers)) {
      throw ConfigError("distill: one-hot pair (" + std::to_string(pair.student + 1) + "," +
                        std::to_string(pair.teacher + 1) + ") outside " + std::to_string(student_layers) +
                        "x" + std::to_string(teacher_layers) + " layers");
    }
  }
};

// ---------------------------------------------------------------------------
// Similarity matrices

template <class T>
struct SimilarityMatrix {
  Tensor<T> values;  // (b, b)
  Side side = Side::student;
  std::size_t layer = 0;
};

/// One b x b Gram matrix per tap: flatten each instance, take R R^T.
template <class T>
std::vector<SimilarityMatrix<T>> similarity_matrices(const std::vector<Tensor<T>>& taps, Side side) {
  std::vector<SimilarityMatrix<T>> out;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    if (taps[l].rank() < 1 || taps[l].dim(0) < 2) {
      throw ConfigError("similarity matrices need a batch of at least 2 instances");
    }
    if (l > 0 && taps[l].dim(0) != taps[0].dim(0)) {
      throw DimensionError("tap " + std::to_string(l) + " has batch " + std::to_string(taps[l].dim(0)) +
                           ", expected " + std::to_string(taps[0].dim(0)));
    }
    out.push_back({ops::batched_outer(taps[l]), side, l});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention allocation

/// Query/key embedding: Linear-ReLU-Linear-Normalization (nonlinear) or
/// Linear-Normalization (linear). Widths are all b.
template <class T>
struct Mlp {
  Tensor<T> w1, b1, w2, b2;

  Tensor<T> operator()(const Tensor<T>& rows, MlpMode mode) const {
    auto h = ops::linear(rows, w1, b1);
    if (mode == MlpMode::nonlinear) h = ops::linear(ops::relu(h), w2, b2);
    return ops::l2_normalize(h);
  }

  std::size_t width() const { return w1.dim(1); }
};

template <class T>
struct AllocatorParams {
  std::vector<Mlp<T>> query;  // one shared, or one per student layer
  std::vector<Mlp<T>> key;    // one shared, or one per teacher layer
  MlpMode mode = MlpMode::nonlinear;
  double tau = 1.0;

  std::size_t width() const { return query.front().width(); }

  const Mlp<T>& query_for(std::size_t layer) const { return query.size() == 1 ? query[0] : query.at(layer); }
  const Mlp<T>& key_for(std::size_t layer) const { return key.size() == 1 ? key[0] : key.at(layer); }

  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    auto add = [&](const std::string& prefix, const Mlp<T>& m) {
      out.emplace_back(prefix + ".w1", m.w1);
      out.emplace_back(prefix + ".b1", m.b1);
      if (mode == MlpMode::nonlinear) {
        out.emplace_back(prefix + ".w2", m.w2);
        out.emplace_back(prefix + ".b2", m.b2);
      }
    };
    for (std::size_t i = 0; i < query.size(); ++i) add("query" + std::to_string(i), query[i]);
    for (std::size_t i = 0; i < key.size(); ++i) add("key" + std::to_string(i), key[i]);
    return out;
  }
};

template <class T>
AllocatorParams<T> build_allocator(std::size_t batch, std::size_t student_layers, std::size_t teacher_layers,
                                   MlpMode mode, double tau, bool per_layer, std::uint64_t seed) {
  if (batch < 2) throw ConfigError("allocator width (batch size) must be >= 2");
  if (!(tau > 0.0)) throw ConfigError("allocator tau must be > 0");
  std::mt19937_64 rng(seed);
  auto make = [&] {
    Mlp<T> m;
    m.w1 = detail::fan_in_gaussian<T>({batch, batch}, batch, 1.0, rng);
    m.b1 = Tensor<T>::zeros({batch}, true);
    m.w2 = detail::fan_in_gaussian<T>({batch, batch}, batch, 1.0, rng);
    m.b2 = Tensor<T>::zeros({batch}, true);
    return m;
  };
  AllocatorParams<T> p;
  p.mode = mode;
  p.tau = tau;
  for (std::size_t i = 0; i < (per_layer ? student_layers : 1); ++i) p.query.push_back(make());
  for (std::size_t i = 0; i < (per_layer ? teacher_layers : 1); ++i) p.key.push_back(make());
  return p;
}

/// Association weights alpha[s][t][i], stored per student layer as a
/// (b x t_L) matrix whose rows are distributions over teacher layers.
template <class T>
struct AttentionWeights {
  std::vector<Tensor<T>> per_student;
  std::vector<Tensor<T>> logits;  // (b x t_L) pre-softmax scores; empty for fixed schemes
  bool fixed = false;             // true when no parameter influences alpha

  std::size_t student_layers() const { return per_student.size(); }
  std::size_t teacher_layers() const { return per_student.empty() ? 0 : per_student.front().dim(1); }
  std::size_t batch() const { return per_student.empty() ? 0 : per_student.front().dim(0); }

  T operator()(std::size_t s, std::size_t t, std::size_t i) const {
    return per_student.at(s)[i * teacher_layers() + t];
  }

  /// Weights of pair (s, t) over the batch, shape (b).
  Tensor<T> pair(std::size_t s, std::size_t t) const { return ops::column(per_student.at(s), t); }
};

/// alpha[s, t, i] = softmax_t(Q_s[i] . K_t[i] / tau), Q_s = MLP_Q(A_s), K_t = MLP_K(A_t).
/// With `share_across_instances` the scores are averaged over the batch
/// before the softmax so every instance receives the same weights.
template <class T>
AttentionWeights<T> attention_allocate(const std::vector<SimilarityMatrix<T>>& student,
                                       const std::vector<SimilarityMatrix<T>>& teacher,
                                       const AllocatorParams<T>& params, bool share_across_instances = false) {
  if (student.empty() || teacher.empty()) throw ConfigError("attention needs student and teacher layers");
  if (!(params.tau > 0.0)) throw ConfigError("attention temperature tau must be > 0");
  const std::size_t b = student.front().values.dim(0);
  auto check = [&](const SimilarityMatrix<T>& m) {
    if (m.values.rank() != 2 || m.values.dim(0) != m.values.dim(1)) {
      throw DimensionError("similarity matrix must be square, got " + shape_str(m.values.shape()));
    }
    if (m.values.dim(0) != params.width() || m.values.dim(0) != b) {
      throw ConfigError("similarity matrix width " + std::to_string(m.values.dim(0)) +
                        " does not match allocator width " + std::to_string(params.width()));
    }
  };
  for (const auto& m : student) check(m);
  for (const auto& m : teacher) check(m);

  std::vector<Tensor<T>> keys;
  for (std::size_t t = 0; t < teacher.size(); ++t)
    keys.push_back(params.key_for(t)(teacher[t].values, params.mode));

  AttentionWeights<T> out;
  for (std::size_t s = 0; s < student.size(); ++s) {
    auto query = params.query_for(s)(student[s].values, params.mode);
    std::vector<Tensor<T>> scores;
    for (const auto& key : keys) scores.push_back(ops::row_dot(query, key));
    auto logits = ops::stack_columns(scores);
    if (share_across_instances) logits = ops::instance_mean(logits);
    out.per_student.push_back(ops::softmax(logits, params.tau));
    out.logits.push_back(logits);
  }
  return out;
}

/// Non-learned schemes: equal weights 1/t_L, or 1 on a single pair and 0
/// elsewhere (the single-hint special case).
template <class T>
AttentionWeights<T> fixed_allocation(Allocation kind, std::size_t student_layers, std::size_t teacher_layers,
                                     std::size_t batch, LayerPair pair = {}) {
  AttentionWeights<T> out;
  out.fixed = true;
  for (std::size_t s = 0; s < student_layers; ++s) {
    std::vector<T> values(batch * teacher_layers, T(0));
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t t = 0; t < teacher_layers; ++t) {
        if (kind == Allocation::equal) {
          values[i * teacher_layers + t] = T(1) / static_cast<T>(teacher_layers);
        } else if (kind == Allocation::one_hot) {
          values[i * teacher_layers + t] = (s == pair.student && t == pair.teacher) ? T(1) : T(0);
        } else {
          throw ConfigError("fixed_allocation supports only equal and one_hot");
        }
      }
    out.per_student.emplace_back(Shape{batch, teacher_layers}, std::move(values));
  }
  return out;
}

template <class T>
AttentionWeights<T> allocate(const DistillConfig& config, const std::vector<SimilarityMatrix<T>>& student,
                             const std::vector<SimilarityMatrix<T>>& teacher, const AllocatorParams<T>& params) {
  const std::size_t b = student.empty() ? 0 : student.front().values.dim(0);
  switch (config.allocation) {
    case Allocation::learned: return attention_allocate(student, teacher, params, false);
    case Allocation::shared: return attention_allocate(student, teacher, params, true);
    case Allocation::equal:
    case Allocation::one_hot:
      return fixed_allocation<T>(config.allocation, student.size(), teacher.size(), b, config.pair);
  }
  throw ConfigError("unknown allocation mode");
}

// ---------------------------------------------------------------------------
// Projection stacks

template <class T>
struct Projection {
  std::size_t out_h = 1, out_w = 1;
  ConvLayer<T> reduce;  // 1x1, c_s -> c_t
  ConvLayer<T> mix;     // 3x3, c_t -> c_t, padding 1
  ConvLayer<T> out;     // 1x1, c_t -> c_t

  std::size_t in_channels() const { return reduce.weight.dim(1); }
  std::size_t out_channels() const { return out.weight.dim(0); }
};

/// Adaptive average pool to the teacher's spatial size, then
/// conv1x1 -> ReLU -> conv3x3 -> ReLU -> conv1x1.
template <class T>
Tensor<T> project(const Tensor<T>& tap, const Projection<T>& proj) {
  if (tap.rank() != 4) throw DimensionError("project: tap must be (b,c,h,w), got " + shape_str(tap.shape()));
  if (tap.dim(1) != proj.in_channels()) {
    throw ConfigError("project: tap has " + std::to_string(tap.dim(1)) + " channels, projection expects " +
                      std::to_string(proj.in_channels()));
  }
  auto x = ops::adaptive_avg_pool2d(tap, proj.out_h, proj.out_w);
  x = ops::relu(ops::conv2d(x, proj.reduce.weight, proj.reduce.bias, 1, 0));
  x = ops::relu(ops::conv2d(x, proj.mix.weight, proj.mix.bias, 1, 1));
  return ops::conv2d(x, proj.out.weight, proj.out.bias, 1, 0);
}

/// Projections for every (student layer, teacher layer) pair.
template <class T>
class ProjectionStack {
 public:
  ProjectionStack() = default;

  ProjectionStack(const std::vector<TapShape>& student, const std::vector<TapShape>& teacher, std::uint64_t seed)
      : student_layers_(student.size()), teacher_layers_(teacher.size()) {
    std::mt19937_64 rng(seed);
    for (const auto& s : student)
      for (const auto& t : teacher) {
        Projection<T> p;
        p.out_h = t.height;
        p.out_w = t.width;
        const auto ct = t.channels;
        p.reduce = {detail::fan_in_gaussian<T>({ct, s.channels, 1, 1}, s.channels, 2.0, rng),
                    Tensor<T>::zeros({ct}, true), 1};
        p.mix = {detail::fan_in_gaussian<T>({ct, ct, 3, 3}, ct * 9, 2.0, rng), Tensor<T>::zeros({ct}, true), 1};
        p.out = {detail::fan_in_gaussian<T>({ct, ct, 1, 1}, ct, 1.0, rng), Tensor<T>::zeros({ct}, true), 1};
        grid_.push_back(std::move(p));
      }
  }

  std::size_t student_layers() const { return student_layers_; }
  std::size_t teacher_layers() const { return teacher_layers_; }

  Projection<T>& at(std::size_t s, std::size_t t) { return grid_.at(s * teacher_layers_ + t); }
  const Projection<T>& at(std::size_t s, std::size_t t) const { return grid_.at(s * teacher_layers_ + t); }

  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t s = 0; s < student_layers_; ++s)
      for (std::size_t t = 0; t < teacher_layers_; ++t) {
        const auto& p = at(s, t);
        const auto prefix = "proj" + std::to_string(s) + "_" + std::to_string(t);
        out.emplace_back(prefix + ".reduce.weight", p.reduce.weight);
        out.emplace_back(prefix + ".reduce.bias", p.reduce.bias);
        out.emplace_back(prefix + ".mix.weight", p.mix.weight);
        out.emplace_back(prefix + ".mix.bias", p.mix.bias);
        out.emplace_back(prefix + ".out.weight", p.out.weight);
        out.emplace_back(prefix + ".out.bias", p.out.bias);
      }
    return out;
  }

 private:
  std::size_t student_layers_ = 0;
  std::size_t teacher_layers_ = 0;
  std::vector<Projection<T>> grid_;
};

// ---------------------------------------------------------------------------
// Losses

/// sum_s sum_t sum_i alpha[s,t,i] * MSE(F_t[i], Proj(F_s[i], t)), with the
/// instance sum replaced by a mean under Reduction::mean. Teacher taps are
/// detached. Pairs whose fixed weight is zero for every instance are skipped.
template <class T>
Tensor<T> semckd_loss(const std::vector<Tensor<T>>& student_taps, const std::vector<Tensor<T>>& teacher_taps,
                      const AttentionWeights<T>& alpha, const ProjectionStack<T>& stacks,
                      Reduction reduction = Reduction::mean) {
  const std::size_t sl = student_taps.size(), tl = teacher_taps.size();
  if (sl == 0 || tl == 0) throw DimensionError("semckd_loss: no taps");
  const std::size_t b = student_taps.front().dim(0);
  if (alpha.student_layers() != sl || alpha.teacher_layers() != tl || alpha.batch() != b) {
    throw DimensionError("semckd_loss: attention weights (" + std::to_string(alpha.student_layers()) + "," +
                         std::to_string(alpha.teacher_layers()) + "," + std::to_string(alpha.batch()) +
                         ") do not match taps (" + std::to_string(sl) + "," + std::to_string(tl) + "," +
                         std::to_string(b) + ")");
  }
  if (stacks.student_layers() != sl || stacks.teacher_layers() != tl) {
    throw DimensionError("semckd_loss: projection grid does not match the tap counts");
  }
  std::vector<Tensor<T>> targets;
  for (const auto& t : teacher_taps) targets.push_back(t.detach());

  Tensor<T> total;
  for (std::size_t s = 0; s < sl; ++s)
    for (std::size_t t = 0; t < tl; ++t) {
      auto weights = alpha.pair(s, t);
      if (alpha.fixed && std::all_of(weights.data().begin(), weights.data().end(), [](T v) { return v == T(0); }))
        continue;
      try {
        auto projected = project(student_taps[s], stacks.at(s, t));
        if (projected.shape() != targets[t].shape()) {
          throw DimensionError("projection output " + shape_str(projected.shape()) + " vs teacher tap " +
                               shape_str(targets[t].shape()));
        }
        auto term = ops::sum(ops::mul(weights, ops::mse_rows(targets[t], projected)));
        total = total.defined() ? ops::add(total, term) : term;
      } catch (const NumericError& e) {
        throw NumericError("non-finite distance for layer pair (student " + std::to_string(s + 1) + ", teacher " +
                           std::to_string(t + 1) + "): " + e.what());
      }
    }
  if (!total.defined()) return Tensor<T>::scalar(T(0));
  return reduction == Reduction::mean ? ops::scale(total, T(1) / static_cast<T>(b)) : total;
}

/// CE(y, softmax(g_s)) + T^2 KL(softmax(g_t/T) || softmax(g_s/T)), averaged
/// (or summed) over the batch. The teacher logits get no gradient.
template <class T>
Tensor<T> kd_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, std::span<const int> labels,
                  double temperature, Reduction reduction = Reduction::mean) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be > 0");
  auto ce = ops::cross_entropy(student_logits, labels);
  auto kl = ops::kl_divergence(student_logits, teacher_logits.detach(), temperature);
  auto loss = ops::add(ce, ops::scale(kl, static_cast<T>(temperature * temperature)));
  if (reduction == Reduction::sum) loss = ops::scale(loss, static_cast<T>(student_logits.dim(0)));
  return loss;
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& kd, const Tensor<T>& fmd, double beta) {
  if (!(beta >= 0.0)) throw ConfigError("total_loss: beta must be >= 0");
  if (beta == 0.0 || !fmd.defined()) return kd;
  return ops::add(kd, ops::scale(fmd, static_cast<T>(beta)));
}

}  // namespace calibkd
