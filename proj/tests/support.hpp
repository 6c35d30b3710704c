#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "calibkd/gradcheck.hpp"
#include "calibkd/ops.hpp"
#include "calibkd/semckd.hpp"

namespace calibkd::testing {

inline Tensor<double> randn(Shape shape, std::mt19937_64& rng, double sd = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

/// Values bounded away from zero so ReLU kinks stay outside the finite
/// difference stencil.
inline Tensor<double> randn_off_zero(Shape shape, std::mt19937_64& rng) {
  auto t = randn(std::move(shape), rng);
  for (auto& v : t.mutable_data()) v = v >= 0 ? v + 0.1 : v - 0.1;
  return t;
}

/// Scalar readout with random weights: every output coordinate gets a
/// distinct nonzero gradient.
inline Tensor<double> readout(const Tensor<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, randn(y.shape(), rng)));
}

struct GradCase {
  std::string name;
  Tensor<double> point;
  std::function<Tensor<double>(Tensor<double>&)> f;
};

/// One gradient case per differentiable op input, drawn with `seed`.
inline std::vector<GradCase> op_grad_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(2, 4);
  const std::size_t r = dim(rng), c = dim(rng), k = dim(rng);
  std::vector<GradCase> cases;
  auto add = [&](std::string name, Tensor<double> point, std::function<Tensor<double>(Tensor<double>&)> f) {
    cases.push_back({std::move(name), std::move(point), std::move(f)});
  };
  const auto other = randn({r, c}, rng);
  const std::uint64_t w = seed * 7 + 1;

  add("add", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::add(x, other), w); });
  add("sub", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::sub(other, x), w); });
  add("mul", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::mul(x, other), w); });
  add("mul_self", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::mul(x, x), w); });
  add("scale", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::scale(x, -1.7), w); });
  add("relu", randn_off_zero({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::relu(x), w); });
  add("sum", randn({r, c}, rng), [](Tensor<double>& x) { return ops::scale(ops::sum(ops::mul(x, x)), 0.5); });
  add("mean", randn({r, c}, rng), [](Tensor<double>& x) { return ops::mean(ops::mul(x, x)); });
  add("reshape", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::reshape(x, {c, r}), w); });
  add("transpose", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::transpose(x), w); });
  const auto mat_b = randn({c, k}, rng);
  add("matmul_a", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::matmul(x, mat_b), w); });
  const auto mat_a = randn({k, r}, rng);
  add("matmul_b", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::matmul(mat_a, x), w); });
  const auto lin_w = randn({k, c}, rng), lin_b = randn({k}, rng), lin_x = randn({r, c}, rng);
  add("linear_x", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::linear(x, lin_w, lin_b), w); });
  add("linear_w", randn({k, c}, rng), [=](Tensor<double>& p) { return readout(ops::linear(lin_x, p, lin_b), w); });
  add("linear_b", randn({k}, rng), [=](Tensor<double>& p) { return readout(ops::linear(lin_x, lin_w, p), w); });
  add("batched_outer", randn({r, c, 2, 2}, rng), [=](Tensor<double>& x) { return readout(ops::batched_outer(x), w); });
  add("row_dot", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::row_dot(x, other), w); });
  add("stack_columns", randn({r}, rng), [=](Tensor<double>& x) {
    return readout(ops::stack_columns(std::vector<Tensor<double>>{x, ops::scale(x, 2.0), ops::mul(x, x)}), w);
  });
  add("column", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::column(x, c - 1), w); });
  add("instance_mean", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::instance_mean(x), w); });
  add("l2_normalize", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::l2_normalize(x), w); });
  add("softmax", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::softmax(x, 1.0), w); });
  add("softmax_tau", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::softmax(x, 0.3), w); });
  add("log_softmax", randn({r, c}, rng), [=](Tensor<double>& x) { return readout(ops::log_softmax(x, 2.0), w); });
  std::vector<int> labels(r);
  for (std::size_t i = 0; i < r; ++i) labels[i] = static_cast<int>((i * 5 + seed) % c);
  add("cross_entropy", randn({r, c}, rng), [=](Tensor<double>& x) { return ops::cross_entropy(x, labels); });
  const auto target_logits = randn({r, c}, rng);
  add("kl_divergence_input", randn({r, c}, rng),
      [=](Tensor<double>& x) { return ops::kl_divergence(x, target_logits, 4.0); });
  add("mse", randn({r, c}, rng), [=](Tensor<double>& x) { return ops::mse(x, other); });
  add("mse_rows", randn({r, c, 2}, rng), [=](Tensor<double>& x) {
    return readout(ops::mse_rows(x, ops::scale(x, 0.3)), w);
  });
  const auto conv_w = randn({3, 2, 3, 3}, rng, 0.5), conv_b = randn({3}, rng), conv_x = randn({2, 2, 5, 5}, rng);
  add("conv2d_x", randn({2, 2, 5, 5}, rng),
      [=](Tensor<double>& x) { return readout(ops::conv2d(x, conv_w, conv_b, 1, 1), w); });
  add("conv2d_w_stride2", randn({3, 2, 3, 3}, rng),
      [=](Tensor<double>& p) { return readout(ops::conv2d(conv_x, p, conv_b, 2, 1), w); });
  add("conv2d_b", randn({3}, rng), [=](Tensor<double>& p) { return readout(ops::conv2d(conv_x, conv_w, p, 1, 0), w); });
  add("adaptive_avg_pool2d", randn({2, 2, 5, 5}, rng),
      [=](Tensor<double>& x) { return readout(ops::adaptive_avg_pool2d(x, 2, 3), w); });
  return cases;
}

/// The full distillation objective kd + beta * fmd on a tiny
/// teacher/student pair in double precision, with the point being a
/// student conv weight, an allocator weight or a projection weight.
inline std::vector<GradCase> composite_grad_cases(std::uint64_t seed) {
  NetworkSpec ts, ss;
  ts.stages = {{3, 1, true}, {4, 1, true}, {4, 1, false}};
  ss.stages = {{2, 1, true}, {3, 1, true}};
  for (auto* s : {&ts, &ss}) {
    s->in_height = s->in_width = 6;
    s->num_classes = 3;
  }
  const std::size_t b = 3;
  auto teacher = std::make_shared<Network<double>>(build_network<double>(ts, seed + 1));
  auto student = std::make_shared<Network<double>>(build_network<double>(ss, seed + 2));
  auto alloc = std::make_shared<AllocatorParams<double>>(
      build_allocator<double>(b, 2, 3, MlpMode::nonlinear, 1.0, false, seed + 3));
  auto stacks = std::make_shared<ProjectionStack<double>>(ss.tap_shapes(), ts.tap_shapes(), seed + 4);
  std::mt19937_64 rng(seed);
  const auto x = randn({b, 1, 6, 6}, rng);
  const std::vector<int> labels{0, 2, 1};

  auto objective = [=](Allocation allocation) {
    return [=](Tensor<double>&) {
      const auto t = forward_with_taps(*teacher, x);
      const auto s = forward_with_taps(*student, x);
      const auto sa = similarity_matrices(s.taps, Side::student);
      const auto ta = similarity_matrices(t.taps, Side::teacher);
      DistillConfig dc;
      dc.allocation = allocation;
      dc.pair = {1, 2};
      const auto alpha = allocate(dc, sa, ta, *alloc);
      const auto fmd = semckd_loss(s.taps, t.taps, alpha, *stacks);
      return total_loss(kd_loss(s.logits, t.logits, labels, 4.0), fmd, 0.7);
    };
  };
  std::vector<GradCase> cases;
  cases.push_back({"semckd_student_conv", student->stages()[0][0].weight, objective(Allocation::learned)});
  cases.push_back({"semckd_student_fc", student->fc_weight(), objective(Allocation::learned)});
  cases.push_back({"semckd_query_w1", alloc->query[0].w1, objective(Allocation::learned)});
  cases.push_back({"semckd_key_w2", alloc->key[0].w2, objective(Allocation::learned)});
  cases.push_back({"semckd_projection_mix", stacks->at(1, 2).mix.weight, objective(Allocation::learned)});
  cases.push_back({"shared_student_conv", student->stages()[1][0].weight, objective(Allocation::shared)});
  cases.push_back({"fitnet_student_conv", student->stages()[1][0].weight, objective(Allocation::one_hot)});
  return cases;
}

/// Finite-difference step used for every gradient case.
inline constexpr double kGradEps = 1e-6;

}  // namespace calibkd::testing
