#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include "calibkd/tensor.hpp"

namespace calibkd {

enum class OpKind {
  matmul,
  conv2d,
  relu,
  adaptive_avg_pool2d,
  softmax,
  log_softmax,
  cross_entropy,
  kl_divergence,
  mse,
  mse_rows,
  add,
  sub,
  mul,
  scale,
  sum,
  mean,
  reshape,
  transpose,
  l2_normalize,
  batched_outer,
  linear,
  row_dot,
  stack_columns,
  column,
  instance_mean,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::adaptive_avg_pool2d: return "adaptive_avg_pool2d";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::kl_divergence: return "kl_divergence";
    case OpKind::mse: return "mse";
    case OpKind::mse_rows: return "mse_rows";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::batched_outer: return "batched_outer";
    case OpKind::linear: return "linear";
    case OpKind::row_dot: return "row_dot";
    case OpKind::stack_columns: return "stack_columns";
    case OpKind::column: return "column";
    case OpKind::instance_mean: return "instance_mean";
  }
  return "unknown";
}

/// Ordered record of differentiable operations for one thread.
///
/// Constructing a Tape makes it the recording target of the current thread
/// until it is destroyed (tapes nest). Operations executed while no tape is
/// active, or whose inputs do not require gradients, are not recorded.
template <class T>
class Tape {
 public:
  struct Entry {
    OpKind kind;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    // Receives d(loss)/d(output) and accumulates into the inputs' grads.
    std::function<void(std::span<const T>)> backward;
  };

  Tape() : previous_(active_) { active_ = this; }
  ~Tape() { active_ = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return active_; }

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
  /// existing buffers; callers zero parameter grads between steps.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1) {
      throw ContractError("backprop needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (entries_.empty()) throw ContractError("backprop on an empty tape");
    if (!loss.requires_grad()) {
      throw ContractError("loss does not depend on any tensor that requires gradients");
    }
    loss.mutable_grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(it->output.grad());
    }
  }

 private:
  inline static thread_local Tape* active_ = nullptr;
  Tape* previous_;
  std::vector<Entry> entries_;
};

template <class T>
void backprop(const Tensor<T>& loss) {
  auto* tape = Tape<T>::current();
  if (!tape) throw ContractError("backprop without an active tape");
  tape->backward(loss);
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Records `output` on the active tape when any input needs gradients.
/// Returns whether the op was recorded.
template <class T>
bool record(OpKind kind, std::vector<Tensor<T>> inputs, Tensor<T>& output,
            std::function<void(std::span<const T>)> backward) {
  auto* tape = Tape<T>::current();
  if (!tape) return false;
  bool needed = false;
  for (const auto& in : inputs) needed = needed || (in.defined() && in.requires_grad());
  if (!needed) return false;
  output.set_requires_grad(true);
  tape->record({kind, std::move(inputs), output, std::move(backward)});
  return true;
}

template <class T>
void accumulate(const Tensor<T>& target, std::span<const T> delta) {
  if (!target.defined() || !target.requires_grad()) return;
  auto g = target.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

}  // namespace calibkd
