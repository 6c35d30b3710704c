#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "calibkd/tensor.hpp"

namespace calibkd {

/// Step schedule: lr(epoch) = initial * factor^(number of milestones <= epoch).
struct LrSchedule {
  double initial = 0.05;
  std::vector<std::size_t> milestones;
  double factor = 0.1;

  void validate() const {
    if (!(initial > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("lr decay factor must be in (0, 1]");
  }

  double at(std::size_t epoch) const {
    double lr = initial;
    for (auto m : milestones)
      if (epoch >= m) lr *= factor;
    return lr;
  }
};

/// SGD with Nesterov momentum and L2 weight decay:
///   g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)
template <class T>
class NesterovSgd {
 public:
  NesterovSgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  }

  /// Registers parameters; `decay` selects whether weight decay applies.
  void add(const std::vector<Tensor<T>>& params, bool decay) {
    for (const auto& p : params) {
      slots_.push_back({p, std::vector<T>(p.numel(), T(0)), decay});
    }
  }

  void step(double lr) {
    const T mu = static_cast<T>(momentum_);
    const T step_size = static_cast<T>(lr);
    for (auto& slot : slots_) {
      auto values = slot.param.mutable_data();
      auto grad = slot.param.grad();
      const T wd = slot.decay ? static_cast<T>(weight_decay_) : T(0);
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = (grad.empty() ? T(0) : grad[i]) + wd * values[i];
        slot.velocity[i] = mu * slot.velocity[i] + g;
        values[i] -= step_size * (g + mu * slot.velocity[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& slot : slots_) slot.param.zero_grad();
  }

  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor<T> param;
    std::vector<T> velocity;
    bool decay;
  };

  double momentum_;
  double weight_decay_;
  std::vector<Slot> slots_;
};

}  // namespace calibkd
