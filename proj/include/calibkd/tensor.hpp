#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calibkd/error.hpp"

namespace calibkd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor handle.
///
/// Copies share storage (like a smart pointer); use clone() for a deep copy.
/// Values are treated as immutable once an operation produced them, the
/// exceptions being parameter updates and the gradient buffer.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return impl().shape[axis];
  }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  /// Writable view; reserved for initialization and optimizer updates.
  std::span<T> mutable_data() { return impl().data; }
  const std::vector<T>& values() const { return impl().data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl().data[0];
  }

  T operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag) { impl().requires_grad = flag; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  /// Gradient buffer, allocated (zero-filled) on first access. Const on the
  /// handle: gradients accumulate even through read-only references.
  std::span<T> mutable_grad() const {
    auto& g = impl().grad;
    if (g.empty()) g.assign(impl().data.size(), T(0));
    return g;
  }
  void zero_grad() const { impl().grad.clear(); }

  Tensor clone() const { return Tensor(shape(), impl().data, requires_grad()); }
  Tensor detach() const { return Tensor(shape(), impl().data, false); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl().data.begin(), impl().data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Impl& impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

template <class T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace calibkd
