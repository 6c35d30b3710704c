#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "calibkd/autograd.hpp"

namespace calibkd {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the taped gradient of f at `point` against central finite
/// differences. `point` is perturbed in place (and restored), so f may also
/// reach it through captured state such as a network parameter.
///
/// Error per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult check_gradients(const std::function<Tensor<double>(Tensor<double>&)>& f,
                                       Tensor<double> point, double eps) {
  if (!(eps > 0.0)) throw ContractError("check_gradients: eps must be positive");

  const bool had_flag = point.requires_grad();
  point.set_requires_grad(true);
  point.zero_grad();
  double base = 0.0;
  {
    Tape<double> tape;
    auto loss = f(point);
    if (loss.numel() != 1) throw ContractError("check_gradients: f must return a scalar");
    base = loss.item();
    if (loss.requires_grad()) tape.backward(loss);
  }
  std::vector<double> analytic(point.numel(), 0.0);
  if (point.has_grad()) std::copy(point.grad().begin(), point.grad().end(), analytic.begin());
  point.zero_grad();
  point.set_requires_grad(had_flag);

  auto eval = [&] { return f(point).item(); };
  const double again = eval();
  if (std::memcmp(&again, &base, sizeof(double)) != 0) {
    throw OracleError("check_gradients: f is not deterministic (" + std::to_string(base) + " vs " +
                      std::to_string(again) + ")");
  }

  GradCheckResult result;
  auto values = point.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = eval();
    values[i] = saved - eps;
    const double down = eval();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > result.max_relative_error) result = {err, i, analytic[i], numeric};
  }
  return result;
}

}  // namespace calibkd
