#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "calibkd/autograd.hpp"
#include "calibkd/parallel.hpp"
#include "calibkd/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, rejects
// non-finite results, and records itself on the active tape when one of its
// inputs requires gradients. Only scalar-times-tensor broadcasting exists.
namespace calibkd::ops {

namespace detail {

using calibkd::detail::accumulate;
using calibkd::detail::record;

template <class T>
void check_finite(const Tensor<T>& t, OpKind kind) {
  if (!all_finite(t.data())) {
    throw NumericError("non-finite value produced by " + std::string(op_name(kind)));
  }
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, OpKind kind) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, OpKind kind, const char* what) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op_name(kind)) + ": " + what + " must have rank " +
                         std::to_string(rank) + ", got shape " + shape_str(a.shape()));
  }
}

inline void require_temperature(double temperature, OpKind kind) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError(std::string(op_name(kind)) + ": temperature must be positive, got " +
                      std::to_string(temperature));
  }
}

// Row-major GEMM kernels (Eigen maps). C is accumulated into, never overwritten.

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

/// C(MxN) += A(MxK) * B(KxN)
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
}

/// C(MxN) += A(MxK) * B(NxK)^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
}

/// C(MxN) += A(KxM)^T * B(KxN)
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap<T>(c, M, N).noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
}

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w;
  std::size_t out_c, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_c * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

/// Patch rows of one image; row r starts at col + r * ld.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            T v = T(0);
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.in_h) && ix < static_cast<long>(g.in_w)) {
              v = x[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)];
            }
            row[oy * g.out_w + ox] = v;
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            dx[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + static_cast<std::size_t>(ix)] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <class T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  if (x.rank() == 0) return {1, 1};
  std::size_t cols = x.shape().back();
  return {cols == 0 ? 0 : x.numel() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, OpKind::add);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> y(a.shape(), std::move(out));
  detail::check_finite(y, OpKind::add);
  detail::record<T>(OpKind::add, {a, b}, y, [a, b](std::span<const T> g) mutable {
    detail::accumulate(a, g);
    detail::accumulate(b, g);
  });
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, OpKind::sub);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor<T> y(a.shape(), std::move(out));
  detail::check_finite(y, OpKind::sub);
  detail::record<T>(OpKind::sub, {a, b}, y, [a, b](std::span<const T> g) mutable {
    detail::accumulate(a, g);
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
  return y;
}

/// Elementwise product; either side may be a single-element tensor.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) detail::require_same_shape(a, b, OpKind::mul);
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[a_scalar ? 0 : i] * b[b_scalar ? 0 : i];
  Tensor<T> y(shape, std::move(out));
  detail::check_finite(y, OpKind::mul);
  detail::record<T>(OpKind::mul, {a, b}, y, [a, b, a_scalar, b_scalar, n](std::span<const T> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) ga[a_scalar ? 0 : i] += g[i] * b[b_scalar ? 0 : i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) gb[b_scalar ? 0 : i] += g[i] * a[a_scalar ? 0 : i];
    }
  });
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  Tensor<T> y(x.shape(), std::move(out));
  detail::check_finite(y, OpKind::scale);
  detail::record<T>(OpKind::scale, {x}, y, [x, factor](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
  return y;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  Tensor<T> y(x.shape(), std::move(out));
  detail::check_finite(y, OpKind::relu);
  // Subgradient at exactly zero is zero.
  detail::record<T>(OpKind::relu, {x}, y, [x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (x[i] > T(0)) gx[i] += g[i];
    }
  });
  return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto y = Tensor<T>::scalar(acc);
  detail::check_finite(y, OpKind::sum);
  detail::record<T>(OpKind::sum, {x}, y, [x](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (auto& v : gx) v += g[0];
  });
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  auto y = Tensor<T>::scalar(acc * inv);
  detail::check_finite(y, OpKind::mean);
  detail::record<T>(OpKind::mean, {x}, y, [x, inv](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (auto& v : gx) v += g[0] * inv;
  });
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> y(std::move(shape), x.values());
  detail::record<T>(OpKind::reshape, {x}, y, [x](std::span<const T> g) mutable {
    detail::accumulate(x, g);
  });
  return y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, OpKind::transpose, "input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  Tensor<T> y({c, r}, std::move(out));
  detail::record<T>(OpKind::transpose, {x}, y, [x, r, c](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, OpKind::matmul, "left operand");
  detail::require_rank(b, 2, OpKind::matmul, "right operand");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor<T> y({m, n}, std::move(out));
  detail::check_finite(y, OpKind::matmul);
  detail::record<T>(OpKind::matmul, {a, b}, y, [a, b, m, n, k](std::span<const T> g) mutable {
    if (a.requires_grad()) detail::gemm_nt(m, k, n, g.data(), b.data().data(), a.mutable_grad().data());
    if (b.requires_grad()) detail::gemm_tn(k, n, m, a.data().data(), g.data(), b.mutable_grad().data());
  });
  return y;
}

/// Fully connected layer: x (b x in) * weight^T (in x out) + bias.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x, 2, OpKind::linear, "input");
  detail::require_rank(weight, 2, OpKind::linear, "weight");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_f}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  std::vector<T> out(rows * out_f, T(0));
  detail::gemm_nt(rows, out_f, in, x.data().data(), weight.data().data(), out.data());
  if (bias.defined()) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < out_f; ++j) out[i * out_f + j] += bias[j];
  }
  Tensor<T> y({rows, out_f}, std::move(out));
  detail::check_finite(y, OpKind::linear);
  detail::record<T>(OpKind::linear, {x, weight, bias}, y,
                    [x, weight, bias, rows, in, out_f](std::span<const T> g) mutable {
                      if (x.requires_grad())
                        detail::gemm_nn(rows, in, out_f, g.data(), weight.data().data(),
                                        x.mutable_grad().data());
                      if (weight.requires_grad())
                        detail::gemm_tn(out_f, in, rows, g.data(), x.data().data(),
                                        weight.mutable_grad().data());
                      if (bias.defined() && bias.requires_grad()) {
                        auto gb = bias.mutable_grad();
                        for (std::size_t i = 0; i < rows; ++i)
                          for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[i * out_f + j];
                      }
                    });
  return y;
}

/// Gram matrix of the flattened leading-axis instances: R(x) * R(x)^T.
template <class T>
Tensor<T> batched_outer(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("batched_outer: scalar input");
  const std::size_t b = x.dim(0);
  const std::size_t d = b == 0 ? 0 : x.numel() / b;
  std::vector<T> out(b * b, T(0));
  detail::gemm_nt(b, b, d, x.data().data(), x.data().data(), out.data());
  Tensor<T> y({b, b}, std::move(out));
  detail::check_finite(y, OpKind::batched_outer);
  detail::record<T>(OpKind::batched_outer, {x}, y, [x, b, d](std::span<const T> g) mutable {
    std::vector<T> sym(b * b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) sym[i * b + j] = g[i * b + j] + g[j * b + i];
    detail::gemm_nn(b, d, b, sym.data(), x.data().data(), x.mutable_grad().data());
  });
  return y;
}

/// Per-row dot product of two equally shaped matrices; returns shape (rows).
template <class T>
Tensor<T> row_dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, OpKind::row_dot, "left operand");
  detail::require_same_shape(a, b, OpKind::row_dot);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rows, T(0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i] += a[i * cols + j] * b[i * cols + j];
  Tensor<T> y({rows}, std::move(out));
  detail::check_finite(y, OpKind::row_dot);
  detail::record<T>(OpKind::row_dot, {a, b}, y, [a, b, rows, cols](std::span<const T> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[i] * b[i * cols + j];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gb[i * cols + j] += g[i] * a[i * cols + j];
    }
  });
  return y;
}

/// Places n vectors of length b side by side as a (b x n) matrix.
template <class T>
Tensor<T> stack_columns(const std::vector<Tensor<T>>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const std::size_t rows = columns.front().numel();
  const std::size_t n = columns.size();
  std::vector<T> out(rows * n);
  for (std::size_t j = 0; j < n; ++j) {
    if (columns[j].rank() != 1 || columns[j].numel() != rows) {
      throw DimensionError("stack_columns: column " + std::to_string(j) + " has shape " +
                           shape_str(columns[j].shape()) + ", expected (" + std::to_string(rows) + ")");
    }
    for (std::size_t i = 0; i < rows; ++i) out[i * n + j] = columns[j][i];
  }
  Tensor<T> y({rows, n}, std::move(out));
  detail::record<T>(OpKind::stack_columns, columns, y, [columns, rows, n](std::span<const T> g) mutable {
    for (std::size_t j = 0; j < n; ++j) {
      if (!columns[j].requires_grad()) continue;
      auto gc = columns[j].mutable_grad();
      for (std::size_t i = 0; i < rows; ++i) gc[i] += g[i * n + j];
    }
  });
  return y;
}

template <class T>
Tensor<T> column(const Tensor<T>& x, std::size_t j) {
  detail::require_rank(x, 2, OpKind::column, "input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (j >= cols) {
    throw DimensionError("column: index " + std::to_string(j) + " out of range for " + shape_str(x.shape()));
  }
  std::vector<T> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = x[i * cols + j];
  Tensor<T> y({rows}, std::move(out));
  detail::record<T>(OpKind::column, {x}, y, [x, rows, cols, j](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i) gx[i * cols + j] += g[i];
  });
  return y;
}

/// Replaces every row by the column-wise mean over rows. All output rows
/// are produced from the same sums, so they are bitwise identical.
template <class T>
Tensor<T> instance_mean(const Tensor<T>& x) {
  detail::require_rank(x, 2, OpKind::instance_mean, "input");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> avg(cols, T(0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) avg[j] += x[i * cols + j];
  for (auto& v : avg) v /= static_cast<T>(rows);
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) std::copy(avg.begin(), avg.end(), out.begin() + i * cols);
  Tensor<T> y({rows, cols}, std::move(out));
  detail::record<T>(OpKind::instance_mean, {x}, y, [x, rows, cols](std::span<const T> g) mutable {
    std::vector<T> colsum(cols, T(0));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) colsum[j] += g[i * cols + j];
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += colsum[j] / static_cast<T>(rows);
  });
  return y;
}

/// Row-wise x / max(||x||_2, eps).
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  const auto [rows, cols] = detail::rows_cols(x);
  std::vector<T> out(x.numel());
  std::vector<T> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T sq = T(0);
    for (std::size_t j = 0; j < cols; ++j) sq += x[i * cols + j] * x[i * cols + j];
    norms[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[i * cols + j] / norms[i];
  }
  Tensor<T> y(x.shape(), std::move(out));
  detail::check_finite(y, OpKind::l2_normalize);
  detail::record<T>(OpKind::l2_normalize, {x}, y,
                    [x, y, norms, rows, cols, eps](std::span<const T> g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t i = 0; i < rows; ++i) {
                        const T n = norms[i];
                        T dot = T(0);
                        for (std::size_t j = 0; j < cols; ++j) dot += y[i * cols + j] * g[i * cols + j];
                        const bool clamped = !(n > eps);
                        for (std::size_t j = 0; j < cols; ++j) {
                          const T gj = g[i * cols + j];
                          gx[i * cols + j] += clamped ? gj / n : (gj - y[i * cols + j] * dot) / n;
                        }
                      }
                    });
  return y;
}

// ---------------------------------------------------------------------------
// Probabilistic ops. Rows are taken along the last axis.

/// softmax(x / temperature) along the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, double temperature = 1.0) {
  detail::require_temperature(temperature, OpKind::softmax);
  const auto [rows, cols] = detail::rows_cols(x);
  const T inv_t = T(1) / static_cast<T>(temperature);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = x.data().data() + i * cols;
    T mx = *std::max_element(row, row + cols) * inv_t;
    T total = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = std::exp(row[j] * inv_t - mx);
      total += out[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] /= total;
  }
  Tensor<T> y(x.shape(), std::move(out));
  detail::check_finite(y, OpKind::softmax);
  detail::record<T>(OpKind::softmax, {x}, y, [x, y, rows, cols, inv_t](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot) * inv_t;
    }
  });
  return y;
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, double temperature = 1.0) {
  detail::require_temperature(temperature, OpKind::log_softmax);
  const auto [rows, cols] = detail::rows_cols(x);
  const T inv_t = T(1) / static_cast<T>(temperature);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = x.data().data() + i * cols;
    T mx = *std::max_element(row, row + cols) * inv_t;
    T total = T(0);
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(row[j] * inv_t - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = row[j] * inv_t - lse;
  }
  Tensor<T> y(x.shape(), std::move(out));
  detail::check_finite(y, OpKind::log_softmax);
  detail::record<T>(OpKind::log_softmax, {x}, y, [x, y, rows, cols, inv_t](std::span<const T> g) mutable {
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < rows; ++i) {
      T gsum = T(0);
      for (std::size_t j = 0; j < cols; ++j) gsum += g[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j)
        gx[i * cols + j] += (g[i * cols + j] - std::exp(y[i * cols + j]) * gsum) * inv_t;
    }
  });
  return y;
}

/// Mean cross entropy between softmax(logits) and integer labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, OpKind::cross_entropy, "logits");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  std::vector<int> y_true(labels.begin(), labels.end());
  for (int label : y_true) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw DataError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
  }
  std::vector<T> prob(logits.numel());
  T loss = T(0);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = logits.data().data() + i * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t j = 0; j < classes; ++j) {
      prob[i * classes + j] = std::exp(row[j] - mx);
      total += prob[i * classes + j];
    }
    for (std::size_t j = 0; j < classes; ++j) prob[i * classes + j] /= total;
    loss += mx + std::log(total) - row[y_true[i]];
  }
  auto y = Tensor<T>::scalar(loss / static_cast<T>(rows));
  detail::check_finite(y, OpKind::cross_entropy);
  detail::record<T>(OpKind::cross_entropy, {logits}, y,
                    [logits, prob = std::move(prob), y_true, rows, classes](std::span<const T> g) mutable {
                      auto gl = logits.mutable_grad();
                      const T s = g[0] / static_cast<T>(rows);
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < classes; ++j) {
                          T d = prob[i * classes + j] - (static_cast<int>(j) == y_true[i] ? T(1) : T(0));
                          gl[i * classes + j] += d * s;
                        }
                    });
  return y;
}

/// Mean over rows of KL(softmax(target/T) || softmax(input/T)). The target
/// distribution is treated as a constant: no gradient reaches it.
template <class T>
Tensor<T> kl_divergence(const Tensor<T>& input_logits, const Tensor<T>& target_logits, double temperature) {
  detail::require_temperature(temperature, OpKind::kl_divergence);
  detail::require_rank(input_logits, 2, OpKind::kl_divergence, "input logits");
  detail::require_same_shape(input_logits, target_logits, OpKind::kl_divergence);
  const std::size_t rows = input_logits.dim(0), cols = input_logits.dim(1);
  const T inv_t = T(1) / static_cast<T>(temperature);
  std::vector<T> p_in(input_logits.numel()), p_tg(input_logits.numel());
  T loss = T(0);
  auto softmax_row = [&](const T* row, T* out, T& lse) {
    T mx = *std::max_element(row, row + cols) * inv_t;
    T total = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      out[j] = std::exp(row[j] * inv_t - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[j] /= total;
    lse = mx + std::log(total);
  };
  for (std::size_t i = 0; i < rows; ++i) {
    const T* s_row = input_logits.data().data() + i * cols;
    const T* t_row = target_logits.data().data() + i * cols;
    T lse_s, lse_t;
    softmax_row(s_row, p_in.data() + i * cols, lse_s);
    softmax_row(t_row, p_tg.data() + i * cols, lse_t);
    for (std::size_t j = 0; j < cols; ++j) {
      const T pt = p_tg[i * cols + j];
      if (pt > T(0)) loss += pt * ((t_row[j] * inv_t - lse_t) - (s_row[j] * inv_t - lse_s));
    }
  }
  auto y = Tensor<T>::scalar(loss / static_cast<T>(rows));
  detail::check_finite(y, OpKind::kl_divergence);
  detail::record<T>(OpKind::kl_divergence, {input_logits}, y,
                    [input_logits, p_in = std::move(p_in), p_tg = std::move(p_tg), rows,
                     inv_t](std::span<const T> g) mutable {
                      auto gi = input_logits.mutable_grad();
                      const T s = g[0] * inv_t / static_cast<T>(rows);
                      for (std::size_t k = 0; k < gi.size(); ++k) gi[k] += (p_in[k] - p_tg[k]) * s;
                    });
  return y;
}

/// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, OpKind::mse);
  if (a.numel() == 0) throw DimensionError("mse of empty tensors");
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.numel());
  auto y = Tensor<T>::scalar(acc * inv);
  detail::check_finite(y, OpKind::mse);
  detail::record<T>(OpKind::mse, {a, b}, y, [a, b, inv](std::span<const T> g) mutable {
    const T s = T(2) * g[0] * inv;
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * (a[i] - b[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= s * (a[i] - b[i]);
    }
  });
  return y;
}

/// Per-instance MSE: mean over all non-leading axes; returns shape (b).
template <class T>
Tensor<T> mse_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, OpKind::mse_rows);
  if (a.rank() < 1 || a.numel() == 0) throw DimensionError("mse_rows needs a non-empty batch");
  const std::size_t rows = a.dim(0), cols = a.numel() / rows;
  std::vector<T> out(rows, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      const T d = a[i * cols + j] - b[i * cols + j];
      acc += d * d;
    }
    out[i] = acc / static_cast<T>(cols);
  }
  Tensor<T> y({rows}, std::move(out));
  detail::check_finite(y, OpKind::mse_rows);
  detail::record<T>(OpKind::mse_rows, {a, b}, y, [a, b, rows, cols](std::span<const T> g) mutable {
    const T inv = T(2) / static_cast<T>(cols);
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          ga[i * cols + j] += g[i] * inv * (a[i * cols + j] - b[i * cols + j]);
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          gb[i * cols + j] -= g[i] * inv * (a[i * cols + j] - b[i * cols + j]);
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Spatial ops on NCHW tensors

/// 2-D convolution. `bias` may be an undefined tensor.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(x, 4, OpKind::conv2d, "input");
  detail::require_rank(weight, 4, OpKind::conv2d, "weight");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  detail::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                           weight.dim(3), stride, padding, 0, 0};
  if (weight.dim(1) != geo.in_c) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(geo.in_c) +
                         " channels, weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.shape() != Shape{geo.out_c}) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  if (geo.in_h + 2 * padding < geo.kh || geo.in_w + 2 * padding < geo.kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  geo.out_h = (geo.in_h + 2 * padding - geo.kh) / stride + 1;
  geo.out_w = (geo.in_w + 2 * padding - geo.kw) / stride + 1;

  const std::size_t patch = geo.patch(), pixels = geo.pixels();
  const std::size_t in_sz = geo.in_c * geo.in_h * geo.in_w;
  const std::size_t out_sz = geo.out_c * pixels;
  const std::size_t ld = geo.batch * pixels;  // columns of the batched patch matrix
  const bool tracked = Tape<T>::current() && calibkd::detail::any_requires_grad<T>({&x, &weight, &bias});

  // cols: patch x (batch * pixels), image n occupying columns [n*pixels, (n+1)*pixels).
  std::vector<T> cols(patch * ld);
  parallel_for(geo.batch, [&](std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) detail::im2col(x.data().data() + n * in_sz, geo, cols.data() + n * pixels, ld);
  });
  std::vector<T> prod(geo.out_c * ld, T(0));
  detail::gemm_nn(geo.out_c, ld, patch, weight.data().data(), cols.data(), prod.data());
  std::vector<T> out(geo.batch * out_sz);
  for (std::size_t n = 0; n < geo.batch; ++n)
    for (std::size_t o = 0; o < geo.out_c; ++o) {
      const T b = bias.defined() ? bias[o] : T(0);
      const T* src = prod.data() + o * ld + n * pixels;
      T* dst = out.data() + n * out_sz + o * pixels;
      for (std::size_t p = 0; p < pixels; ++p) dst[p] = src[p] + b;
    }
  Tensor<T> y({geo.batch, geo.out_c, geo.out_h, geo.out_w}, std::move(out));
  detail::check_finite(y, OpKind::conv2d);
  if (!tracked) return y;

  detail::record<T>(
      OpKind::conv2d, {x, weight, bias}, y,
      [x, weight, bias, geo, cols = std::move(cols), in_sz, out_sz, ld](std::span<const T> g) mutable {
        const std::size_t patch = geo.patch(), pixels = geo.pixels();
        // Gradient in the batched (out_c x batch*pixels) layout.
        std::vector<T> gm(geo.out_c * ld);
        for (std::size_t n = 0; n < geo.batch; ++n)
          for (std::size_t o = 0; o < geo.out_c; ++o)
            std::copy_n(g.data() + n * out_sz + o * pixels, pixels, gm.data() + o * ld + n * pixels);
        if (weight.requires_grad()) {
          detail::gemm_nt(geo.out_c, patch, ld, gm.data(), cols.data(), weight.mutable_grad().data());
        }
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.mutable_grad();
          for (std::size_t o = 0; o < geo.out_c; ++o) {
            T acc = T(0);
            for (std::size_t k = 0; k < ld; ++k) acc += gm[o * ld + k];
            gb[o] += acc;
          }
        }
        if (x.requires_grad()) {
          std::vector<T> dcol(patch * ld, T(0));
          detail::gemm_tn(patch, ld, geo.out_c, weight.data().data(), gm.data(), dcol.data());
          T* gx = x.mutable_grad().data();
          parallel_for(geo.batch, [&](std::size_t begin, std::size_t end) {
            for (std::size_t n = begin; n < end; ++n)
              detail::col2im_add(dcol.data() + n * pixels, geo, gx + n * in_sz, ld);
          });
        }
      });
  return y;
}

/// Adaptive average pooling to (out_h, out_w); bins follow
/// [floor(i*H/out), ceil((i+1)*H/out)), so enlarging is allowed.
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 4, OpKind::adaptive_avg_pool2d, "input");
  if (out_h == 0 || out_w == 0) throw DimensionError("adaptive_avg_pool2d: empty output size");
  const std::size_t nb = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) {
    Tensor<T> y(x.shape(), x.values());
    detail::record<T>(OpKind::adaptive_avg_pool2d, {x}, y, [x](std::span<const T> g) mutable {
      detail::accumulate(x, g);
    });
    return y;
  }
  struct Bin {
    std::size_t begin, end;
  };
  auto bins = [](std::size_t in, std::size_t out) {
    std::vector<Bin> result(out);
    for (std::size_t i = 0; i < out; ++i) result[i] = {i * in / out, ((i + 1) * in + out - 1) / out};
    return result;
  };
  const auto rows = bins(h, out_h), cols = bins(w, out_w);
  std::vector<T> out(nb * c * out_h * out_w);
  for (std::size_t plane = 0; plane < nb * c; ++plane) {
    const T* src = x.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        T acc = T(0);
        for (std::size_t iy = rows[oy].begin; iy < rows[oy].end; ++iy)
          for (std::size_t ix = cols[ox].begin; ix < cols[ox].end; ++ix) acc += src[iy * w + ix];
        const auto count = (rows[oy].end - rows[oy].begin) * (cols[ox].end - cols[ox].begin);
        out[(plane * out_h + oy) * out_w + ox] = acc / static_cast<T>(count);
      }
  }
  Tensor<T> y({nb, c, out_h, out_w}, std::move(out));
  detail::check_finite(y, OpKind::adaptive_avg_pool2d);
  detail::record<T>(OpKind::adaptive_avg_pool2d, {x}, y,
                    [x, rows, cols, nb, c, h, w, out_h, out_w](std::span<const T> g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t plane = 0; plane < nb * c; ++plane)
                        for (std::size_t oy = 0; oy < out_h; ++oy)
                          for (std::size_t ox = 0; ox < out_w; ++ox) {
                            const auto count =
                                (rows[oy].end - rows[oy].begin) * (cols[ox].end - cols[ox].begin);
                            const T share = g[(plane * out_h + oy) * out_w + ox] / static_cast<T>(count);
                            for (std::size_t iy = rows[oy].begin; iy < rows[oy].end; ++iy)
                              for (std::size_t ix = cols[ox].begin; ix < cols[ox].end; ++ix)
                                gx[plane * h * w + iy * w + ix] += share;
                          }
                    });
  return y;
}

}  // namespace calibkd::ops
