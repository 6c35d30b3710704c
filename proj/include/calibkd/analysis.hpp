#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "calibkd/error.hpp"
#include "calibkd/tensor.hpp"

// Theory checks and evaluation metrics. Everything here runs in double
// precision on immutable inputs.
namespace calibkd::analysis {

using Matrix = Eigen::MatrixXd;

/// Singular values below this fraction of the largest count as zero.
inline constexpr double kRankTolerance = 1e-10;

/// R(F): (b, c, h, w) -> (b, c*h*w).
template <class T>
Matrix flatten_instances(const Tensor<T>& tap) {
  if (tap.rank() < 1) throw DimensionError("flatten_instances: scalar tensor");
  const std::size_t b = tap.dim(0);
  const std::size_t d = b == 0 ? 0 : tap.numel() / b;
  Matrix m(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<double>(tap[i * d + j]);
  return m;
}

/// Appends zero columns so both matrices have the same width. Zero columns
/// leave A^T B's singular values and ||R_t^T R_s||_F unchanged.
inline std::pair<Matrix, Matrix> pad_columns(const Matrix& a, const Matrix& b) {
  const auto cols = std::max(a.cols(), b.cols());
  Matrix pa = Matrix::Zero(a.rows(), cols), pb = Matrix::Zero(b.rows(), cols);
  pa.leftCols(a.cols()) = a;
  pb.leftCols(b.cols()) = b;
  return {pa, pb};
}

namespace detail {

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite input");
}

inline Eigen::BDCSVD<Matrix> svd(const Matrix& m, unsigned options) {
  Eigen::BDCSVD<Matrix> result(m, options);
  if (result.info() != Eigen::Success) throw NumericError("SVD did not converge");
  return result;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Orthogonal Procrustes

struct ProcrustesResult {
  Matrix optimal_map;   // n x n orthogonal O = U V^T
  double objective;     // max_O Tr(B^T A O) = ||A^T B||_*
  double residual;      // ||B - A O||_F^2
  Matrix u;
  Eigen::VectorXd singular_values;
  Matrix v;
  std::size_t p;        // min(m, n)
};

/// Orthogonal O minimizing ||B - A O||_F for equally shaped A, B.
inline ProcrustesResult procrustes_align(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("procrustes_align: shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
  detail::require_finite(a, "procrustes_align");
  detail::require_finite(b, "procrustes_align");
  const Matrix cross = a.transpose() * b;
  auto svd = detail::svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesResult r;
  r.u = svd.matrixU();
  r.v = svd.matrixV();
  r.singular_values = svd.singularValues();
  r.optimal_map = r.u * r.v.transpose();
  r.objective = (b.transpose() * a * r.optimal_map).trace();
  r.residual = (b - a * r.optimal_map).squaredNorm();
  r.p = static_cast<std::size_t>(std::min(a.rows(), a.cols()));
  return r;
}

// ---------------------------------------------------------------------------
// Norm bounds

struct NormBounds {
  double frobenius;
  double nuclear;
  std::size_t p;
  bool bounds_hold;
};

/// Checks (1/sqrt p)||X||_* <= ||X||_F <= ||X||_* <= sqrt(p)||X||_F with
/// both norms taken from the singular values.
inline NormBounds norm_bounds_check(const Matrix& x, double slack = 1e-9) {
  detail::require_finite(x, "norm_bounds_check");
  const auto sv = detail::svd(x, 0).singularValues();
  NormBounds nb;
  nb.p = static_cast<std::size_t>(std::min(x.rows(), x.cols()));
  nb.nuclear = sv.sum();
  nb.frobenius = std::sqrt(sv.squaredNorm());
  const double root_p = std::sqrt(static_cast<double>(nb.p));
  auto le = [slack](double lhs, double rhs) { return lhs <= rhs + slack * std::max({std::abs(lhs), std::abs(rhs), 1.0}); };
  nb.bounds_hold = le(nb.nuclear / root_p, nb.frobenius) && le(nb.frobenius, nb.nuclear) &&
                   le(nb.nuclear, root_p * nb.frobenius);
  return nb;
}

/// Numerical rank with the relative tolerance kRankTolerance.
inline std::size_t numerical_rank(const Matrix& x) {
  const auto sv = detail::svd(x, 0).singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > kRankTolerance * sv(0)) ++r;
  return r;
}

// ---------------------------------------------------------------------------
// Batch-averaged association weight

struct AveragedWeight {
  double dot;         // (1/b) Tr(A_s A_t^T), A = R R^T
  double frobenius;   // (1/b) ||R_t^T R_s||_F^2
};

/// Evaluates the averaged dot-product weight of a layer pair along two
/// independent routes (identity query/key maps). Inputs are flattened
/// instance matrices b x d with equal shapes.
inline AveragedWeight averaged_weight(const Matrix& student, const Matrix& teacher) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw ContractError("averaged_weight: flattened taps must share shape, got " + std::to_string(student.rows()) +
                        "x" + std::to_string(student.cols()) + " and " + std::to_string(teacher.rows()) + "x" +
                        std::to_string(teacher.cols()));
  }
  if (student.rows() == 0) throw ContractError("averaged_weight: empty batch");
  const double b = static_cast<double>(student.rows());
  const Matrix as = student * student.transpose();
  const Matrix at = teacher * teacher.transpose();
  AveragedWeight w;
  w.dot = (as * at.transpose()).trace() / b;
  w.frobenius = (teacher.transpose() * student).squaredNorm() / b;
  return w;
}

template <class T>
AveragedWeight averaged_weight(const Tensor<T>& student_tap, const Tensor<T>& teacher_tap) {
  return averaged_weight(flatten_instances(student_tap), flatten_instances(teacher_tap));
}

// ---------------------------------------------------------------------------
// Semantic mismatch score

/// alpha[s][t][i]. Pairs whose weights are all zero are not part of the
/// association set.
using PairWeights = std::vector<std::vector<std::vector<double>>>;

/// Average over associated pairs of mean_i(alpha[s,t,i] * mean_j (A_s[i,j] - A_t[i,j])^2).
inline double sm_score(const std::vector<Matrix>& student, const std::vector<Matrix>& teacher,
                       const PairWeights& alpha) {
  if (alpha.size() != student.size()) throw DimensionError("sm_score: alpha student axis mismatch");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t s = 0; s < student.size(); ++s) {
    if (alpha[s].size() != teacher.size()) throw DimensionError("sm_score: alpha teacher axis mismatch");
    for (std::size_t t = 0; t < teacher.size(); ++t) {
      const auto& a_s = student[s];
      const auto& a_t = teacher[t];
      const auto& w = alpha[s][t];
      if (a_s.rows() != a_t.rows() || a_s.cols() != a_t.cols() || w.size() != static_cast<std::size_t>(a_s.rows())) {
        throw DimensionError("sm_score: similarity matrices or weights disagree on the batch size");
      }
      if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) continue;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < a_s.rows(); ++i) {
        const double row_mse = (a_s.row(i) - a_t.row(i)).squaredNorm() / static_cast<double>(a_s.cols());
        acc += w[static_cast<std::size_t>(i)] * row_mse;
      }
      total += acc / static_cast<double>(a_s.rows());
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

/// alpha == 1 on every pair, the convention for non-attentive baselines.
inline PairWeights unit_weights(std::size_t student_layers, std::size_t teacher_layers, std::size_t batch) {
  return PairWeights(student_layers, std::vector<std::vector<double>>(teacher_layers, std::vector<double>(batch, 1.0)));
}

// ---------------------------------------------------------------------------
// Linear CKA

/// ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after column centering.
inline double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw DimensionError("linear_cka: different numbers of instances");
  if (x.rows() < 2) throw ContractError("linear_cka: need at least 2 instances");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  const Matrix yc = y.rowwise() - y.colwise().mean();
  // Wide inputs go through the b x b Gram matrices: ||X^T X||_F = ||X X^T||_F
  // and ||Y^T X||_F^2 = Tr(X X^T Y Y^T).
  double xx, yy, cross;
  if (xc.cols() + yc.cols() > 2 * xc.rows()) {
    const Matrix kx = xc * xc.transpose(), ky = yc * yc.transpose();
    xx = kx.norm();
    yy = ky.norm();
    cross = kx.cwiseProduct(ky).sum();
  } else {
    xx = (xc.transpose() * xc).norm();
    yy = (yc.transpose() * yc).norm();
    cross = (yc.transpose() * xc).squaredNorm();
  }
  if (!(xx > 0.0) || !(yy > 0.0)) throw NumericError("linear_cka: undefined for zero-variance input");
  return cross / (xx * yy);
}

// ---------------------------------------------------------------------------
// Relative improvement

struct RelativeImprovement {
  std::vector<std::optional<double>> ri;  // percent; nullopt where undefined
  std::optional<double> ari;              // mean over the defined entries
  std::vector<std::string> warnings;
};

/// RI_i = (acc_new - acc_base_i) / (acc_base_i - acc_student) * 100.
inline RelativeImprovement relative_improvement(double acc_new, const std::vector<double>& baselines,
                                                double acc_student) {
  RelativeImprovement out;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t i = 0; i < baselines.size(); ++i) {
    const double denom = baselines[i] - acc_student;
    if (denom == 0.0) {
      out.ri.push_back(std::nullopt);
      out.warnings.push_back("baseline " + std::to_string(i) + " equals the student accuracy; RI undefined");
      continue;
    }
    const double ri = (acc_new - baselines[i]) / denom * 100.0;
    out.ri.push_back(ri);
    sum += ri;
    ++defined;
  }
  if (defined > 0) out.ari = sum / static_cast<double>(defined);
  return out;
}

}  // namespace calibkd::analysis
