#pragma once

// Dense linear-algebra substrate: row-major tensors, calibration Hessians,
// SPD solves with a ridge fallback and spectral bounds for step sizes.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dq/error.hpp"
#include "dq/random.hpp"

namespace dq {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

/// Dense row-major matrix of finite doubles. Holds calibration activations,
/// weights and Hessians on their way through files.
class Tensor2D {
 public:
  Tensor2D() = default;

  Tensor2D(std::size_t rows, std::size_t cols)
      : values_(RowMatrix::Zero(static_cast<Eigen::Index>(rows),
                                static_cast<Eigen::Index>(cols))) {}

  Tensor2D(std::size_t rows, std::size_t cols, const std::vector<double>& data)
      : Tensor2D(rows, cols) {
    if (data.size() != rows * cols) {
      throw ValidationError("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + std::to_string(rows) +
                            "x" + std::to_string(cols));
    }
    std::copy(data.begin(), data.end(), values_.data());
    check_finite();
  }

  template <typename Derived>
  static Tensor2D from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor2D t;
    t.values_ = m;
    t.check_finite();
    return t;
  }

  std::size_t rows() const { return static_cast<std::size_t>(values_.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values_.cols()); }
  std::size_t size() const { return rows() * cols(); }
  bool empty() const { return size() == 0; }

  double operator()(std::size_t r, std::size_t c) const {
    return values_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }

  const RowMatrix& matrix() const { return values_; }
  const double* data() const { return values_.data(); }

 private:
  void check_finite() const {
    if (!values_.allFinite()) {
      throw ValidationError("tensor contains non-finite values");
    }
  }

  RowMatrix values_;
};

/// Damped calibration Hessian H = XᵀX + λI.
struct Hessian {
  Matrix matrix;
  double damping_lambda = 0.0;
  std::size_t source_rows = 0;

  std::size_t dim() const { return static_cast<std::size_t>(matrix.rows()); }
};

namespace detail {

inline void symmetrize_from_lower(Matrix& m) {
  m.triangularView<Eigen::StrictlyUpper>() =
      m.triangularView<Eigen::StrictlyLower>().transpose();
}

inline Hessian finish_hessian(Matrix gram, std::size_t rows,
                              double damping_fraction) {
  if (!(damping_fraction >= 0.0) || !std::isfinite(damping_fraction)) {
    throw ValidationError("damping fraction must be a finite value >= 0");
  }
  symmetrize_from_lower(gram);
  const double mean_diag = gram.diagonal().mean();
  const double lambda = damping_fraction * mean_diag;
  gram.diagonal().array() += lambda;
  for (Eigen::Index i = 0; i < gram.rows(); ++i) {
    if (!(gram(i, i) > 0.0)) {
      throw ValidationError(
          "hessian diagonal entry " + std::to_string(i) +
          " is not positive after damping; the calibration set does not "
          "excite this input (increase damping or add calibration rows)");
    }
  }
  return Hessian{std::move(gram), lambda, rows};
}

}  // namespace detail

/// Sums per-batch XᵀX so a Hessian can be built from calibration data that
/// does not fit in one tensor.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t dim)
      : gram_(Matrix::Zero(static_cast<Eigen::Index>(dim),
                           static_cast<Eigen::Index>(dim))) {}

  void add_batch(const Tensor2D& x) {
    if (x.cols() != static_cast<std::size_t>(gram_.rows())) {
      throw ValidationError("calibration batch has " + std::to_string(x.cols()) +
                            " columns, expected " +
                            std::to_string(gram_.rows()));
    }
    // Only the lower triangle is accumulated; the result is mirrored so the
    // matrix is exactly symmetric.
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(x.matrix().transpose());
    rows_ += x.rows();
  }

  std::size_t rows() const { return rows_; }

  Hessian finish(double damping_fraction) const {
    if (rows_ == 0) throw ValidationError("empty calibration set");
    return detail::finish_hessian(gram_, rows_, damping_fraction);
  }

 private:
  Matrix gram_;
  std::size_t rows_ = 0;
};

/// H = XᵀX + λI with λ = damping_fraction · mean(diag(XᵀX)).
inline Hessian build_hessian(const Tensor2D& x, double damping_fraction) {
  if (x.rows() == 0 || x.cols() == 0) {
    throw ValidationError("empty calibration set");
  }
  HessianAccumulator acc(x.cols());
  acc.add_batch(x);
  return acc.finish(damping_fraction);
}

struct SpdSolution {
  Matrix x;
  // Absolute ridge added to the diagonal; 0 when the matrix factored as is.
  double ridge = 0.0;
};

namespace detail {

// A pivot this small relative to the mean diagonal is treated as a failed
// factorization; Eigen only rejects pivots that are exactly <= 0.
inline constexpr double kPivotFloor = 1e-12;

inline bool factor_is_usable(const Eigen::LLT<Matrix>& llt, double mean_diag) {
  if (llt.info() != Eigen::Success) return false;
  const Vector pivots = llt.matrixLLT().diagonal();
  const double floor = kPivotFloor * std::abs(mean_diag);
  for (Eigen::Index i = 0; i < pivots.size(); ++i) {
    if (!(pivots(i) * pivots(i) > floor)) return false;
  }
  return true;
}

}  // namespace detail

/// Solves AX = B through a Cholesky factorization. When A is not (numerically)
/// positive definite a ridge of 1e-10·mean(diag A) is added and escalated ×10
/// up to 1e-4·mean(diag A). `context` names the caller's column/group in the
/// error message.
inline SpdSolution solve_spd(const Matrix& a, const Matrix& b,
                             std::string_view context = {}) {
  if (a.rows() != a.cols()) throw ValidationError("solve_spd: A is not square");
  if (b.rows() != a.rows()) {
    throw ValidationError("solve_spd: right-hand side has " +
                          std::to_string(b.rows()) + " rows, expected " +
                          std::to_string(a.rows()));
  }
  if (a.rows() == 0) return {Matrix(0, b.cols()), 0.0};

  const double mean_diag = a.diagonal().mean();
  const double ridge_scale = std::abs(mean_diag) > 0.0 ? std::abs(mean_diag) : 1.0;

  auto attempt = [&](double ridge) -> std::pair<bool, Matrix> {
    Matrix shifted = a;
    shifted.diagonal().array() += ridge;
    Eigen::LLT<Matrix> llt(shifted);
    if (!detail::factor_is_usable(llt, mean_diag + ridge)) return {false, {}};
    Matrix x = llt.solve(b);
    // One step of iterative refinement against the shifted system.
    x += llt.solve(b - shifted * x);
    if (!x.allFinite()) return {false, {}};
    return {true, std::move(x)};
  };

  if (auto [ok, x] = attempt(0.0); ok) return {std::move(x), 0.0};
  for (double rel = 1e-10; rel <= 1e-4 * (1.0 + 1e-9); rel *= 10.0) {
    const double ridge = rel * ridge_scale;
    if (auto [ok, x] = attempt(ridge); ok) return {std::move(x), ridge};
  }
  std::string msg = "singular system: matrix is not positive definite even "
                    "with ridge 1e-4*mean(diag)";
  if (!context.empty()) msg += " (" + std::string(context) + ")";
  throw SingularSystemError(msg);
}

/// Gershgorin bound: max_i Σ_j |A_ij| ≥ λ_max(A).
inline double gershgorin_bound(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  return a.cwiseAbs().rowwise().sum().maxCoeff();
}

inline constexpr int kPowerIterations = 50;
inline constexpr double kSpectralSafety = 1.01;
inline constexpr double kSpectralFloor = 1e-12;

/// Upper bound on λ_max of a symmetric PSD matrix: 50 power iterations from a
/// seeded start vector, times 1.01, never above the Gershgorin bound. Always
/// returns a finite value ≥ 1e-12.
inline double spectral_upper_bound(const Matrix& a, std::uint64_t seed = 0) {
  const Eigen::Index n = a.rows();
  if (n == 0) return kSpectralFloor;
  const double gersh = gershgorin_bound(a);

  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  v.normalize();

  bool grew = true;
  for (int it = 0; it < kPowerIterations; ++it) {
    Vector av = a * v;
    const double norm = av.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      grew = false;
      break;
    }
    v = av / norm;
  }

  double bound = gersh;
  if (grew) {
    const double rayleigh = v.dot(a * v);
    if (std::isfinite(rayleigh) && rayleigh > 0.0) {
      bound = std::min(kSpectralSafety * rayleigh, gersh);
    }
  }
  if (!std::isfinite(bound) || bound < kSpectralFloor) bound = kSpectralFloor;
  return bound;
}

}  // namespace dq
