#pragma once

// Layer-wise solver. Each output column b of W0 is quantized independently by
// minimizing
//
//   g(w; s, z) = ½ (s⊙w + z - b)ᵀ H (s⊙w + z - b),   w ∈ ℤ ∩ [alpha, beta],
//
// where s and z hold one value per input group and are broadcast over the
// group's rows. (s, z) and w are optimized alternately: (s, z) by a linear
// solve, w by sequential round-and-clip with either a box-constrained PGD
// update (Level1) or the closed-form unconstrained update (Level2) of the
// remaining elements.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dq/config.hpp"
#include "dq/error.hpp"
#include "dq/linalg.hpp"
#include "dq/packing.hpp"

namespace dq {

// ---------------------------------------------------------------------------
// Elementwise helpers
// ---------------------------------------------------------------------------

/// Round half to even (the default IEEE rounding mode).
inline double round_half_even(double x) { return std::nearbyint(x); }

inline int round_and_clip(double x, int alpha, int beta) {
  const double r = round_half_even(x);
  return static_cast<int>(std::clamp(r, static_cast<double>(alpha),
                                     static_cast<double>(beta)));
}

inline std::size_t group_size_of(std::size_t d_in, std::size_t group_count) {
  if (group_count == 0 || d_in % group_count != 0) {
    throw ValidationError("group count " + std::to_string(group_count) +
                          " does not divide input dimension " +
                          std::to_string(d_in));
  }
  return d_in / group_count;
}

/// Repeats each group value d_in/ng times, in input-index order.
inline Vector group_expand(const Vector& v, std::size_t d_in) {
  const auto ng = static_cast<std::size_t>(v.size());
  const std::size_t gs = group_size_of(d_in, ng);
  Vector out(static_cast<Eigen::Index>(d_in));
  for (std::size_t i = 0; i < d_in; ++i) {
    out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(i / gs));
  }
  return out;
}

inline constexpr double kDegenerateScale = 1e-12;

/// Groups whose scale cannot move the output: |s_g| < 1e-12·max|s| or s_g = 0.
inline std::vector<bool> degenerate_groups(const Vector& s) {
  const double max_abs = s.size() ? s.cwiseAbs().maxCoeff() : 0.0;
  std::vector<bool> out(static_cast<std::size_t>(s.size()));
  for (Eigen::Index g = 0; g < s.size(); ++g) {
    const double a = std::abs(s(g));
    out[static_cast<std::size_t>(g)] = a == 0.0 || a < kDegenerateScale * max_abs;
  }
  return out;
}

inline std::vector<bool> degenerate_coords(const Vector& s, std::size_t d_in) {
  const auto groups = degenerate_groups(s);
  const std::size_t gs = group_size_of(d_in, groups.size());
  std::vector<bool> out(d_in);
  for (std::size_t i = 0; i < d_in; ++i) out[i] = groups[i / gs];
  return out;
}

/// s⊙w + z with group broadcasting.
inline Vector dequantize(const IntVector& w, const Vector& s, const Vector& z) {
  const auto d_in = static_cast<std::size_t>(w.size());
  return (group_expand(s, d_in).array() * w.cast<double>().array() +
          group_expand(z, d_in).array())
      .matrix();
}

/// g = ½ rᵀHr with r = s⊙w + z - b.
inline double layer_loss(const Vector& w, const Vector& s, const Vector& z,
                         const Vector& b, const Matrix& h) {
  const auto d_in = static_cast<std::size_t>(b.size());
  if (static_cast<std::size_t>(w.size()) != d_in ||
      static_cast<std::size_t>(h.rows()) != d_in || s.size() != z.size()) {
    throw ValidationError("layer_loss: dimension mismatch");
  }
  const Vector r = (group_expand(s, d_in).array() * w.array() +
                    group_expand(z, d_in).array())
                       .matrix() -
                   b;
  return 0.5 * r.dot(h * r);
}

inline double layer_loss(const IntVector& w, const Vector& s, const Vector& z,
                         const Vector& b, const Matrix& h) {
  return layer_loss(Vector(w.cast<double>()), s, z, b, h);
}

/// clip(round((b - z)/s), alpha, beta); coordinates of degenerate groups get 0.
inline IntVector rtn_quantize(const Vector& b, const Vector& s, const Vector& z,
                              int alpha, int beta) {
  const auto d_in = static_cast<std::size_t>(b.size());
  const auto degenerate = degenerate_coords(s, d_in);
  const Vector se = group_expand(s, d_in);
  const Vector ze = group_expand(z, d_in);
  IntVector w(b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    w(i) = degenerate[static_cast<std::size_t>(i)]
               ? round_and_clip(0.0, alpha, beta)
               : round_and_clip((b(i) - ze(i)) / se(i), alpha, beta);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Problem and solution types
// ---------------------------------------------------------------------------

/// Upper-triangular U with H⁻¹ = UᵀU. One factor serves every column of a
/// layer in the Level2 update.
struct InverseFactor {
  Matrix upper;
};

inline InverseFactor inverse_factor(const Matrix& h,
                                    std::string_view context = "hessian") {
  const auto n = h.rows();
  Matrix inv = solve_spd(h, Matrix::Identity(n, n), context).x;
  inv = 0.5 * (inv + inv.transpose());
  Eigen::LLT<Matrix> llt(inv);
  if (llt.info() != Eigen::Success) {
    throw SingularSystemError("inverse Hessian is not positive definite (" +
                              std::string(context) + ")");
  }
  return InverseFactor{llt.matrixU()};
}

/// One output column: minimize g over (w, s, z) for b = W0[:, j].
struct ColumnProblem {
  Vector b;
  const Hessian& hessian;
  const QuantConfig& config;
  // Shared Level2 factor; computed on demand when null.
  const InverseFactor* factor = nullptr;
  std::size_t column_index = 0;

  std::size_t d_in() const { return static_cast<std::size_t>(b.size()); }
  std::size_t group_count() const { return config.group_count; }
};

struct GridInit {
  Vector scale;
  Vector zero;
  IntVector w;
  double loss = 0.0;
  double p = 0.0;  // shared p (default mode)
};

struct RidgeEvent {
  int round = 0;
  double ridge = 0.0;
};

struct ColumnSolution {
  IntVector w;
  Vector scale;
  Vector zero;
  double g_init = 0.0;
  double g_final = 0.0;
  // g at the end of each alternation (after the (s, z) half-step).
  std::vector<double> g_trajectory;
  // g after every half-step, in order: w-step of round 1, (s,z)-step of
  // round 1, ...
  std::vector<double> g_half_steps;
  std::vector<RidgeEvent> ridge_events;
  // Set when the analytic solve failed and the column fell back.
  std::optional<std::string> failure;
};

// ---------------------------------------------------------------------------
// Initialization: grid search over p
// ---------------------------------------------------------------------------

namespace detail {

inline void scale_zero_for_p(const Vector& b, std::size_t gs, std::size_t g,
                             double p, int alpha, int beta, double& s,
                             double& z) {
  const auto seg = b.segment(static_cast<Eigen::Index>(g * gs),
                             static_cast<Eigen::Index>(gs));
  const double lo = seg.minCoeff();
  const double hi = seg.maxCoeff();
  s = p * (hi - lo) / static_cast<double>(beta - alpha);
  z = p * lo - s * alpha;
}

inline double grid_p(const QuantConfig& cfg, int k) {
  return cfg.p_min +
         (cfg.p_max - cfg.p_min) * k / static_cast<double>(cfg.grid_points - 1);
}

}  // namespace detail

/// Picks the initial (s, z) by scanning p over grid_points uniform values in
/// [p_min, p_max]. Every group derives s = p(b_max - b_min)/(beta - alpha) and
/// z = p·b_min - s·alpha from its own slice of b; by default one p is shared
/// by all groups of the column and candidates are ranked by the full coupled
/// objective. With `per_group_p`, each group picks its own p by the loss of
/// its diagonal block of H.
inline GridInit grid_search_init(const ColumnProblem& prob) {
  const QuantConfig& cfg = prob.config;
  const std::size_t d_in = prob.d_in();
  const std::size_t ng = cfg.group_count;
  const std::size_t gs = group_size_of(d_in, ng);
  const Matrix& h = prob.hessian.matrix;

  GridInit best;
  best.loss = std::numeric_limits<double>::infinity();
  Vector s(static_cast<Eigen::Index>(ng)), z(static_cast<Eigen::Index>(ng));

  if (!cfg.per_group_p) {
    for (int k = 0; k < cfg.grid_points; ++k) {
      const double p = detail::grid_p(cfg, k);
      for (std::size_t g = 0; g < ng; ++g) {
        detail::scale_zero_for_p(prob.b, gs, g, p, cfg.alpha, cfg.beta,
                                 s(static_cast<Eigen::Index>(g)),
                                 z(static_cast<Eigen::Index>(g)));
      }
      IntVector w = rtn_quantize(prob.b, s, z, cfg.alpha, cfg.beta);
      const double loss = layer_loss(w, s, z, prob.b, h);
      if (loss < best.loss) {
        best = GridInit{s, z, std::move(w), loss, p};
      }
    }
    return best;
  }

  for (std::size_t g = 0; g < ng; ++g) {
    const auto off = static_cast<Eigen::Index>(g * gs);
    const auto len = static_cast<Eigen::Index>(gs);
    const Vector b_g = prob.b.segment(off, len);
    const Matrix h_g = h.block(off, off, len, len);
    double best_group = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cfg.grid_points; ++k) {
      const double p = detail::grid_p(cfg, k);
      Vector sg(1), zg(1);
      detail::scale_zero_for_p(prob.b, gs, g, p, cfg.alpha, cfg.beta, sg(0),
                               zg(0));
      const IntVector w_g = rtn_quantize(b_g, sg, zg, cfg.alpha, cfg.beta);
      const double loss = layer_loss(w_g, sg, zg, b_g, h_g);
      if (loss < best_group) {
        best_group = loss;
        s(static_cast<Eigen::Index>(g)) = sg(0);
        z(static_cast<Eigen::Index>(g)) = zg(0);
      }
    }
  }
  best.scale = s;
  best.zero = z;
  best.w = rtn_quantize(prob.b, s, z, cfg.alpha, cfg.beta);
  best.loss = layer_loss(best.w, s, z, prob.b, h);
  best.p = std::numeric_limits<double>::quiet_NaN();
  return best;
}

// ---------------------------------------------------------------------------
// Analytic (s, z) half-step
// ---------------------------------------------------------------------------

struct ScaleZeroSolution {
  Vector scale;
  Vector zero;
  double ridge = 0.0;
};

/// Exact minimizer of g over (s, z) for fixed w: solves (AᵀHA)u = AᵀHb where
/// column g of A carries w on group g's rows and column ng+g carries ones.
inline ScaleZeroSolution solve_sz(const IntVector& w, const ColumnProblem& prob) {
  const std::size_t d_in = prob.d_in();
  const std::size_t ng = prob.group_count();
  const std::size_t gs = group_size_of(d_in, ng);
  if (static_cast<std::size_t>(w.size()) != d_in) {
    throw ValidationError("solve_sz: w has wrong length");
  }
  const auto n = static_cast<Eigen::Index>(ng);
  Matrix design = Matrix::Zero(static_cast<Eigen::Index>(d_in), 2 * n);
  for (std::size_t i = 0; i < d_in; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const auto g = static_cast<Eigen::Index>(i / gs);
    design(row, g) = w(row);
    design(row, n + g) = 1.0;
  }
  const Matrix h_design = prob.hessian.matrix * design;
  Matrix normal = design.transpose() * h_design;
  normal = 0.5 * (normal + normal.transpose());
  const Vector rhs = h_design.transpose() * prob.b;

  const auto sol =
      solve_spd(normal, rhs, "column " + std::to_string(prob.column_index) +
                                 ", normal equations of " +
                                 std::to_string(ng) + " group(s)");
  return ScaleZeroSolution{sol.x.col(0).head(n), sol.x.col(0).tail(n),
                           sol.ridge};
}

// ---------------------------------------------------------------------------
// Box-constrained QP by projected gradient descent
// ---------------------------------------------------------------------------

struct PgdOptions {
  int iters = 0;
  double tol = 0.0;
  // Step size is 1/lipschitz; estimated from the full matrix when unset.
  std::optional<double> lipschitz;
  std::uint64_t seed = 0;
  // Called with (iteration, x, objective) before the first step and after
  // every step.
  std::function<void(int, const Vector&, double)> observer;
};

struct PgdResult {
  Vector x;
  int iterations = 0;
};

inline double box_qp_objective(const Matrix& q, const Vector& c,
                               const Vector& x) {
  return 0.5 * x.dot(q * x) + c.dot(x);
}

/// Minimizes ½xᵀQx + cᵀx over lo <= x <= hi on the free coordinates (fixed
/// ones never move). Steps x ← clamp(x - ∇/L). Stops after `iters` steps or
/// once the projected-gradient ∞-norm drops below `tol`.
inline PgdResult pgd_box_minimize(const Matrix& q, const Vector& c, Vector x,
                                  double lo, double hi,
                                  const std::vector<bool>& fixed,
                                  const PgdOptions& opts) {
  const Eigen::Index n = x.size();
  if (q.rows() != n || q.cols() != n || c.size() != n ||
      static_cast<Eigen::Index>(fixed.size()) != n) {
    throw ValidationError("pgd_box_minimize: dimension mismatch");
  }
  std::vector<Eigen::Index> free;
  free.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!fixed[static_cast<std::size_t>(i)]) {
      free.push_back(i);
      x(i) = std::clamp(x(i), lo, hi);
    }
  }
  PgdResult result{std::move(x), 0};
  if (free.empty() || opts.iters <= 0) {
    if (opts.observer) {
      opts.observer(0, result.x, box_qp_objective(q, c, result.x));
    }
    return result;
  }
  const double lipschitz =
      opts.lipschitz ? *opts.lipschitz : spectral_upper_bound(q, opts.seed);
  const double step = 1.0 / lipschitz;

  Vector& xv = result.x;
  Vector grad(static_cast<Eigen::Index>(free.size()));
  if (opts.observer) opts.observer(0, xv, box_qp_objective(q, c, xv));
  for (int it = 0; it < opts.iters; ++it) {
    double pg_norm = 0.0;
    for (std::size_t k = 0; k < free.size(); ++k) {
      const Eigen::Index i = free[k];
      grad(static_cast<Eigen::Index>(k)) = q.col(i).dot(xv) + c(i);
      const double moved =
          std::clamp(xv(i) - grad(static_cast<Eigen::Index>(k)), lo, hi);
      pg_norm = std::max(pg_norm, std::abs(xv(i) - moved));
    }
    if (pg_norm < opts.tol || pg_norm == 0.0) break;
    for (std::size_t k = 0; k < free.size(); ++k) {
      const Eigen::Index i = free[k];
      xv(i) = std::clamp(xv(i) - step * grad(static_cast<Eigen::Index>(k)), lo,
                         hi);
    }
    ++result.iterations;
    if (opts.observer) {
      opts.observer(result.iterations, xv, box_qp_objective(q, c, xv));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Integer half-step
// ---------------------------------------------------------------------------

/// Receives every continuous Level1 iterate (warm-up and sequential phases).
using IterateObserver = std::function<void(const Vector&)>;

namespace detail {

inline IntVector solve_w_level1(const ColumnProblem& prob, const Vector& se,
                                const Vector& ze,
                                const std::vector<bool>& degenerate,
                                const IntVector& w_start,
                                const IterateObserver& on_iterate) {
  const QuantConfig& cfg = prob.config;
  const auto n = static_cast<Eigen::Index>(prob.d_in());
  const Matrix& h = prob.hessian.matrix;

  // g(w) = ½wᵀ(DHD)w + wᵀDH(z̄ - b) + const with D = diag(se).
  const Matrix q = se.asDiagonal() * h * se.asDiagonal();
  const Vector c = se.asDiagonal() * (h * (ze - prob.b));

  std::vector<bool> fixed = degenerate;
  Vector x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i) = degenerate[static_cast<std::size_t>(i)]
               ? 0.0
               : std::clamp(static_cast<double>(w_start(i)),
                            static_cast<double>(cfg.alpha),
                            static_cast<double>(cfg.beta));
  }

  PgdOptions opts;
  opts.tol = cfg.pgd_tolerance;
  opts.lipschitz = spectral_upper_bound(q, cfg.seed);
  if (on_iterate) {
    opts.observer = [&](int, const Vector& xi, double) { on_iterate(xi); };
  }

  const double lo = cfg.alpha;
  const double hi = cfg.beta;
  opts.iters = cfg.warmup_iters;
  x = pgd_box_minimize(q, c, std::move(x), lo, hi, fixed, opts).x;

  opts.iters = cfg.inner_iters;
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    if (degenerate[ju]) continue;
    x(j) = round_and_clip(x(j), cfg.alpha, cfg.beta);
    fixed[ju] = true;
    if (j + 1 < n && cfg.inner_iters > 0) {
      x = pgd_box_minimize(q, c, std::move(x), lo, hi, fixed, opts).x;
    }
  }

  IntVector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w(i) = degenerate[static_cast<std::size_t>(i)]
               ? round_and_clip(0.0, cfg.alpha, cfg.beta)
               : round_and_clip(x(i), cfg.alpha, cfg.beta);
  }
  return w;
}

// Sequential round-and-clip with the closed-form update of the unrounded
// suffix: δ_F = -(x_j - q_j)·U'_{jF}/U'_{jj}, where U' = U·D⁻¹ is the upper
// factor of (DHD)⁻¹ = D⁻¹H⁻¹D⁻¹ on the coordinates in `active`.
inline void sequential_level2(const Matrix& upper, const Vector& scale,
                              Vector& x, int alpha, int beta) {
  const Eigen::Index n = x.size();
  for (Eigen::Index j = 0; j < n; ++j) {
    const double q = round_and_clip(x(j), alpha, beta);
    const double err = x(j) - q;
    x(j) = q;
    if (err == 0.0) continue;
    const double pivot = upper(j, j) / scale(j);
    for (Eigen::Index k = j + 1; k < n; ++k) {
      x(k) -= err * (upper(j, k) / scale(k)) / pivot;
    }
  }
}

inline IntVector solve_w_level2(const ColumnProblem& prob, const Vector& se,
                                const Vector& ze,
                                const std::vector<bool>& degenerate) {
  const QuantConfig& cfg = prob.config;
  const auto n = static_cast<Eigen::Index>(prob.d_in());

  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!degenerate[static_cast<std::size_t>(i)]) active.push_back(i);
  }
  IntVector w = IntVector::Constant(n, round_and_clip(0.0, cfg.alpha, cfg.beta));
  if (active.empty()) return w;

  const auto m = static_cast<Eigen::Index>(active.size());
  Vector x(m), scale(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = active[static_cast<std::size_t>(k)];
    scale(k) = se(i);
    x(k) = (prob.b(i) - ze(i)) / se(i);
  }

  if (m == n) {
    std::optional<InverseFactor> local;
    const InverseFactor* factor = prob.factor;
    if (factor == nullptr) {
      local = inverse_factor(prob.hessian.matrix);
      factor = &*local;
    }
    sequential_level2(factor->upper, scale, x, cfg.alpha, cfg.beta);
  } else {
    // Degenerate coordinates are pinned, so the suffix update needs the
    // inverse of the Hessian restricted to the active coordinates.
    Matrix h_active(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      for (Eigen::Index c = 0; c < m; ++c) {
        h_active(a, c) = prob.hessian.matrix(active[static_cast<std::size_t>(a)],
                                             active[static_cast<std::size_t>(c)]);
      }
    }
    const InverseFactor reduced = inverse_factor(
        h_active, "column " + std::to_string(prob.column_index) +
                      ", active coordinates");
    sequential_level2(reduced.upper, scale, x, cfg.alpha, cfg.beta);
  }
  for (Eigen::Index k = 0; k < m; ++k) {
    w(active[static_cast<std::size_t>(k)]) = static_cast<int>(x(k));
  }
  return w;
}

}  // namespace detail

/// Integer half-step with (s, z) frozen. Level1 warms up with M PGD
/// iterations from `w_start`, then rounds element by element and re-optimizes
/// the remaining ones with K PGD iterations inside the box. Level2 starts
/// from the unconstrained optimum (b - z)/s and applies the closed-form
/// update after each rounding. Coordinates of degenerate groups are set to 0
/// and take no part in either update.
inline IntVector solve_w(const ColumnProblem& prob, const Vector& s,
                         const Vector& z, const IntVector& w_start,
                         const IterateObserver& on_iterate = {}) {
  const std::size_t d_in = prob.d_in();
  const Vector se = group_expand(s, d_in);
  const Vector ze = group_expand(z, d_in);
  const auto degenerate = degenerate_coords(s, d_in);
  if (prob.config.approx == ApproxLevel::kLevel1) {
    return detail::solve_w_level1(prob, se, ze, degenerate, w_start, on_iterate);
  }
  return detail::solve_w_level2(prob, se, ze, degenerate);
}

// ---------------------------------------------------------------------------
// Alternating driver
// ---------------------------------------------------------------------------

/// Grid-search init followed by N rounds of {w half-step, (s, z) half-step}.
/// Returns the best (w, s, z) seen by recomputed g, never worse than the
/// initialization.
inline ColumnSolution solve_column(const ColumnProblem& prob) {
  const QuantConfig& cfg = prob.config;
  cfg.validate_for(prob.d_in());
  if (prob.hessian.dim() != prob.d_in()) {
    throw ValidationError("column length " + std::to_string(prob.d_in()) +
                          " does not match Hessian dimension " +
                          std::to_string(prob.hessian.dim()));
  }
  const Matrix& h = prob.hessian.matrix;
  const auto ng = static_cast<Eigen::Index>(cfg.group_count);

  ColumnSolution sol;
  Vector s, z;
  IntVector w;
  if (cfg.fixed_sz) {
    s = Vector::Constant(ng, cfg.fixed_sz->scale);
    z = Vector::Constant(ng, cfg.fixed_sz->zero);
    w = rtn_quantize(prob.b, s, z, cfg.alpha, cfg.beta);
  } else {
    GridInit init = grid_search_init(prob);
    s = std::move(init.scale);
    z = std::move(init.zero);
    w = std::move(init.w);
  }
  sol.g_init = layer_loss(w, s, z, prob.b, h);
  sol.w = w;
  sol.scale = s;
  sol.zero = z;
  sol.g_final = sol.g_init;

  auto consider = [&](const IntVector& wc, const Vector& sc, const Vector& zc) {
    const double g = layer_loss(wc, sc, zc, prob.b, h);
    if (g < sol.g_final) {
      sol.g_final = g;
      sol.w = wc;
      sol.scale = sc;
      sol.zero = zc;
    }
    return g;
  };

  for (int round = 1; round <= cfg.rounds; ++round) {
    w = solve_w(prob, s, z, w);
    const double g_w = consider(w, s, z);
    sol.g_half_steps.push_back(g_w);
    if (cfg.fixed_sz) {
      sol.g_trajectory.push_back(g_w);
      continue;
    }
    try {
      ScaleZeroSolution sz = solve_sz(w, prob);
      if (sz.ridge > 0.0) sol.ridge_events.push_back({round, sz.ridge});
      s = std::move(sz.scale);
      z = std::move(sz.zero);
    } catch (const SingularSystemError& e) {
      sol.failure = e.what();
      break;
    }
    const double g_sz = consider(w, s, z);
    sol.g_half_steps.push_back(g_sz);
    sol.g_trajectory.push_back(g_sz);
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Whole layer
// ---------------------------------------------------------------------------

/// Packed integer codes plus per-column, per-group scales and zeros.
/// Scales and zeros are kept at f32 precision, the precision of the file
/// format, so the in-memory layer and its serialized form agree exactly.
struct QuantizedLayer {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  int bits = 2;
  int alpha = -2;
  int beta = 1;
  std::size_t group_count = 1;
  std::vector<std::uint8_t> codes;  // d_out columns of column_stride() bytes
  RowMatrix scales;                 // d_out × ng
  RowMatrix zeros;                  // d_out × ng

  std::size_t column_stride() const { return packed_size(d_in, bits); }

  std::span<const std::uint8_t> column_bytes(std::size_t j) const {
    return std::span<const std::uint8_t>(codes).subspan(j * column_stride(),
                                                        column_stride());
  }

  IntVector column(std::size_t j) const {
    const auto values = unpack_codes(column_bytes(j), d_in, bits, alpha);
    return Eigen::Map<const IntVector>(values.data(),
                                       static_cast<Eigen::Index>(values.size()));
  }

  Vector column_scales(std::size_t j) const {
    return scales.row(static_cast<Eigen::Index>(j)).transpose();
  }
  Vector column_zeros(std::size_t j) const {
    return zeros.row(static_cast<Eigen::Index>(j)).transpose();
  }

  /// W̃ (d_in × d_out).
  RowMatrix dequantize() const {
    RowMatrix out(static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_out));
    for (std::size_t j = 0; j < d_out; ++j) {
      out.col(static_cast<Eigen::Index>(j)) =
          dq::dequantize(column(j), column_scales(j), column_zeros(j));
    }
    return out;
  }
};

inline double to_f32_precision(double v) {
  return static_cast<double>(static_cast<float>(v));
}

struct ColumnReport {
  double g_init = 0.0;
  double g_final = 0.0;
  // g recomputed with the stored (f32) scales and zeros.
  double g_stored = 0.0;
  std::vector<double> g_trajectory;
  std::vector<RidgeEvent> ridge_events;
  std::optional<std::string> failure;
  bool fatal = false;
};

struct SolveReport {
  QuantConfig config;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t workers = 1;
  std::vector<ColumnReport> columns;
  double total_g_init = 0.0;
  double total_g_final = 0.0;
  double total_g_stored = 0.0;
  double seconds = 0.0;

  bool has_fatal() const {
    return std::any_of(columns.begin(), columns.end(),
                       [](const ColumnReport& c) { return c.fatal; });
  }
};

struct LayerResult {
  QuantizedLayer layer;
  SolveReport report;
};

/// Quantizes every column of W0 (d_in × d_out) independently on `workers`
/// threads. Output does not depend on the worker count.
inline LayerResult quantize_layer(const Tensor2D& w0, const Hessian& h,
                                  const QuantConfig& cfg,
                                  std::size_t workers = 1) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t d_in = w0.rows();
  const std::size_t d_out = w0.cols();
  if (h.dim() != d_in) {
    throw ValidationError("weight matrix has " + std::to_string(d_in) +
                          " rows but the Hessian is " + std::to_string(h.dim()) +
                          "x" + std::to_string(h.dim()));
  }
  cfg.validate_for(d_in);

  std::optional<InverseFactor> factor;
  if (cfg.approx == ApproxLevel::kLevel2) factor = inverse_factor(h.matrix);

  const auto ng = static_cast<Eigen::Index>(cfg.group_count);
  std::vector<ColumnSolution> solutions(d_out);
  std::vector<std::optional<std::string>> fatal(d_out);

  auto run_column = [&](std::size_t j) {
    ColumnProblem prob{w0.matrix().col(static_cast<Eigen::Index>(j)), h, cfg,
                       factor ? &*factor : nullptr, j};
    try {
      solutions[j] = solve_column(prob);
    } catch (const std::exception& e) {
      fatal[j] = e.what();
      ColumnSolution fallback;
      fallback.scale = Vector::Zero(ng);
      fallback.zero = Vector::Zero(ng);
      fallback.w = IntVector::Constant(static_cast<Eigen::Index>(d_in),
                                       round_and_clip(0.0, cfg.alpha, cfg.beta));
      fallback.g_init = fallback.g_final =
          layer_loss(fallback.w, fallback.scale, fallback.zero, prob.b, h.matrix);
      fallback.failure = e.what();
      solutions[j] = std::move(fallback);
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, d_out));
  if (workers == 1) {
    for (std::size_t j = 0; j < d_out; ++j) run_column(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (std::size_t j = next++; j < d_out; j = next++) run_column(j);
      });
    }
  }

  LayerResult result;
  QuantizedLayer& layer = result.layer;
  layer.d_in = d_in;
  layer.d_out = d_out;
  layer.bits = cfg.bits;
  layer.alpha = cfg.alpha;
  layer.beta = cfg.beta;
  layer.group_count = cfg.group_count;
  layer.codes.reserve(d_out * layer.column_stride());
  layer.scales.resize(static_cast<Eigen::Index>(d_out), ng);
  layer.zeros.resize(static_cast<Eigen::Index>(d_out), ng);

  SolveReport& report = result.report;
  report.config = cfg;
  report.d_in = d_in;
  report.d_out = d_out;
  report.workers = workers;
  report.columns.resize(d_out);

  for (std::size_t j = 0; j < d_out; ++j) {
    const ColumnSolution& sol = solutions[j];
    const auto row = static_cast<Eigen::Index>(j);
    const std::vector<int> w(sol.w.data(), sol.w.data() + sol.w.size());
    const auto packed = pack_codes(w, cfg.bits, cfg.alpha);
    layer.codes.insert(layer.codes.end(), packed.begin(), packed.end());
    layer.scales.row(row) = sol.scale.unaryExpr(&to_f32_precision).transpose();
    layer.zeros.row(row) = sol.zero.unaryExpr(&to_f32_precision).transpose();

    ColumnReport& cr = report.columns[j];
    cr.g_init = sol.g_init;
    cr.g_final = sol.g_final;
    cr.g_stored = layer_loss(sol.w, layer.column_scales(j), layer.column_zeros(j),
                             w0.matrix().col(row), h.matrix);
    cr.g_trajectory = sol.g_trajectory;
    cr.ridge_events = sol.ridge_events;
    cr.failure = sol.failure;
    cr.fatal = fatal[j].has_value();
    report.total_g_init += cr.g_init;
    report.total_g_final += cr.g_final;
    report.total_g_stored += cr.g_stored;
  }
  report.seconds = std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  return result;
}

}  // namespace dq
