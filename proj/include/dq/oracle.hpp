#pragma once

// Ground truth at tiny scale. exhaustive_solve enumerates every integer w in
// [alpha, beta]^d_in and fits the optimal (s, z) for each; the minimum over
// all candidates is the global optimum the heuristic solver is measured
// against.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dq/layerwise.hpp"

namespace dq {

inline constexpr std::uint64_t kDefaultOracleBudget = std::uint64_t{1} << 20;

struct OracleResult {
  IntVector w_opt;
  Vector s_opt;
  Vector z_opt;
  double g_opt = std::numeric_limits<double>::infinity();
  std::uint64_t candidates_evaluated = 0;
};

struct OracleOptions {
  std::uint64_t budget = kDefaultOracleBudget;
  // Evaluate every candidate at this (s, z) instead of fitting one.
  std::optional<FixedScaleZero> fixed_sz;
  std::size_t workers = 1;
};

/// (beta - alpha + 1)^d_in, or nullopt if it overflows 64 bits.
inline std::optional<std::uint64_t> candidate_count(int levels,
                                                    std::size_t d_in) {
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < d_in; ++i) {
    if (total > std::numeric_limits<std::uint64_t>::max() /
                    static_cast<std::uint64_t>(levels)) {
      return std::nullopt;
    }
    total *= static_cast<std::uint64_t>(levels);
  }
  return total;
}

namespace detail {

// Candidate index -> w, with w[0] the most significant digit so that index
// order is lexicographic order of w.
inline void decode_candidate(std::uint64_t index, int alpha, int levels,
                             IntVector& w) {
  for (Eigen::Index i = w.size() - 1; i >= 0; --i) {
    w(i) = alpha + static_cast<int>(index % static_cast<std::uint64_t>(levels));
    index /= static_cast<std::uint64_t>(levels);
  }
}

inline OracleResult enumerate_range(const ColumnProblem& prob,
                                    const OracleOptions& opts,
                                    std::uint64_t begin, std::uint64_t end) {
  const QuantConfig& cfg = prob.config;
  const auto ng = static_cast<Eigen::Index>(cfg.group_count);
  OracleResult best;
  IntVector w(static_cast<Eigen::Index>(prob.d_in()));
  Vector s_fixed, z_fixed;
  if (opts.fixed_sz) {
    s_fixed = Vector::Constant(ng, opts.fixed_sz->scale);
    z_fixed = Vector::Constant(ng, opts.fixed_sz->zero);
  }
  for (std::uint64_t idx = begin; idx < end; ++idx) {
    decode_candidate(idx, cfg.alpha, cfg.levels(), w);
    ++best.candidates_evaluated;
    Vector s, z;
    if (opts.fixed_sz) {
      s = s_fixed;
      z = z_fixed;
    } else {
      try {
        ScaleZeroSolution sz = solve_sz(w, prob);
        s = std::move(sz.scale);
        z = std::move(sz.zero);
      } catch (const SingularSystemError&) {
        continue;
      }
    }
    const double g = layer_loss(w, s, z, prob.b, prob.hessian.matrix);
    // Strict comparison keeps the lexicographically smallest w on ties.
    if (g < best.g_opt) {
      best.g_opt = g;
      best.w_opt = w;
      best.s_opt = std::move(s);
      best.z_opt = std::move(z);
    }
  }
  return best;
}

}  // namespace detail

/// Brute-force global minimum of g over all integer w (with the analytic
/// (s, z) per candidate, or a pinned one). Refuses when the candidate count
/// exceeds the budget.
inline OracleResult exhaustive_solve(const ColumnProblem& prob,
                                     const OracleOptions& opts = {}) {
  const QuantConfig& cfg = prob.config;
  cfg.validate_for(prob.d_in());
  if (prob.hessian.dim() != prob.d_in()) {
    throw ValidationError("oracle: column length does not match Hessian");
  }
  const auto total = candidate_count(cfg.levels(), prob.d_in());
  if (!total || *total > opts.budget) {
    throw ValidationError(
        "oracle budget exceeded: " + std::to_string(cfg.levels()) + "^" +
        std::to_string(prob.d_in()) + " candidates required" +
        (total ? " (" + std::to_string(*total) + ")" : std::string(" (overflow)")) +
        ", budget is " + std::to_string(opts.budget));
  }

  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::uint64_t>(opts.workers, *total));
  std::vector<OracleResult> partial(workers);
  const std::uint64_t chunk = (*total + workers - 1) / workers;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      const std::uint64_t begin = std::min(*total, t * chunk);
      const std::uint64_t end = std::min(*total, begin + chunk);
      if (workers == 1) {
        partial[t] = detail::enumerate_range(prob, opts, begin, end);
      } else {
        pool.emplace_back([&, t, begin, end] {
          partial[t] = detail::enumerate_range(prob, opts, begin, end);
        });
      }
    }
  }

  // Chunks are in index order, so a strict comparison here preserves the
  // lexicographic tie-break.
  OracleResult best;
  for (auto& p : partial) {
    best.candidates_evaluated += p.candidates_evaluated;
    if (p.g_opt < best.g_opt) {
      best.g_opt = p.g_opt;
      best.w_opt = std::move(p.w_opt);
      best.s_opt = std::move(p.s_opt);
      best.z_opt = std::move(p.z_opt);
    }
  }
  return best;
}

/// Classical round-to-nearest baseline: the grid-search initialization with
/// no alternation.
inline ColumnSolution rtn_baseline(const ColumnProblem& prob) {
  QuantConfig cfg = prob.config;
  cfg.rounds = 0;
  const ColumnProblem init_only{prob.b, prob.hessian, cfg, prob.factor,
                                prob.column_index};
  return solve_column(init_only);
}

}  // namespace dq
