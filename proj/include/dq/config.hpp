#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "dq/error.hpp"

namespace dq {

/// How the integer half-step updates the not-yet-rounded suffix.
enum class ApproxLevel {
  kLevel1,  // box-constrained relaxation, projected gradient descent
  kLevel2,  // unconstrained relaxation, closed-form sequential update
};

inline std::string_view to_string(ApproxLevel level) {
  return level == ApproxLevel::kLevel1 ? "level1" : "level2";
}

inline ApproxLevel parse_approx_level(std::string_view text) {
  if (text == "level1" || text == "1") return ApproxLevel::kLevel1;
  if (text == "level2" || text == "2") return ApproxLevel::kLevel2;
  throw ValidationError("unknown approximation level '" + std::string(text) +
                        "' (expected level1 or level2)");
}

/// Pins (s, z) for the whole solve: grid search and the analytic half-step
/// are skipped. Used to reproduce hand-worked examples.
struct FixedScaleZero {
  double scale = 1.0;
  double zero = 0.0;
};

/// Every hyperparameter of the layer-wise solver.
struct QuantConfig {
  int bits = 2;
  int alpha = -2;
  int beta = 1;
  std::size_t group_count = 1;
  ApproxLevel approx = ApproxLevel::kLevel1;
  int rounds = 4;          // alternations of (w, s/z) half-steps
  int inner_iters = 8;     // PGD iterations after each rounded element
  int warmup_iters = 50;   // PGD iterations before the sequential loop
  int grid_points = 51;
  double p_min = 0.5;
  double p_max = 1.0;
  bool per_group_p = false;
  double damping_fraction = 0.01;
  double pgd_tolerance = 1e-7;
  std::uint64_t seed = 0;
  std::optional<FixedScaleZero> fixed_sz;

  /// Symmetric grid for b bits: [-2^(b-1), 2^(b-1) - 1].
  static QuantConfig for_bits(int bits) {
    QuantConfig cfg;
    cfg.set_bits(bits);
    return cfg;
  }

  void set_bits(int b) {
    bits = b;
    alpha = -(1 << (b - 1));
    beta = (1 << (b - 1)) - 1;
  }

  int levels() const { return beta - alpha + 1; }

  void validate() const {
    if (bits < 2 || bits > 4) {
      throw ValidationError("bits must be 2, 3 or 4 (got " +
                            std::to_string(bits) + ")");
    }
    if (!(alpha < beta) || beta - alpha + 1 != (1 << bits)) {
      throw ValidationError("integer range [" + std::to_string(alpha) + ", " +
                            std::to_string(beta) + "] must hold exactly 2^" +
                            std::to_string(bits) + " values");
    }
    if (group_count == 0) throw ValidationError("group count must be >= 1");
    if (rounds < 0) throw ValidationError("rounds (N) must be >= 0");
    if (inner_iters < 0) throw ValidationError("inner iterations (K) must be >= 0");
    if (warmup_iters < 0) throw ValidationError("warm-up iterations (M) must be >= 0");
    if (grid_points < 2) throw ValidationError("grid search needs at least 2 points");
    if (!(p_min > 0.0) || !(p_max >= p_min)) {
      throw ValidationError("grid search range needs 0 < p_min <= p_max");
    }
    if (!(damping_fraction >= 0.0)) {
      throw ValidationError("damping fraction must be >= 0");
    }
    if (!(pgd_tolerance >= 0.0)) throw ValidationError("PGD tolerance must be >= 0");
  }

  void validate_for(std::size_t d_in) const {
    validate();
    if (d_in % group_count != 0) {
      throw ValidationError("group count " + std::to_string(group_count) +
                            " does not divide input dimension " +
                            std::to_string(d_in) + "; choose a divisor of " +
                            std::to_string(d_in));
    }
  }
};

}  // namespace dq
