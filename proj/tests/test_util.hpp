#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "dq/dq.hpp"

namespace dq::testing {

inline Tensor2D random_tensor(Rng& rng, std::size_t rows, std::size_t cols,
                              double scale = 1.0) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor2D(rows, cols, v);
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * rng.normal();
  return v;
}

/// H from a random `rows` × d activation matrix.
inline Hessian random_hessian(Rng& rng, std::size_t rows, std::size_t d,
                              double damping = 0.01) {
  return build_hessian(random_tensor(rng, rows, d), damping);
}

inline IntVector random_codes(Rng& rng, std::size_t n, int alpha, int beta) {
  IntVector w(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    w(i) = alpha + static_cast<int>(rng.below(static_cast<std::uint64_t>(beta - alpha + 1)));
  }
  return w;
}

/// Random symmetric PSD matrix GᵀG.
inline Matrix random_psd(Rng& rng, std::size_t n, std::size_t rank) {
  const Tensor2D g = random_tensor(rng, rank, n);
  return g.matrix().transpose() * g.matrix();
}

/// A float MLP block, its 2-bit layer-wise quantization and calibration data.
struct RandomBlock {
  FloatBlock reference;
  BlockSpec spec;
  TrainableParams params;
  Tensor2D x;
  Tensor2D y_ref;
};

inline RandomBlock make_random_block(Rng& rng, std::size_t d, std::size_t h,
                                     std::size_t rows, Activation act,
                                     QuantConfig cfg = QuantConfig{}) {
  RandomBlock b;
  b.reference.activation = act;
  b.reference.ln_gamma = (Vector::Ones(static_cast<Eigen::Index>(d)) +
                          random_vector(rng, d, 0.1));
  b.reference.ln_beta = random_vector(rng, d, 0.1);
  b.reference.w1 = random_tensor(rng, d, h, 1.0 / std::sqrt(double(d))).matrix();
  b.reference.w2 = random_tensor(rng, h, d, 1.0 / std::sqrt(double(h))).matrix();
  b.x = random_tensor(rng, rows, d);
  b.y_ref = b.reference.forward(b.x);

  const auto cache =
      detail::forward_dense(b.reference.ln_gamma, b.reference.ln_beta,
                            b.reference.w1, b.reference.w2, act, b.x.matrix());
  const Hessian h1 = build_hessian(Tensor2D::from_matrix(cache.normed), cfg.damping_fraction);
  const Hessian h2 = build_hessian(Tensor2D::from_matrix(cache.hidden), cfg.damping_fraction);
  const LayerResult up = quantize_layer(Tensor2D::from_matrix(b.reference.w1), h1, cfg);
  const LayerResult down = quantize_layer(Tensor2D::from_matrix(b.reference.w2), h2, cfg);
  b.spec = BlockSpec::from_layers(up.layer, down.layer, act);
  b.params = TrainableParams::from_layers(up.layer, down.layer, b.reference.ln_gamma,
                                          b.reference.ln_beta);
  return b;
}

/// Largest relative error between block_gradients and central differences
/// with step `step`, per trainable tensor. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline std::array<double, TrainableParams::kTensorCount> gradient_check(
    const BlockSpec& spec, const TrainableParams& params, const Tensor2D& x,
    const Tensor2D& y_ref, double step = 1e-5, double floor = 1e-6) {
  const BlockGradients analytic = block_gradients(spec, params, x, y_ref);
  const auto grads = analytic.grads.views();
  std::array<double, TrainableParams::kTensorCount> worst{};
  TrainableParams probe = params;
  for (std::size_t k = 0; k < TrainableParams::kTensorCount; ++k) {
    for (Eigen::Index i = 0; i < grads[k].size(); ++i) {
      auto views = probe.views();
      const double original = views[k](i);
      views[k](i) = original + step;
      const double up = block_loss(spec, probe, x, y_ref);
      views[k](i) = original - step;
      const double down = block_loss(spec, probe, x, y_ref);
      views[k](i) = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grads[k](i);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst[k] = std::max(worst[k], std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace dq::testing
