#pragma once

// Block-wise fine-tuning of the floating-point part. The block is
//
//   y = act(LN(x) · W̃1) · W̃2,   W̃k[i, j] = s_k[j, g(i)] · ŵ_k[i, j] + z_k[j, g(i)]
//
// with the integer codes ŵ frozen. Trainable: the scales and zeros of both
// quantized linears and the LayerNorm gain/bias. Rows of X are samples.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "dq/error.hpp"
#include "dq/layerwise.hpp"
#include "dq/linalg.hpp"
#include "dq/random.hpp"

namespace dq {

enum class Activation { kRelu, kGelu };

inline std::string_view to_string(Activation a) {
  return a == Activation::kRelu ? "relu" : "gelu";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  throw ValidationError("unknown activation '" + std::string(name) +
                        "' (expected relu or gelu)");
}

inline constexpr double kLayerNormEps = 1e-5;

using IntMatrix = Eigen::MatrixXi;

/// LN(d) → QuantLinear(d→h) → act → QuantLinear(h→d). Holds the frozen codes.
struct BlockSpec {
  std::size_t d = 0;
  std::size_t h = 0;
  Activation activation = Activation::kGelu;
  IntMatrix codes1;  // d × h
  IntMatrix codes2;  // h × d
  std::size_t groups1 = 1;
  std::size_t groups2 = 1;

  static BlockSpec from_layers(const QuantizedLayer& up,
                               const QuantizedLayer& down, Activation act) {
    if (up.d_out != down.d_in || up.d_in != down.d_out) {
      throw ValidationError("block layers disagree: " + std::to_string(up.d_in) +
                            "->" + std::to_string(up.d_out) + " then " +
                            std::to_string(down.d_in) + "->" +
                            std::to_string(down.d_out));
    }
    BlockSpec spec;
    spec.d = up.d_in;
    spec.h = up.d_out;
    spec.activation = act;
    spec.codes1 = unpack_all(up);
    spec.codes2 = unpack_all(down);
    spec.groups1 = up.group_count;
    spec.groups2 = down.group_count;
    return spec;
  }

  static IntMatrix unpack_all(const QuantizedLayer& q) {
    IntMatrix m(static_cast<Eigen::Index>(q.d_in), static_cast<Eigen::Index>(q.d_out));
    for (std::size_t j = 0; j < q.d_out; ++j) m.col(static_cast<Eigen::Index>(j)) = q.column(j);
    return m;
  }
};

/// The floating-point part of the block. Gradients and Adam moments use the
/// same layout.
struct TrainableParams {
  RowMatrix scales1;  // h × ng1
  RowMatrix zeros1;
  RowMatrix scales2;  // d × ng2
  RowMatrix zeros2;
  Vector ln_gamma;  // d
  Vector ln_beta;   // d

  static constexpr std::size_t kTensorCount = 6;

  static TrainableParams from_layers(const QuantizedLayer& up,
                                     const QuantizedLayer& down,
                                     const Vector& gamma, const Vector& beta) {
    return {up.scales, up.zeros, down.scales, down.zeros, gamma, beta};
  }

  TrainableParams zeros_like() const {
    return {RowMatrix::Zero(scales1.rows(), scales1.cols()),
            RowMatrix::Zero(zeros1.rows(), zeros1.cols()),
            RowMatrix::Zero(scales2.rows(), scales2.cols()),
            RowMatrix::Zero(zeros2.rows(), zeros2.cols()),
            Vector::Zero(ln_gamma.size()),
            Vector::Zero(ln_beta.size())};
  }

  std::array<Eigen::Map<Vector>, kTensorCount> views() {
    return {flat(scales1), flat(zeros1), flat(scales2),
            flat(zeros2),  flat(ln_gamma), flat(ln_beta)};
  }
  std::array<Eigen::Map<const Vector>, kTensorCount> views() const {
    return {cflat(scales1), cflat(zeros1), cflat(scales2),
            cflat(zeros2),  cflat(ln_gamma), cflat(ln_beta)};
  }

  static constexpr std::array<std::string_view, kTensorCount> kNames = {
      "scales1", "zeros1", "scales2", "zeros2", "ln_gamma", "ln_beta"};

 private:
  template <typename M>
  static Eigen::Map<Vector> flat(M& m) {
    return Eigen::Map<Vector>(m.data(), m.size());
  }
  template <typename M>
  static Eigen::Map<const Vector> cflat(const M& m) {
    return Eigen::Map<const Vector>(m.data(), m.size());
  }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kGeluC = 0.044715;
inline const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double activate(Activation a, double x) {
  return a == Activation::kRelu ? std::max(0.0, x) : gelu(x);
}

inline double activate_grad(Activation a, double x) {
  return a == Activation::kRelu ? (x > 0.0 ? 1.0 : 0.0) : gelu_grad(x);
}

/// W̃ (d_in × d_out) from codes and d_out × ng scales/zeros.
inline RowMatrix dequantize_codes(const IntMatrix& codes, const RowMatrix& scales,
                                  const RowMatrix& zeros) {
  const Eigen::Index d_in = codes.rows();
  const Eigen::Index d_out = codes.cols();
  const Eigen::Index gs = d_in / scales.cols();
  RowMatrix w(d_in, d_out);
  for (Eigen::Index i = 0; i < d_in; ++i) {
    const Eigen::Index g = i / gs;
    for (Eigen::Index j = 0; j < d_out; ++j) {
      w(i, j) = scales(j, g) * codes(i, j) + zeros(j, g);
    }
  }
  return w;
}

// Intermediate values kept for the backward pass.
struct ForwardCache {
  RowMatrix x_hat;   // B × d
  RowMatrix normed;  // B × d
  RowMatrix pre;     // B × h
  RowMatrix hidden;  // B × h
  RowMatrix out;     // B × d
  RowMatrix w1;
  RowMatrix w2;
};

inline ForwardCache forward_dense(const Vector& gamma, const Vector& beta,
                                  const RowMatrix& w1, const RowMatrix& w2,
                                  Activation act, const RowMatrix& x) {
  ForwardCache c;
  const Eigen::Index d = x.cols();
  c.x_hat.resize(x.rows(), d);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.x_hat.row(r) = (x.row(r).array() - mean) * rstd;
  }
  c.normed = (c.x_hat.array().rowwise() * gamma.transpose().array()).rowwise() +
             beta.transpose().array();
  c.pre = c.normed * w1;
  c.hidden = c.pre.unaryExpr([act](double v) { return activate(act, v); });
  c.out = c.hidden * w2;
  c.w1 = w1;
  c.w2 = w2;
  return c;
}

inline void check_block_input(const BlockSpec& spec, const TrainableParams& p,
                              const Tensor2D& x) {
  if (x.cols() != spec.d) {
    throw ValidationError("block input has " + std::to_string(x.cols()) +
                          " columns, expected " + std::to_string(spec.d));
  }
  const auto d = static_cast<Eigen::Index>(spec.d);
  const auto h = static_cast<Eigen::Index>(spec.h);
  if (p.ln_gamma.size() != d || p.ln_beta.size() != d || p.scales1.rows() != h ||
      p.scales2.rows() != d || p.scales1.cols() != static_cast<Eigen::Index>(spec.groups1) ||
      p.scales2.cols() != static_cast<Eigen::Index>(spec.groups2) ||
      p.zeros1.rows() != p.scales1.rows() || p.zeros1.cols() != p.scales1.cols() ||
      p.zeros2.rows() != p.scales2.rows() || p.zeros2.cols() != p.scales2.cols()) {
    throw ValidationError("block parameters do not match the block dimensions");
  }
}

inline ForwardCache forward_cached(const BlockSpec& spec, const TrainableParams& p,
                                   const Tensor2D& x) {
  check_block_input(spec, p, x);
  return forward_dense(p.ln_gamma, p.ln_beta,
                       dequantize_codes(spec.codes1, p.scales1, p.zeros1),
                       dequantize_codes(spec.codes2, p.scales2, p.zeros2),
                       spec.activation, x.matrix());
}

inline void check_reference(const Tensor2D& x, const Tensor2D& y_ref,
                            std::size_t d) {
  if (y_ref.rows() != x.rows() || y_ref.cols() != d) {
    throw ValidationError("reference outputs are " + std::to_string(y_ref.rows()) +
                          "x" + std::to_string(y_ref.cols()) + ", expected " +
                          std::to_string(x.rows()) + "x" + std::to_string(d));
  }
  if (x.rows() == 0) throw ValidationError("empty calibration set");
}

}  // namespace detail

/// Full-precision block, used to produce reference outputs.
struct FloatBlock {
  Vector ln_gamma;
  Vector ln_beta;
  RowMatrix w1;  // d × h
  RowMatrix w2;  // h × d
  Activation activation = Activation::kGelu;

  Tensor2D forward(const Tensor2D& x) const {
    if (x.cols() != static_cast<std::size_t>(w1.rows()) || w1.cols() != w2.rows() ||
        w2.cols() != w1.rows() || ln_gamma.size() != w1.rows() ||
        ln_beta.size() != w1.rows()) {
      throw ValidationError("float block dimensions disagree with the input");
    }
    return Tensor2D::from_matrix(
        detail::forward_dense(ln_gamma, ln_beta, w1, w2, activation, x.matrix()).out);
  }
};

inline Tensor2D block_forward(const BlockSpec& spec, const TrainableParams& p,
                              const Tensor2D& x) {
  return Tensor2D::from_matrix(detail::forward_cached(spec, p, x).out);
}

/// Mean over rows of ‖ŷ - y_ref‖².
inline double block_loss(const BlockSpec& spec, const TrainableParams& p,
                         const Tensor2D& x, const Tensor2D& y_ref) {
  detail::check_reference(x, y_ref, spec.d);
  const RowMatrix diff = detail::forward_cached(spec, p, x).out - y_ref.matrix();
  return diff.rowwise().squaredNorm().sum() / static_cast<double>(x.rows());
}

struct BlockGradients {
  double loss = 0.0;
  TrainableParams grads;
};

/// Reverse-mode gradients of block_loss w.r.t. every trainable tensor.
inline BlockGradients block_gradients(const BlockSpec& spec,
                                      const TrainableParams& p,
                                      const Tensor2D& x, const Tensor2D& y_ref) {
  detail::check_reference(x, y_ref, spec.d);
  const detail::ForwardCache c = detail::forward_cached(spec, p, x);
  const double batch = static_cast<double>(x.rows());

  const RowMatrix diff = c.out - y_ref.matrix();
  BlockGradients out;
  out.loss = diff.rowwise().squaredNorm().sum() / batch;

  const RowMatrix d_out = (2.0 / batch) * diff;
  const RowMatrix d_w2 = c.hidden.transpose() * d_out;
  const RowMatrix d_hidden = d_out * c.w2.transpose();
  RowMatrix d_pre(d_hidden.rows(), d_hidden.cols());
  for (Eigen::Index r = 0; r < d_pre.rows(); ++r) {
    for (Eigen::Index k = 0; k < d_pre.cols(); ++k) {
      d_pre(r, k) = d_hidden(r, k) * detail::activate_grad(spec.activation, c.pre(r, k));
    }
  }
  const RowMatrix d_w1 = c.normed.transpose() * d_pre;
  const RowMatrix d_normed = d_pre * c.w1.transpose();

  TrainableParams& g = out.grads;
  g = p.zeros_like();
  g.ln_gamma = (d_normed.array() * c.x_hat.array()).colwise().sum().transpose();
  g.ln_beta = d_normed.colwise().sum().transpose();

  // ∂L/∂s[j,g] = Σ_{i∈g} ∂L/∂W̃[i,j]·ŵ[i,j],  ∂L/∂z[j,g] = Σ_{i∈g} ∂L/∂W̃[i,j]
  auto reduce = [](const RowMatrix& d_w, const IntMatrix& codes, RowMatrix& d_s,
                   RowMatrix& d_z) {
    const Eigen::Index gs = codes.rows() / d_s.cols();
    for (Eigen::Index i = 0; i < codes.rows(); ++i) {
      const Eigen::Index grp = i / gs;
      for (Eigen::Index j = 0; j < codes.cols(); ++j) {
        d_s(j, grp) += d_w(i, j) * codes(i, j);
        d_z(j, grp) += d_w(i, j);
      }
    }
  };
  reduce(d_w1, spec.codes1, g.scales1, g.zeros1);
  reduce(d_w2, spec.codes2, g.scales2, g.zeros2);
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

struct AdamState {
  AdamConfig config;
  TrainableParams m;
  TrainableParams v;
  std::int64_t t = 0;

  static AdamState for_params(const TrainableParams& p, AdamConfig cfg = {}) {
    return {cfg, p.zeros_like(), p.zeros_like(), 0};
  }
};

/// Bias-corrected Adam with decoupled weight decay θ ← θ - lr·wd·θ.
inline void adam_step(TrainableParams& params, const TrainableParams& grads,
                      AdamState& state) {
  const AdamConfig& cfg = state.config;
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  auto p = params.views();
  const auto g = grads.views();
  auto m = state.m.views();
  auto v = state.v.views();
  for (std::size_t k = 0; k < TrainableParams::kTensorCount; ++k) {
    if (p[k].size() != g[k].size() || p[k].size() != m[k].size()) {
      throw ValidationError("adam_step: shape mismatch in " +
                            std::string(TrainableParams::kNames[k]));
    }
    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k].cwiseAbs2();
    p[k] -= cfg.lr * cfg.weight_decay * p[k];
    p[k].array() -= cfg.lr * (m[k].array() / bc1) /
                    ((v[k].array() / bc2).sqrt() + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

struct FinetuneOptions {
  int epochs = 4;
  std::size_t batch_size = 32;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

struct FinetuneReport {
  double initial_loss = 0.0;
  // Full-set loss after each epoch.
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
  int best_epoch = 0;  // 0 = the initial parameters
  std::size_t steps = 0;
};

struct FinetuneResult {
  TrainableParams params;
  FinetuneReport report;
};

/// Minibatch Adam over seeded per-epoch shuffles. Returns the parameters with
/// the lowest full-set loss seen, including the initial ones.
inline FinetuneResult finetune_block(const BlockSpec& spec,
                                     const TrainableParams& initial,
                                     const Tensor2D& x, const Tensor2D& y_ref,
                                     const FinetuneOptions& opts) {
  if (opts.epochs < 0) throw ValidationError("epochs must be >= 0");
  if (opts.batch_size == 0) throw ValidationError("batch size must be >= 1");
  detail::check_reference(x, y_ref, spec.d);

  FinetuneResult result{initial, {}};
  FinetuneReport& report = result.report;
  report.initial_loss = block_loss(spec, initial, x, y_ref);
  report.final_loss = report.initial_loss;
  if (report.initial_loss == 0.0) return result;

  TrainableParams params = initial;
  AdamState adam = AdamState::for_params(params, opts.adam);
  Rng rng(opts.seed);
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto d = static_cast<Eigen::Index>(spec.d);

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      RowMatrix xb(static_cast<Eigen::Index>(end - start), d);
      RowMatrix yb(static_cast<Eigen::Index>(end - start), d);
      for (std::size_t k = start; k < end; ++k) {
        const auto row = static_cast<Eigen::Index>(order[k]);
        xb.row(static_cast<Eigen::Index>(k - start)) = x.matrix().row(row);
        yb.row(static_cast<Eigen::Index>(k - start)) = y_ref.matrix().row(row);
      }
      const BlockGradients g = block_gradients(spec, params, Tensor2D::from_matrix(xb),
                                               Tensor2D::from_matrix(yb));
      adam_step(params, g.grads, adam);
      ++report.steps;
    }
    const double loss = block_loss(spec, params, x, y_ref);
    report.epoch_losses.push_back(loss);
    if (loss < report.final_loss) {
      report.final_loss = loss;
      report.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

}  // namespace dq
