#include <gtest/gtest.h>

#include "test_util.hpp"

namespace dq {
namespace {

using testing::make_random_block;

TEST(LayerNorm, ZeroMeanUnitVarianceInput) {
  const Vector gamma = Vector::Ones(2), beta = Vector::Zero(2);
  RowMatrix x(1, 2);
  x << 1.0, -1.0;
  const auto c = detail::forward_dense(gamma, beta, RowMatrix::Identity(2, 2),
                                       RowMatrix::Identity(2, 2), Activation::kRelu, x);
  const double factor = std::sqrt(1.0 / (1.0 + kLayerNormEps));
  EXPECT_NEAR(c.normed(0, 0), factor, 1e-15);
  EXPECT_NEAR(c.normed(0, 1), -factor, 1e-15);
}

TEST(Activations, GeluTanhForm) {
  EXPECT_EQ(detail::gelu(0.0), 0.0);
  EXPECT_NEAR(detail::gelu(1.0), 0.8411919906082768, 1e-15);
  for (double v : {-2.0, -0.3, 0.7, 1.9}) {
    const double fd = (detail::gelu(v + 1e-6) - detail::gelu(v - 1e-6)) / 2e-6;
    EXPECT_NEAR(detail::gelu_grad(v), fd, 1e-8);
  }
}

TEST(BlockForward, ZeroParametersAnnihilate) {
  Rng rng(1);
  for (Activation act : {Activation::kRelu, Activation::kGelu}) {
    auto blk = make_random_block(rng, 4, 8, 16, act);
    TrainableParams p = blk.params;
    p.scales1.setZero();
    p.zeros1.setZero();
    p.scales2.setZero();
    p.zeros2.setZero();
    EXPECT_TRUE(block_forward(blk.spec, p, blk.x).matrix().isZero(0.0));
  }
}

TEST(BlockForward, MatchesComposedDequantizedLayers) {
  Rng rng(2);
  QuantConfig cfg;
  cfg.group_count = 2;
  auto blk = make_random_block(rng, 4, 8, 24, Activation::kGelu, cfg);

  // Independent pipeline: rebuild the layers from codes, then LN → W̃1 → gelu → W̃2.
  const RowMatrix x = blk.x.matrix();
  RowMatrix expected(x.rows(), 4);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    double var = 0.0;
    for (Eigen::Index c = 0; c < 4; ++c) var += (x(r, c) - mean) * (x(r, c) - mean) / 4.0;
    Eigen::RowVectorXd n(4);
    for (Eigen::Index c = 0; c < 4; ++c) {
      n(c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * blk.params.ln_gamma(c) +
             blk.params.ln_beta(c);
    }
    Eigen::RowVectorXd hidden = Eigen::RowVectorXd::Zero(8);
    for (Eigen::Index j = 0; j < 8; ++j) {
      for (Eigen::Index i = 0; i < 4; ++i) {
        const double w = blk.params.scales1(j, i / 2) * blk.spec.codes1(i, j) +
                         blk.params.zeros1(j, i / 2);
        hidden(j) += n(i) * w;
      }
      const double v = hidden(j);
      hidden(j) = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
    }
    for (Eigen::Index j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < 8; ++i) {
        acc += hidden(i) * (blk.params.scales2(j, i / 4) * blk.spec.codes2(i, j) +
                            blk.params.zeros2(j, i / 4));
      }
      expected(r, j) = acc;
    }
  }
  EXPECT_TRUE(block_forward(blk.spec, blk.params, blk.x).matrix().isApprox(expected, 1e-12));
}

TEST(BlockForward, DimensionMismatch) {
  Rng rng(3);
  auto blk = make_random_block(rng, 4, 8, 8, Activation::kRelu);
  EXPECT_THROW(block_forward(blk.spec, blk.params, testing::random_tensor(rng, 3, 5)),
               ValidationError);
}

TEST(BlockLoss, Definition) {
  Rng rng(4);
  auto blk = make_random_block(rng, 4, 8, 8, Activation::kGelu);
  const Tensor2D y = block_forward(blk.spec, blk.params, blk.x);
  EXPECT_EQ(block_loss(blk.spec, blk.params, blk.x, y), 0.0);

  const Tensor2D x1 = Tensor2D::from_matrix(blk.x.matrix().topRows(1));
  RowMatrix y1 = block_forward(blk.spec, blk.params, x1).matrix();
  y1(0, 0) -= 3.0;
  y1(0, 1) += 4.0;
  EXPECT_NEAR(block_loss(blk.spec, blk.params, x1, Tensor2D::from_matrix(y1)), 25.0, 1e-12);
}

TEST(BlockLoss, RowPermutationInvariant) {
  Rng rng(5);
  auto blk = make_random_block(rng, 4, 8, 10, Activation::kGelu);
  const RowMatrix xr = blk.x.matrix().colwise().reverse();
  const RowMatrix yr = blk.y_ref.matrix().colwise().reverse();
  EXPECT_NEAR(block_loss(blk.spec, blk.params, blk.x, blk.y_ref),
              block_loss(blk.spec, blk.params, Tensor2D::from_matrix(xr),
                         Tensor2D::from_matrix(yr)),
              1e-14);
}

TEST(BlockGradients, ZeroAtExactFit) {
  Rng rng(6);
  auto blk = make_random_block(rng, 4, 8, 8, Activation::kGelu);
  const Tensor2D y = block_forward(blk.spec, blk.params, blk.x);
  const auto g = block_gradients(blk.spec, blk.params, blk.x, y);
  for (const auto& v : g.grads.views()) EXPECT_TRUE(v.isZero(0.0));
}

TEST(BlockGradients, MatchFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 6; ++trial) {
    const Activation act = trial % 2 ? Activation::kRelu : Activation::kGelu;
    QuantConfig cfg;
    cfg.group_count = trial % 3 == 0 ? 2 : 1;
    auto blk = make_random_block(rng, 4, 8, 8, act, cfg);
    const auto worst = testing::gradient_check(blk.spec, blk.params, blk.x, blk.y_ref);
    for (std::size_t k = 0; k < worst.size(); ++k) {
      EXPECT_LT(worst[k], 1e-4) << TrainableParams::kNames[k] << " " << to_string(act);
    }
  }
}

TEST(BlockGradients, DuplicatedBatchUnchanged) {
  Rng rng(8);
  auto blk = make_random_block(rng, 4, 8, 8, Activation::kGelu);
  RowMatrix x2(16, 4), y2(16, 4);
  x2 << blk.x.matrix(), blk.x.matrix();
  y2 << blk.y_ref.matrix(), blk.y_ref.matrix();
  const auto a = block_gradients(blk.spec, blk.params, blk.x, blk.y_ref);
  const auto b = block_gradients(blk.spec, blk.params, Tensor2D::from_matrix(x2),
                                 Tensor2D::from_matrix(y2));
  const auto va = a.grads.views();
  const auto vb = b.grads.views();
  for (std::size_t k = 0; k < va.size(); ++k) EXPECT_TRUE(va[k].isApprox(vb[k], 1e-12));
}

TrainableParams scalar_params(double value) {
  TrainableParams p;
  p.scales1 = RowMatrix::Constant(1, 1, value);
  p.zeros1 = RowMatrix::Constant(1, 1, value);
  p.scales2 = RowMatrix::Zero(0, 0);
  p.zeros2 = RowMatrix::Zero(0, 0);
  p.ln_gamma = Vector::Zero(0);
  p.ln_beta = Vector::Zero(0);
  return p;
}

TEST(Adam, FirstStepMagnitude) {
  TrainableParams p = scalar_params(2.0);
  TrainableParams g = scalar_params(1.0);
  AdamState st = AdamState::for_params(p, {.lr = 0.1, .weight_decay = 0.0});
  adam_step(p, g, st);
  EXPECT_NEAR(p.scales1(0, 0), 1.9, 1e-8);
  EXPECT_EQ(st.t, 1);
}

TEST(Adam, ZeroGradientNoDecayIsNoop) {
  TrainableParams p = scalar_params(2.0);
  AdamState st = AdamState::for_params(p, {.lr = 0.1, .weight_decay = 0.0});
  adam_step(p, scalar_params(0.0), st);
  EXPECT_EQ(p.scales1(0, 0), 2.0);
}

TEST(Adam, DecoupledWeightDecay) {
  TrainableParams p = scalar_params(2.0);
  AdamState st = AdamState::for_params(p, {.lr = 0.1, .weight_decay = 0.5});
  adam_step(p, scalar_params(0.0), st);
  EXPECT_DOUBLE_EQ(p.scales1(0, 0), 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Adam, ElementwiseRule) {
  TrainableParams p = scalar_params(0.5);
  AdamState st = AdamState::for_params(p, {.lr = 0.01});
  for (int i = 0; i < 5; ++i) adam_step(p, scalar_params(0.3 * (i + 1)), st);
  EXPECT_EQ(p.scales1(0, 0), p.zeros1(0, 0));
}

TEST(Finetune, ZeroEpochsLeavesParams) {
  Rng rng(9);
  auto blk = make_random_block(rng, 4, 8, 16, Activation::kGelu);
  const auto r = finetune_block(blk.spec, blk.params, blk.x, blk.y_ref, {.epochs = 0});
  EXPECT_TRUE(r.report.epoch_losses.empty());
  EXPECT_EQ(r.report.final_loss, r.report.initial_loss);
  EXPECT_EQ(r.params.scales1, blk.params.scales1);
  EXPECT_EQ(r.params.ln_gamma, blk.params.ln_gamma);
}

TEST(Finetune, ZeroInitialLossUnchanged) {
  Rng rng(10);
  auto blk = make_random_block(rng, 4, 8, 16, Activation::kGelu);
  const Tensor2D y = block_forward(blk.spec, blk.params, blk.x);
  const auto r = finetune_block(blk.spec, blk.params, blk.x, y, {.epochs = 3});
  EXPECT_EQ(r.report.final_loss, 0.0);
  EXPECT_EQ(r.params.zeros2, blk.params.zeros2);
}

TEST(Finetune, ImprovesAndIsDeterministic) {
  Rng rng(11);
  auto blk = make_random_block(rng, 4, 8, 64, Activation::kGelu);
  const FinetuneOptions opts{.epochs = 4, .batch_size = 32, .adam = {.lr = 1e-3}, .seed = 5};
  const auto a = finetune_block(blk.spec, blk.params, blk.x, blk.y_ref, opts);
  const auto b = finetune_block(blk.spec, blk.params, blk.x, blk.y_ref, opts);
  EXPECT_LT(a.report.final_loss, a.report.initial_loss);
  EXPECT_EQ(a.report.epoch_losses, b.report.epoch_losses);
  EXPECT_EQ(a.params.scales1, b.params.scales1);
  EXPECT_EQ(a.report.steps, 8u);
}

TEST(Finetune, BestSeenNeverWorseEvenWithHugeLearningRate) {
  Rng rng(12);
  auto blk = make_random_block(rng, 4, 8, 32, Activation::kRelu);
  const auto r = finetune_block(blk.spec, blk.params, blk.x, blk.y_ref,
                                {.epochs = 3, .batch_size = 8, .adam = {.lr = 10.0}});
  EXPECT_LE(r.report.final_loss, r.report.initial_loss);
  EXPECT_EQ(block_loss(blk.spec, r.params, blk.x, blk.y_ref), r.report.final_loss);
}

TEST(Finetune, CodesAreFrozen) {
  Rng rng(13);
  auto blk = make_random_block(rng, 4, 8, 32, Activation::kGelu);
  const IntMatrix c1 = blk.spec.codes1, c2 = blk.spec.codes2;
  finetune_block(blk.spec, blk.params, blk.x, blk.y_ref, {.epochs = 2, .adam = {.lr = 1e-2}});
  EXPECT_EQ(blk.spec.codes1, c1);
  EXPECT_EQ(blk.spec.codes2, c2);
}

}  // namespace
}  // namespace dq
