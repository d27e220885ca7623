// Quantize a random layer to 2 bits, compare with round-to-nearest, then
// fine-tune the scales of a small quantized MLP block.

#include <cstdio>

#include "dq/dq.hpp"

int main() {
  dq::Rng rng(42);
  const std::size_t d_in = 32, d_out = 16, rows = 256;

  std::vector<double> xs(rows * d_in), ws(d_in * d_out);
  for (auto& v : xs) v = rng.normal();
  for (auto& v : ws) v = rng.normal() / 6.0;
  const dq::Tensor2D x(rows, d_in, xs);
  const dq::Tensor2D w0(d_in, d_out, ws);
  const dq::Hessian h = dq::build_hessian(x, 0.01);

  dq::QuantConfig cfg;
  cfg.group_count = 4;
  dq::QuantConfig rtn = cfg;
  rtn.rounds = 0;
  const auto base = dq::quantize_layer(w0, h, rtn);
  const auto l1 = dq::quantize_layer(w0, h, cfg, 4);
  cfg.approx = dq::ApproxLevel::kLevel2;
  const auto l2 = dq::quantize_layer(w0, h, cfg, 4);
  std::printf("layer loss  rtn %.5f  level1 %.5f  level2 %.5f\n", base.report.total_g_stored,
              l1.report.total_g_stored, l2.report.total_g_stored);

  // LN -> 8x32 -> gelu -> 32x8, quantized layer by layer, then trained.
  const std::size_t d = 8, hid = 32;
  dq::FloatBlock block;
  block.ln_gamma = dq::Vector::Ones(d);
  block.ln_beta = dq::Vector::Zero(d);
  block.w1 = dq::RowMatrix(d, hid);
  block.w2 = dq::RowMatrix(hid, d);
  for (Eigen::Index i = 0; i < block.w1.size(); ++i) block.w1.data()[i] = rng.normal() / 3.0;
  for (Eigen::Index i = 0; i < block.w2.size(); ++i) block.w2.data()[i] = rng.normal() / 6.0;
  std::vector<double> cs(rows * d);
  for (auto& v : cs) v = rng.normal();
  const dq::Tensor2D calib(rows, d, cs);
  const dq::Tensor2D target = block.forward(calib);

  const auto cache = dq::detail::forward_dense(block.ln_gamma, block.ln_beta, block.w1, block.w2,
                                               block.activation, calib.matrix());
  dq::QuantConfig bc;
  const auto up = dq::quantize_layer(dq::Tensor2D::from_matrix(block.w1),
                                     dq::build_hessian(dq::Tensor2D::from_matrix(cache.normed), 0.01), bc);
  const auto down = dq::quantize_layer(dq::Tensor2D::from_matrix(block.w2),
                                       dq::build_hessian(dq::Tensor2D::from_matrix(cache.hidden), 0.01), bc);
  const auto spec = dq::BlockSpec::from_layers(up.layer, down.layer, block.activation);
  const auto params =
      dq::TrainableParams::from_layers(up.layer, down.layer, block.ln_gamma, block.ln_beta);

  dq::FinetuneOptions opts;
  opts.adam.lr = 1e-3;
  const auto tuned = dq::finetune_block(spec, params, calib, target, opts);
  std::printf("block loss  before %.5f  after %.5f\n", tuned.report.initial_loss,
              tuned.report.final_loss);
  return 0;
}
