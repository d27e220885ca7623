#pragma once

// Argument parsing for dqq. Kept apart from main() so the tests can run the
// whole front end in-process.

#include <CLI11.hpp>

#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "commands.hpp"

namespace dq::cli {

inline constexpr const char* kFormatsHelp = R"(File formats (all integers little-endian):
  tensor  "DQTEN\0"  u16 version=1, u8 dtype (0=f32, 1=f64), u8 ndim (1|2),
                     u64 dims[ndim], row-major values
  quant   "DQQNT\0"  u16 version=1, u8 bits, i32 alpha, i32 beta, u64 d_in,
                     u64 d_out, u32 groups, codes (per column, (code-alpha)
                     packed LSB-first, each column padded to a byte), f32
                     scales[d_out][groups], f32 zeros[d_out][groups]
Config file (--config): TOML; top-level keys set global flags, a [quantize]
  (etc.) table sets that subcommand's flags. Command-line flags win.
Exit codes: 0 ok, 1 invalid input, 2 I/O or format error, 3 numerical failure.
)";

/// Solver flags shared by quantize, oracle and compare-approx.
struct SolverFlags {
  int bits = 2;
  std::size_t groups = 1;
  std::string approx = "level1";
  int n = 4, k = 8, m = 50;
  int grid_points = 51;
  bool per_group_p = false;
  double tol = 1e-7;
  std::uint64_t seed = 0;
  std::vector<double> fixed_sz;

  void attach(CLI::App* app) {
    app->add_option("--bits", bits, "Bit width (2, 3 or 4); range is [-2^(b-1), 2^(b-1)-1]")
        ->capture_default_str();
    app->add_option("--groups", groups, "Groups per column; must divide d_in")
        ->capture_default_str();
    app->add_option("--approx", approx, "Integer half-step: level1 (PGD) or level2 (closed form)")
        ->check(CLI::IsMember({"level1", "level2", "1", "2"}))
        ->capture_default_str();
    app->add_option("--n", n, "Alternation rounds N (0 = grid-search RTN only)")->capture_default_str();
    app->add_option("--k", k, "PGD iterations K after each rounded element (level1)")
        ->capture_default_str();
    app->add_option("--m", m, "PGD warm-up iterations M (level1)")->capture_default_str();
    app->add_option("--grid-points", grid_points, "Grid-search points over p in [0.5, 1]")
        ->capture_default_str();
    app->add_flag("--per-group-p", per_group_p, "Choose the grid-search p per group");
    app->add_option("--pgd-tol", tol, "PGD projected-gradient stopping tolerance")
        ->capture_default_str();
    app->add_option("--seed", seed, "Seed for solver randomness")->capture_default_str();
    app->add_option("--fixed-init-sz", fixed_sz,
                    "Pin (s,z) for the whole solve, e.g. 1,0 (debugging)")
        ->delimiter(',')
        ->expected(2);
  }

  QuantConfig config() const {
    QuantConfig cfg = QuantConfig::for_bits(bits);
    cfg.group_count = groups;
    cfg.approx = parse_approx_level(approx);
    cfg.rounds = n;
    cfg.inner_iters = k;
    cfg.warmup_iters = m;
    cfg.grid_points = grid_points;
    cfg.per_group_p = per_group_p;
    cfg.pgd_tolerance = tol;
    cfg.seed = seed;
    if (!fixed_sz.empty()) cfg.fixed_sz = FixedScaleZero{fixed_sz[0], fixed_sz[1]};
    cfg.validate();
    return cfg;
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"dqq: layer-wise and block-wise post-training quantization"};
  app.footer(kFormatsHelp);
  app.require_subcommand(1);
  app.set_config("--config", "", "Read flags from a TOML file (flags on the command line win)");
  int verbose = 0;
  bool quiet = false;
  app.add_flag("-v,--verbose", verbose, "Print progress diagnostics to stderr (repeatable)");
  app.add_flag("-q,--quiet", quiet, "Suppress the summary on stdout");

  HessianOptions hess;
  auto* c_hess = app.add_subcommand("hessian", "Build H = X^T X + lambda I from activations");
  c_hess->add_option("--activations,-x", hess.activations, "Activation tensor X (rows x d)")
      ->required();
  c_hess->add_option("--out,-o", hess.out, "Output tensor file for H")->required();
  c_hess->add_option("--damping", hess.damping, "lambda as a fraction of mean diag(X^T X)")
      ->capture_default_str();

  QuantizeOptions quant;
  SolverFlags quant_flags;
  std::string quant_report;
  auto* c_quant = app.add_subcommand("quantize", "Quantize a weight matrix column by column");
  c_quant->add_option("--weights,-w", quant.weights, "Weight tensor W0 (d_in x d_out)")->required();
  c_quant->add_option("--hessian,-H", quant.hessian, "Hessian tensor (d_in x d_in)")->required();
  c_quant->add_option("--out,-o", quant.out, "Output quant file")->required();
  c_quant->add_option("--report", quant_report, "Write the JSON solve report here");
  c_quant->add_option("--workers", quant.workers, "Columns solved in parallel")
      ->capture_default_str();
  quant_flags.attach(c_quant);

  EvalOptions eval;
  std::string eval_hessian, eval_json;
  auto* c_eval = app.add_subcommand("eval", "Layer loss and relative output error of a quant file");
  c_eval->add_option("--weights,-w", eval.weights, "Original weight tensor")->required();
  c_eval->add_option("--quant,-Q", eval.quant, "Quant file")->required();
  c_eval->add_option("--activations,-x", eval.activations, "Activation tensor X")->required();
  c_eval->add_option("--hessian,-H", eval_hessian, "Use this Hessian instead of rebuilding it");
  c_eval->add_option("--damping", eval.damping, "Damping used when rebuilding H")
      ->capture_default_str();
  c_eval->add_option("--json", eval_json, "Also write the metrics as JSON");

  FinetuneCommandOptions ft;
  std::string ft_out_dir, ft_report;
  auto* c_ft = app.add_subcommand(
      "block-finetune", "Train scales, zeros and norm parameters of a quantized block");
  c_ft->add_option("--block,-b", ft.block_spec, "Block spec (TOML: up, down, ln_gamma, ln_beta, "
                                                "activation, reference | float_up + float_down)")
      ->required();
  c_ft->add_option("--calib,-x", ft.calib, "Calibration inputs (rows x d)")->required();
  c_ft->add_option("--epochs", ft.train.epochs, "Epochs J")->capture_default_str();
  c_ft->add_option("--lr", ft.train.adam.lr, "Adam learning rate")->capture_default_str();
  c_ft->add_option("--wd", ft.train.adam.weight_decay, "Decoupled weight decay")
      ->capture_default_str();
  c_ft->add_option("--batch", ft.train.batch_size, "Minibatch rows")->capture_default_str();
  c_ft->add_option("--seed", ft.train.seed, "Shuffle seed")->capture_default_str();
  c_ft->add_option("--out-dir", ft_out_dir, "Write updated files here instead of in place");
  c_ft->add_option("--report", ft_report, "Write the loss-curve JSON here");

  OracleCommandOptions orc;
  SolverFlags orc_flags;
  std::size_t orc_column = 0;
  std::string orc_json;
  auto* c_orc = app.add_subcommand("oracle", "Exhaustive search over integer codes for small columns");
  c_orc->add_option("--weights,-w", orc.weights, "Weight tensor")->required();
  c_orc->add_option("--hessian,-H", orc.hessian, "Hessian tensor")->required();
  auto* orc_col_opt = c_orc->add_option("--column", orc_column, "Only this column (default: all)");
  c_orc->add_option("--budget", orc.budget, "Refuse above this many candidates")
      ->capture_default_str();
  c_orc->add_option("--workers", orc.workers, "Enumeration threads")->capture_default_str();
  c_orc->add_option("--json", orc_json, "Write per-column results as JSON");
  orc_flags.attach(c_orc);

  CompareOptions cmp;
  SolverFlags cmp_flags;
  std::string cmp_csv;
  auto* c_cmp = app.add_subcommand("compare-approx", "Final g for level2 and level1 over a K sweep");
  c_cmp->add_option("--weights,-w", cmp.weights, "Weight tensor")->required();
  c_cmp->add_option("--hessian,-H", cmp.hessian, "Hessian tensor")->required();
  c_cmp->add_option("--k-sweep", cmp.k_sweep, "Comma-separated K values")
      ->delimiter(',')
      ->capture_default_str();
  c_cmp->add_option("--workers", cmp.workers, "Columns solved in parallel")->capture_default_str();
  c_cmp->add_option("--csv", cmp_csv, "Write the table as CSV");
  cmp_flags.attach(c_cmp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kValidation);
  }

  Log log{quiet ? 0 : 1 + verbose, &err};
  std::ostringstream sink;
  std::ostream& summary = quiet ? static_cast<std::ostream&>(sink) : out;
  auto opt_path = [](const std::string& s) -> std::optional<fs::path> {
    if (s.empty()) return std::nullopt;
    return fs::path(s);
  };

  return run_guarded(err, [&]() -> int {
    if (c_hess->parsed()) return cmd_hessian(hess, summary, log);
    if (c_quant->parsed()) {
      quant.config = quant_flags.config();
      quant.report = opt_path(quant_report);
      return cmd_quantize(quant, summary, log);
    }
    if (c_eval->parsed()) {
      eval.hessian = opt_path(eval_hessian);
      eval.json = opt_path(eval_json);
      return cmd_eval(eval, summary, log);
    }
    if (c_ft->parsed()) {
      ft.out_dir = opt_path(ft_out_dir);
      ft.report = opt_path(ft_report);
      return cmd_block_finetune(ft, summary, log);
    }
    if (c_orc->parsed()) {
      orc.config = orc_flags.config();
      if (orc_col_opt->count()) orc.column = orc_column;
      orc.json = opt_path(orc_json);
      return cmd_oracle(orc, summary, log);
    }
    cmp.config = cmp_flags.config();
    cmp.csv = opt_path(cmp_csv);
    return cmd_compare_approx(cmp, summary, log);
  });
}

}  // namespace dq::cli
