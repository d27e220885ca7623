#pragma once

// Command implementations behind the dqq executable. Each takes a plain
// options struct, writes human-readable output to `out` and throws dq::Error
// on failure; run_guarded turns exceptions into exit codes.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dq/dq.hpp"

namespace dq::cli {

namespace fs = std::filesystem;

/// 0 = quiet, 1 = normal, 2+ = verbose diagnostics on stderr.
struct Log {
  int level = 1;
  std::ostream* err = &std::cerr;

  void info(const std::string& msg) const {
    if (level >= 2) *err << "[dqq] " << msg << "\n";
  }
};

inline int run_guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kValidation);
  }
}

/// A stored d × d matrix as a Hessian. λ is unknown at this point and
/// reported as 0.
inline Hessian hessian_from_tensor(const Tensor2D& t) {
  if (t.rows() != t.cols() || t.rows() == 0) {
    throw ValidationError("Hessian file must hold a non-empty square matrix, got " +
                          std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
  }
  const Matrix m = t.matrix();
  const double scale = m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ValidationError("Hessian file is not symmetric");
  }
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!(m(i, i) > 0.0)) {
      throw ValidationError("Hessian diagonal entry " + std::to_string(i) +
                            " is not positive");
    }
  }
  return Hessian{m, 0.0, 0};
}

inline Hessian read_hessian(const fs::path& path) {
  return hessian_from_tensor(read_tensor(path));
}

// ---------------------------------------------------------------------------
// hessian
// ---------------------------------------------------------------------------

struct HessianOptions {
  fs::path activations;
  fs::path out;
  double damping = 0.01;
};

inline int cmd_hessian(const HessianOptions& o, std::ostream& out, const Log& log) {
  if (!(o.damping >= 0.0)) throw ValidationError("--damping must be >= 0");
  log.info("reading activations from " + o.activations.string());
  const Tensor2D x = read_tensor(o.activations);
  const Hessian h = build_hessian(x, o.damping);
  write_tensor(o.out, Tensor2D::from_matrix(h.matrix), DType::kF64);
  const Vector diag = h.matrix.diagonal();
  out << "rows: " << h.source_rows << "\n"
      << "dim: " << h.dim() << "\n"
      << std::setprecision(10) << "lambda: " << h.damping_lambda << "\n"
      << "diag min/mean/max: " << diag.minCoeff() << " " << diag.mean() << " "
      << diag.maxCoeff() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

struct QuantizeOptions {
  fs::path weights;
  fs::path hessian;
  fs::path out;
  std::optional<fs::path> report;
  QuantConfig config;
  std::size_t workers = 1;
};

inline int cmd_quantize(const QuantizeOptions& o, std::ostream& out, const Log& log) {
  if (o.workers == 0) throw ValidationError("--workers must be >= 1");
  o.config.validate();
  const Tensor2D w0 = read_tensor(o.weights);
  const Hessian h = read_hessian(o.hessian);
  log.info("quantizing " + std::to_string(w0.rows()) + "x" + std::to_string(w0.cols()) +
           " with " + std::to_string(o.workers) + " worker(s)");
  const LayerResult r = quantize_layer(w0, h, o.config, o.workers);
  write_quant(o.out, r.layer);
  if (o.report) write_json(*o.report, to_json(r.report));

  std::size_t fatal = 0;
  for (const auto& c : r.report.columns) fatal += c.fatal ? 1 : 0;
  out << std::setprecision(12) << "columns: " << r.report.d_out << "\n"
      << "g_init: " << r.report.total_g_init << "\n"
      << "g_final: " << r.report.total_g_final << "\n"
      << "g_stored: " << r.report.total_g_stored << "\n"
      << "fatal columns: " << fatal << "\n";
  return fatal ? static_cast<int>(ExitCode::kNumerical) : 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  fs::path weights;
  fs::path quant;
  fs::path activations;
  std::optional<fs::path> hessian;
  double damping = 0.01;
  std::optional<fs::path> json;
};

struct EvalMetrics {
  double g_total = 0.0;
  double g_mean = 0.0;
  double relative_output_error = 0.0;
  std::vector<double> g_columns;
};

inline EvalMetrics evaluate(const Tensor2D& w0, const QuantizedLayer& q,
                            const Tensor2D& x, const Hessian& h) {
  if (q.d_in != w0.rows() || q.d_out != w0.cols()) {
    throw ValidationError("quantized layer is " + std::to_string(q.d_in) + "x" +
                          std::to_string(q.d_out) + " but weights are " +
                          std::to_string(w0.rows()) + "x" + std::to_string(w0.cols()));
  }
  if (x.cols() != w0.rows()) {
    throw ValidationError("activations have " + std::to_string(x.cols()) +
                          " columns but the layer input dimension is " +
                          std::to_string(w0.rows()));
  }
  if (h.dim() != w0.rows()) throw ValidationError("Hessian dimension does not match weights");
  EvalMetrics m;
  for (std::size_t j = 0; j < q.d_out; ++j) {
    const Vector b = w0.matrix().col(static_cast<Eigen::Index>(j));
    m.g_columns.push_back(
        layer_loss(q.column(j), q.column_scales(j), q.column_zeros(j), b, h.matrix));
    m.g_total += m.g_columns.back();
  }
  m.g_mean = q.d_out ? m.g_total / static_cast<double>(q.d_out) : 0.0;
  const RowMatrix ref = x.matrix() * w0.matrix();
  const double num = (x.matrix() * q.dequantize() - ref).norm();
  const double den = ref.norm();
  m.relative_output_error =
      den > 0.0 ? num / den : (num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  return m;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out, const Log& log) {
  const Tensor2D w0 = read_tensor(o.weights);
  const QuantizedLayer q = read_quant(o.quant);
  const Tensor2D x = read_tensor(o.activations);
  const Hessian h = o.hessian ? read_hessian(*o.hessian) : build_hessian(x, o.damping);
  log.info(o.hessian ? "using stored Hessian" : "Hessian rebuilt from activations");
  const EvalMetrics m = evaluate(w0, q, x, h);
  out << std::setprecision(17) << "g_total: " << m.g_total << "\n"
      << "g_mean_per_column: " << m.g_mean << "\n"
      << "relative_output_error: " << m.relative_output_error << "\n";
  if (o.json) {
    write_json(*o.json, {{"g_total", m.g_total},
                         {"g_mean_per_column", m.g_mean},
                         {"relative_output_error", m.relative_output_error},
                         {"g_per_column", m.g_columns}});
  }
  return 0;
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

struct OracleCommandOptions {
  fs::path weights;
  fs::path hessian;
  std::optional<std::size_t> column;
  QuantConfig config;
  std::uint64_t budget = kDefaultOracleBudget;
  std::size_t workers = 1;
  std::optional<fs::path> json;
};

inline int cmd_oracle(const OracleCommandOptions& o, std::ostream& out, const Log& log) {
  const Tensor2D w0 = read_tensor(o.weights);
  const Hessian h = read_hessian(o.hessian);
  if (h.dim() != w0.rows()) throw ValidationError("Hessian dimension does not match weights");
  o.config.validate_for(w0.rows());
  std::vector<std::size_t> columns;
  if (o.column) {
    if (*o.column >= w0.cols()) {
      throw ValidationError("--column " + std::to_string(*o.column) + " out of range (layer has " +
                            std::to_string(w0.cols()) + " columns)");
    }
    columns.push_back(*o.column);
  } else {
    for (std::size_t j = 0; j < w0.cols(); ++j) columns.push_back(j);
  }

  OracleOptions opts;
  opts.budget = o.budget;
  opts.workers = std::max<std::size_t>(1, o.workers);
  opts.fixed_sz = o.config.fixed_sz;
  nlohmann::json rows = nlohmann::json::array();
  out << "column,g_opt,g_solver,g_rtn,ratio\n" << std::setprecision(12);
  for (std::size_t j : columns) {
    const ColumnProblem prob{w0.matrix().col(static_cast<Eigen::Index>(j)), h, o.config,
                             nullptr, j};
    log.info("enumerating column " + std::to_string(j));
    const OracleResult r = exhaustive_solve(prob, opts);
    const ColumnSolution solver = solve_column(prob);
    const ColumnSolution rtn = rtn_baseline(prob);
    const double ratio = r.g_opt > 0.0 ? solver.g_final / r.g_opt
                                       : (solver.g_final == 0.0 ? 1.0 : std::numeric_limits<double>::infinity());
    out << j << "," << r.g_opt << "," << solver.g_final << "," << rtn.g_final << "," << ratio
        << "\n";
    std::vector<int> w(r.w_opt.data(), r.w_opt.data() + r.w_opt.size());
    rows.push_back({{"column", j},
                    {"g_opt", r.g_opt},
                    {"w_opt", w},
                    {"s_opt", std::vector<double>(r.s_opt.data(), r.s_opt.data() + r.s_opt.size())},
                    {"z_opt", std::vector<double>(r.z_opt.data(), r.z_opt.data() + r.z_opt.size())},
                    {"candidates", r.candidates_evaluated},
                    {"g_solver", solver.g_final},
                    {"g_rtn", rtn.g_final}});
  }
  if (o.json) write_json(*o.json, rows);
  return 0;
}

// ---------------------------------------------------------------------------
// compare-approx
// ---------------------------------------------------------------------------

struct CompareOptions {
  fs::path weights;
  fs::path hessian;
  std::vector<int> k_sweep{1, 2, 4, 8, 20};
  QuantConfig config;
  std::size_t workers = 1;
  std::optional<fs::path> csv;
};

struct CompareRow {
  std::string approx;
  std::optional<int> k;
  double g_final = 0.0;
};

inline std::vector<CompareRow> compare_approx(const Tensor2D& w0, const Hessian& h,
                                              const QuantConfig& base,
                                              const std::vector<int>& k_sweep,
                                              std::size_t workers) {
  std::vector<CompareRow> rows;
  QuantConfig l2 = base;
  l2.approx = ApproxLevel::kLevel2;
  rows.push_back({"level2", std::nullopt, quantize_layer(w0, h, l2, workers).report.total_g_final});
  for (int k : k_sweep) {
    QuantConfig l1 = base;
    l1.approx = ApproxLevel::kLevel1;
    l1.inner_iters = k;
    rows.push_back({"level1", k, quantize_layer(w0, h, l1, workers).report.total_g_final});
  }
  return rows;
}

inline int cmd_compare_approx(const CompareOptions& o, std::ostream& out, const Log& log) {
  if (o.k_sweep.empty()) throw ValidationError("--k-sweep needs at least one value");
  const Tensor2D w0 = read_tensor(o.weights);
  const Hessian h = read_hessian(o.hessian);
  log.info("running level2 and " + std::to_string(o.k_sweep.size()) + " level1 setting(s)");
  const auto rows = compare_approx(w0, h, o.config, o.k_sweep, std::max<std::size_t>(1, o.workers));
  std::ostringstream csv;
  csv << std::setprecision(17) << "approx,k,g_final\n";
  for (const auto& r : rows) {
    csv << r.approx << "," << (r.k ? std::to_string(*r.k) : std::string()) << "," << r.g_final
        << "\n";
  }
  out << csv.str();
  if (o.csv) {
    const std::string text = csv.str();
    write_file_bytes(*o.csv, std::span<const std::uint8_t>(
                                 reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// block-finetune
// ---------------------------------------------------------------------------

/// Paths of a quantized MLP block, read from a small TOML file. Relative
/// paths are resolved against the file's directory.
///
///   up = "up.dqq"            # d -> h
///   down = "down.dqq"        # h -> d
///   ln_gamma = "gamma.dqt"
///   ln_beta = "beta.dqt"
///   activation = "gelu"      # or "relu"
///   reference = "y.dqt"      # target outputs for the calibration rows, or
///   float_up = "w1.dqt"      # float weights to compute them from
///   float_down = "w2.dqt"
struct BlockFiles {
  fs::path up, down, ln_gamma, ln_beta;
  Activation activation = Activation::kGelu;
  std::optional<fs::path> reference, float_up, float_down;
};

inline BlockFiles read_block_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open block spec " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::ParseError& e) {
    throw ValidationError("block spec " + path.string() + ": " + e.what());
  }
  std::map<std::string, std::string> kv;
  for (const auto& item : items) {
    if (item.inputs.size() != 1 || !item.parents.empty()) {
      throw ValidationError("block spec " + path.string() + ": key '" + item.name +
                            "' must be a single top-level string");
    }
    kv[item.name] = item.inputs.front();
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& v) { return fs::path(v).is_absolute() ? fs::path(v) : base / v; };
  auto required = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      throw ValidationError("block spec " + path.string() + " is missing '" + key + "'");
    }
    return resolve(it->second);
  };
  auto optional = [&](const char* key) -> std::optional<fs::path> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return resolve(it->second);
  };
  static const char* known[] = {"up", "down", "ln_gamma", "ln_beta", "activation",
                                "reference", "float_up", "float_down"};
  for (const auto& [k, v] : kv) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) ==
        std::end(known)) {
      throw ValidationError("block spec " + path.string() + ": unknown key '" + k + "'");
    }
  }

  BlockFiles f;
  f.up = required("up");
  f.down = required("down");
  f.ln_gamma = required("ln_gamma");
  f.ln_beta = required("ln_beta");
  if (auto it = kv.find("activation"); it != kv.end()) f.activation = parse_activation(it->second);
  f.reference = optional("reference");
  f.float_up = optional("float_up");
  f.float_down = optional("float_down");
  if (!f.reference && !(f.float_up && f.float_down)) {
    throw ValidationError("block spec " + path.string() +
                          " needs 'reference' or both 'float_up' and 'float_down'");
  }
  return f;
}

struct FinetuneCommandOptions {
  fs::path block_spec;
  fs::path calib;
  std::optional<fs::path> out_dir;  // write updated files here instead of in place
  std::optional<fs::path> report;
  FinetuneOptions train;
};

inline Vector as_vector(const Tensor2D& t, const std::string& name, std::size_t d) {
  if (t.size() != d || (t.rows() != 1 && t.cols() != 1)) {
    throw ValidationError(name + " must hold " + std::to_string(d) + " values, got a " +
                          std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + " tensor");
  }
  return Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(d));
}

inline Tensor2D reshaped_like(const Vector& v, const Tensor2D& like) {
  return Tensor2D(like.rows(), like.cols(), std::vector<double>(v.data(), v.data() + v.size()));
}

inline RowMatrix round_f32(const RowMatrix& m) { return m.cast<float>().cast<double>(); }

inline int cmd_block_finetune(const FinetuneCommandOptions& o, std::ostream& out,
                              const Log& log) {
  const BlockFiles files = read_block_spec(o.block_spec);
  QuantizedLayer up = read_quant(files.up);
  QuantizedLayer down = read_quant(files.down);
  const DecodedTensor gamma_file = read_tensor_with_dtype(files.ln_gamma);
  const DecodedTensor beta_file = read_tensor_with_dtype(files.ln_beta);
  const BlockSpec spec = BlockSpec::from_layers(up, down, files.activation);
  const Vector gamma = as_vector(gamma_file.tensor, "ln_gamma", spec.d);
  const Vector beta = as_vector(beta_file.tensor, "ln_beta", spec.d);
  const Tensor2D x = read_tensor(o.calib);

  Tensor2D y_ref;
  if (files.reference) {
    y_ref = read_tensor(*files.reference);
  } else {
    FloatBlock ref{gamma, beta, read_tensor(*files.float_up).matrix(),
                   read_tensor(*files.float_down).matrix(), files.activation};
    if (static_cast<std::size_t>(ref.w1.rows()) != spec.d ||
        static_cast<std::size_t>(ref.w1.cols()) != spec.h ||
        static_cast<std::size_t>(ref.w2.rows()) != spec.h ||
        static_cast<std::size_t>(ref.w2.cols()) != spec.d) {
      throw ValidationError("float weights do not match the quantized block shape");
    }
    detail::check_block_input(spec, TrainableParams::from_layers(up, down, gamma, beta), x);
    y_ref = ref.forward(x);
  }

  const TrainableParams initial = TrainableParams::from_layers(up, down, gamma, beta);
  log.info("fine-tuning on " + std::to_string(x.rows()) + " rows for " +
           std::to_string(o.train.epochs) + " epoch(s)");
  const FinetuneResult r = finetune_block(spec, initial, x, y_ref, o.train);

  // Files hold f32 scales/zeros and norm params in their original dtype; keep
  // the rounded parameters only if they are still no worse than the start.
  TrainableParams stored = r.params;
  stored.scales1 = round_f32(stored.scales1);
  stored.zeros1 = round_f32(stored.zeros1);
  stored.scales2 = round_f32(stored.scales2);
  stored.zeros2 = round_f32(stored.zeros2);
  if (gamma_file.dtype == DType::kF32) stored.ln_gamma = stored.ln_gamma.cast<float>().cast<double>();
  if (beta_file.dtype == DType::kF32) stored.ln_beta = stored.ln_beta.cast<float>().cast<double>();
  double stored_loss = block_loss(spec, stored, x, y_ref);
  bool kept_initial = false;
  if (stored_loss > r.report.initial_loss) {
    stored = initial;
    stored_loss = r.report.initial_loss;
    kept_initial = true;
  }

  up.scales = stored.scales1;
  up.zeros = stored.zeros1;
  down.scales = stored.scales2;
  down.zeros = stored.zeros2;
  auto target = [&](const fs::path& p) { return o.out_dir ? *o.out_dir / p.filename() : p; };
  if (o.out_dir) fs::create_directories(*o.out_dir);
  write_quant(target(files.up), up);
  write_quant(target(files.down), down);
  write_tensor(target(files.ln_gamma), reshaped_like(stored.ln_gamma, gamma_file.tensor),
               gamma_file.dtype);
  write_tensor(target(files.ln_beta), reshaped_like(stored.ln_beta, beta_file.tensor),
               beta_file.dtype);

  const nlohmann::json report = {
      {"epochs", o.train.epochs},
      {"batch_size", o.train.batch_size},
      {"lr", o.train.adam.lr},
      {"weight_decay", o.train.adam.weight_decay},
      {"seed", o.train.seed},
      {"initial_loss", r.report.initial_loss},
      {"epoch_losses", r.report.epoch_losses},
      {"final_loss", r.report.final_loss},
      {"stored_loss", stored_loss},
      {"best_epoch", r.report.best_epoch},
      {"steps", r.report.steps},
      {"kept_initial", kept_initial},
  };
  if (o.report) write_json(*o.report, report);
  out << std::setprecision(12) << "initial_loss: " << r.report.initial_loss << "\n"
      << "final_loss: " << r.report.final_loss << "\n"
      << "stored_loss: " << stored_loss << "\n"
      << "best_epoch: " << r.report.best_epoch << "\n";
  return 0;
}

}  // namespace dq::cli
