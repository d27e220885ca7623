#pragma once

// Binary interchange formats. All multi-byte fields are little-endian.
//
// Tensor file (DQTEN):
//   offset  size        field
//   0       6           magic "DQTEN\0"
//   6       2   u16     version (1)
//   8       1   u8      dtype: 0 = f32, 1 = f64
//   9       1   u8      ndim (1 or 2)
//   10      8*ndim u64  dims
//   ...     payload     row-major values, element size by dtype
//
// Quantized-layer file (DQQNT):
//   0       6           magic "DQQNT\0"
//   6       2   u16     version (1)
//   8       1   u8      bits
//   9       4   i32     alpha
//   13      4   i32     beta
//   17      8   u64     d_in
//   25      8   u64     d_out
//   33      4   u32     ng (group count)
//   37      ...         codes: d_out columns, each ceil(d_in*bits/8) bytes,
//                       code = w - alpha packed LSB-first (see packing.hpp)
//   ...     4*d_out*ng  scales, f32, row-major d_out × ng
//   ...     4*d_out*ng  zeros,  f32, row-major d_out × ng

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dq/error.hpp"
#include "dq/layerwise.hpp"
#include "dq/linalg.hpp"
#include "dq/packing.hpp"

namespace dq {

inline constexpr std::array<char, 6> kTensorMagic = {'D', 'Q', 'T', 'E', 'N', '\0'};
inline constexpr std::array<char, 6> kQuantMagic = {'D', 'Q', 'Q', 'N', 'T', '\0'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

inline std::size_t dtype_size(DType t) { return t == DType::kF32 ? 4 : 8; }

// ---------------------------------------------------------------------------
// Little-endian byte buffers
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void raw(std::span<const char> bytes) {
    for (char c : bytes) buf_.push_back(static_cast<std::uint8_t>(c));
  }
  void raw(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }
  template <typename T>
  void uint(T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void i32(std::int32_t v) { uint(static_cast<std::uint32_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::span<const std::uint8_t> take(std::size_t n, std::string_view what) {
    if (remaining() < n) {
      throw ParseError("truncated " + std::string(what) + ": need " +
                           std::to_string(n) + " bytes, " +
                           std::to_string(remaining()) + " left",
                       pos_);
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename T>
  T uint(std::string_view what) {
    auto b = take(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
  }
  std::int32_t i32(std::string_view what) {
    return static_cast<std::int32_t>(uint<std::uint32_t>(what));
  }
  float f32(std::string_view what) {
    return std::bit_cast<float>(uint<std::uint32_t>(what));
  }
  double f64(std::string_view what) {
    return std::bit_cast<double>(uint<std::uint64_t>(what));
  }

  void expect_end(std::string_view what) const {
    if (remaining() != 0) {
      throw ParseError(std::string(what) + ": " + std::to_string(remaining()) +
                           " unexpected trailing bytes",
                       pos_);
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

namespace detail {

inline void expect_magic(ByteReader& r, const std::array<char, 6>& magic,
                         std::string_view kind) {
  auto got = r.take(magic.size(), "magic");
  if (!std::equal(got.begin(), got.end(), magic.begin(),
                  [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); })) {
    throw ParseError("bad magic: not a " + std::string(kind) + " file", 0);
  }
}

inline void expect_version(ByteReader& r) {
  const std::size_t at = r.offset();
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kFormatVersion) {
    throw ParseError("unsupported format version " + std::to_string(version), at);
  }
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b,
                                 std::size_t offset) {
  if (b != 0 && a > std::numeric_limits<std::uint64_t>::max() / b) {
    throw ParseError("dimension product overflows", offset);
  }
  return a * b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_tensor(const Tensor2D& t,
                                               DType dtype = DType::kF64) {
  ByteWriter w;
  w.raw(std::span<const char>(kTensorMagic));
  w.uint<std::uint16_t>(kFormatVersion);
  w.uint<std::uint8_t>(static_cast<std::uint8_t>(dtype));
  w.uint<std::uint8_t>(2);
  w.uint<std::uint64_t>(t.rows());
  w.uint<std::uint64_t>(t.cols());
  const double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (dtype == DType::kF32) {
      w.f32(static_cast<float>(p[i]));
    } else {
      w.f64(p[i]);
    }
  }
  return w.take();
}

struct DecodedTensor {
  Tensor2D tensor;
  DType dtype = DType::kF64;
};

/// Accepts ndim 1 (read as a single row) or 2. f32 payloads are widened.
inline DecodedTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, kTensorMagic, "tensor");
  detail::expect_version(r);
  const std::size_t dtype_at = r.offset();
  const auto dtype_raw = r.uint<std::uint8_t>("dtype");
  if (dtype_raw > 1) {
    throw ParseError("unsupported dtype " + std::to_string(dtype_raw), dtype_at);
  }
  const auto dtype = static_cast<DType>(dtype_raw);
  const std::size_t ndim_at = r.offset();
  const auto ndim = r.uint<std::uint8_t>("ndim");
  if (ndim < 1 || ndim > 2) {
    throw ParseError("expected a 1-D or 2-D tensor, got ndim " +
                         std::to_string(ndim),
                     ndim_at);
  }
  std::array<std::uint64_t, 2> dims{1, 1};
  for (std::size_t d = 0; d < ndim; ++d) {
    dims[ndim == 1 ? 1 : d] = r.uint<std::uint64_t>("dims");
  }
  const std::uint64_t count = detail::checked_mul(dims[0], dims[1], ndim_at);
  const std::uint64_t payload = detail::checked_mul(count, dtype_size(dtype), ndim_at);
  if (payload != r.remaining()) {
    throw ParseError("payload holds " + std::to_string(r.remaining()) +
                         " bytes, dims require " + std::to_string(payload),
                     r.offset());
  }
  std::vector<double> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    v = dtype == DType::kF32 ? static_cast<double>(r.f32("payload")) : r.f64("payload");
  }
  return {Tensor2D(static_cast<std::size_t>(dims[0]),
                   static_cast<std::size_t>(dims[1]), values),
          dtype};
}

inline void write_tensor(const std::filesystem::path& path, const Tensor2D& t,
                         DType dtype = DType::kF64) {
  write_file_bytes(path, encode_tensor(t, dtype));
}

inline DecodedTensor read_tensor_with_dtype(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

inline Tensor2D read_tensor(const std::filesystem::path& path) {
  return read_tensor_with_dtype(path).tensor;
}

// ---------------------------------------------------------------------------
// Quantized-layer files
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_quant(const QuantizedLayer& q) {
  if (q.codes.size() != q.d_out * q.column_stride()) {
    throw ValidationError("quantized layer codes have the wrong length");
  }
  ByteWriter w;
  w.raw(std::span<const char>(kQuantMagic));
  w.uint<std::uint16_t>(kFormatVersion);
  w.uint<std::uint8_t>(static_cast<std::uint8_t>(q.bits));
  w.i32(q.alpha);
  w.i32(q.beta);
  w.uint<std::uint64_t>(q.d_in);
  w.uint<std::uint64_t>(q.d_out);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(q.group_count));
  w.raw(std::span<const std::uint8_t>(q.codes));
  for (Eigen::Index i = 0; i < q.scales.size(); ++i) {
    w.f32(static_cast<float>(q.scales.data()[i]));
  }
  for (Eigen::Index i = 0; i < q.zeros.size(); ++i) {
    w.f32(static_cast<float>(q.zeros.data()[i]));
  }
  return w.take();
}

inline QuantizedLayer decode_quant(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, kQuantMagic, "quantized-layer");
  detail::expect_version(r);
  QuantizedLayer q;
  const std::size_t bits_at = r.offset();
  q.bits = r.uint<std::uint8_t>("bits");
  q.alpha = r.i32("alpha");
  q.beta = r.i32("beta");
  if (q.bits < 2 || q.bits > 4) {
    throw ParseError("unsupported bit width " + std::to_string(q.bits), bits_at);
  }
  if (static_cast<std::int64_t>(q.beta) - q.alpha + 1 != (1 << q.bits)) {
    throw ParseError("integer range does not match bit width", bits_at);
  }
  const std::size_t dims_at = r.offset();
  const auto d_in = r.uint<std::uint64_t>("d_in");
  const auto d_out = r.uint<std::uint64_t>("d_out");
  const auto ng = r.uint<std::uint32_t>("ng");
  if (ng == 0 || d_in % ng != 0) {
    throw ParseError("group count " + std::to_string(ng) +
                         " does not divide d_in " + std::to_string(d_in),
                     dims_at);
  }
  const std::uint64_t stride =
      detail::checked_mul(d_in, static_cast<std::uint64_t>(q.bits), dims_at) / 8 +
      ((d_in * static_cast<std::uint64_t>(q.bits)) % 8 ? 1 : 0);
  const std::uint64_t code_bytes = detail::checked_mul(stride, d_out, dims_at);
  const std::uint64_t params = detail::checked_mul(d_out, ng, dims_at);
  const std::uint64_t param_bytes = detail::checked_mul(params, 8, dims_at);
  if (code_bytes > r.remaining() || param_bytes != r.remaining() - code_bytes) {
    throw ParseError("file holds " + std::to_string(r.remaining()) +
                         " bytes after the header, dims require " +
                         std::to_string(code_bytes) + " code bytes + " +
                         std::to_string(param_bytes) + " parameter bytes",
                     r.offset());
  }
  q.d_in = static_cast<std::size_t>(d_in);
  q.d_out = static_cast<std::size_t>(d_out);
  q.group_count = ng;
  auto codes = r.take(static_cast<std::size_t>(code_bytes), "codes");
  q.codes.assign(codes.begin(), codes.end());
  q.scales.resize(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(ng));
  q.zeros.resize(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(ng));
  for (Eigen::Index i = 0; i < q.scales.size(); ++i) q.scales.data()[i] = r.f32("scales");
  for (Eigen::Index i = 0; i < q.zeros.size(); ++i) q.zeros.data()[i] = r.f32("zeros");
  if (!q.scales.allFinite() || !q.zeros.allFinite()) {
    throw ParseError("non-finite scale or zero", r.offset());
  }
  r.expect_end("quantized-layer file");
  return q;
}

inline void write_quant(const std::filesystem::path& path, const QuantizedLayer& q) {
  write_file_bytes(path, encode_quant(q));
}

inline QuantizedLayer read_quant(const std::filesystem::path& path) {
  try {
    return decode_quant(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// JSON reports
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const QuantConfig& cfg) {
  nlohmann::json j = {
      {"bits", cfg.bits},
      {"alpha", cfg.alpha},
      {"beta", cfg.beta},
      {"groups", cfg.group_count},
      {"approx", std::string(to_string(cfg.approx))},
      {"n", cfg.rounds},
      {"k", cfg.inner_iters},
      {"m", cfg.warmup_iters},
      {"grid_points", cfg.grid_points},
      {"p_min", cfg.p_min},
      {"p_max", cfg.p_max},
      {"per_group_p", cfg.per_group_p},
      {"damping", cfg.damping_fraction},
      {"pgd_tolerance", cfg.pgd_tolerance},
      {"seed", cfg.seed},
  };
  if (cfg.fixed_sz) {
    j["fixed_init_sz"] = {cfg.fixed_sz->scale, cfg.fixed_sz->zero};
  }
  return j;
}

/// { config, per_column: [{g_init, g_trajectory, g_final, ridge_events}],
///   totals, timings }
inline nlohmann::json to_json(const SolveReport& report) {
  nlohmann::json columns = nlohmann::json::array();
  for (const auto& c : report.columns) {
    nlohmann::json ridges = nlohmann::json::array();
    for (const auto& e : c.ridge_events) {
      ridges.push_back({{"round", e.round}, {"ridge", e.ridge}});
    }
    nlohmann::json col = {
        {"g_init", c.g_init},
        {"g_trajectory", c.g_trajectory},
        {"g_final", c.g_final},
        {"g_stored", c.g_stored},
        {"ridge_events", ridges},
        {"fatal", c.fatal},
    };
    if (c.failure) col["failure"] = *c.failure;
    columns.push_back(std::move(col));
  }
  return {
      {"config", to_json(report.config)},
      {"per_column", columns},
      {"totals",
       {{"d_in", report.d_in},
        {"d_out", report.d_out},
        {"g_init", report.total_g_init},
        {"g_final", report.total_g_final},
        {"g_stored", report.total_g_stored}}},
      {"timings", {{"seconds", report.seconds}, {"workers", report.workers}}},
  };
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(path, std::span<const std::uint8_t>(
                             reinterpret_cast<const std::uint8_t*>(text.data()),
                             text.size()));
}

}  // namespace dq
