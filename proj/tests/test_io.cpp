#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

namespace dq {
namespace {

TEST(Packing, TwoBitByteOrder) {
  const std::vector<int> w{-2, -1, 0, 1};
  const auto bytes = pack_codes(w, 2, -2);
  ASSERT_EQ(bytes.size(), 1u);
  EXPECT_EQ(bytes[0], 0xE4);
  EXPECT_EQ(unpack_codes(bytes, 4, 2, -2), w);
}

TEST(Packing, AllAlphaIsZeroBytes) {
  const std::vector<int> w(13, -4);
  for (auto b : pack_codes(w, 3, -4)) EXPECT_EQ(b, 0);
}

TEST(Packing, FourAndThreeBitLayouts) {
  // 4-bit: two codes per byte, low nibble first.
  EXPECT_EQ(pack_codes(std::vector<int>{-8, 7, 0}, 4, -8),
            (std::vector<std::uint8_t>{0xF0, 0x08}));
  // 3-bit: codes 1..5 -> bits 001 010 011 100 101 laid LSB-first.
  // stream: c0=1 (bits0-2), c1=2 (3-5), c2=3 (6-8), c3=4 (9-11), c4=5 (12-14)
  // byte0 = 1 | 2<<3 | (3&3)<<6 = 0xD1, byte1 = (3>>2) | 4<<1 | 5<<4 = 0x58
  EXPECT_EQ(pack_codes(std::vector<int>{-3, -2, -1, 0, 1}, 3, -4),
            (std::vector<std::uint8_t>{0xD1, 0x58}));
}

TEST(Packing, PadBitsIgnored) {
  std::vector<std::uint8_t> bytes{0xE4 | 0xC0};
  EXPECT_EQ(unpack_codes(bytes, 3, 2, -2), (std::vector<int>{-2, -1, 0}));
}

TEST(Packing, RejectsOutOfRange) {
  try {
    pack_codes(std::vector<int>{0, 1, 2}, 2, -2);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos);
  }
}

TEST(Packing, CorruptLengthNamesCounts) {
  const std::vector<std::uint8_t> bytes(2, 0);
  try {
    unpack_codes(bytes, 12, 2, -2);
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 3"), std::string::npos);
    EXPECT_NE(msg.find("got 2"), std::string::npos);
  }
}

TEST(Packing, RandomRoundTrip) {
  Rng rng(101);
  for (int bits : {2, 3, 4}) {
    const int alpha = -(1 << (bits - 1));
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng.below(70);
      std::vector<int> w(n);
      for (auto& v : w) v = alpha + static_cast<int>(rng.below(1u << bits));
      const auto bytes = pack_codes(w, bits, alpha);
      ASSERT_EQ(bytes.size(), packed_size(n, bits));
      ASSERT_EQ(unpack_codes(bytes, n, bits, alpha), w);
    }
  }
}

TEST(TensorFile, HeaderLayout) {
  const auto bytes = encode_tensor(Tensor2D(2, 3, {1, 2, 3, 4, 5, 6}), DType::kF32);
  ASSERT_EQ(bytes.size(), 10u + 16u + 24u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "DQTEN");
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // version LE
  EXPECT_EQ(bytes[7], 0);
  EXPECT_EQ(bytes[8], 0);  // f32
  EXPECT_EQ(bytes[9], 2);  // ndim
  EXPECT_EQ(bytes[10], 2);  // rows LE u64
  EXPECT_EQ(bytes[18], 3);  // cols
  // 1.0f = 0x3F800000, little-endian.
  EXPECT_EQ(bytes[26], 0x00);
  EXPECT_EQ(bytes[29], 0x3F);
}

TEST(TensorFile, RoundTripBitExact) {
  Rng rng(103);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor2D t = testing::random_tensor(rng, 1 + rng.below(9), 1 + rng.below(9), 1e3);
    const DecodedTensor back = decode_tensor(encode_tensor(t));
    EXPECT_EQ(back.dtype, DType::kF64);
    EXPECT_EQ(std::memcmp(back.tensor.data(), t.data(), t.size() * sizeof(double)), 0);
    EXPECT_EQ(encode_tensor(back.tensor), encode_tensor(t));
  }
}

TEST(TensorFile, F32WideningIsExact) {
  std::vector<double> v{0.1f, -3.25f, 1e-20f, 7.0f};
  const Tensor2D t(2, 2, v);
  const DecodedTensor back = decode_tensor(encode_tensor(t, DType::kF32));
  EXPECT_EQ(back.dtype, DType::kF32);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back.tensor.data()[i], v[i]);
  EXPECT_EQ(encode_tensor(back.tensor, DType::kF32), encode_tensor(t, DType::kF32));
}

TEST(TensorFile, OneDimensionalIsARow) {
  ByteWriter w;
  w.raw(std::span<const char>(kTensorMagic));
  w.uint<std::uint16_t>(1);
  w.uint<std::uint8_t>(1);
  w.uint<std::uint8_t>(1);
  w.uint<std::uint64_t>(3);
  for (double v : {1.0, 2.0, 3.0}) w.f64(v);
  const auto t = decode_tensor(w.take()).tensor;
  EXPECT_EQ(t.rows(), 1u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(0, 2), 3.0);
}

TEST(TensorFile, StructuredErrors) {
  auto good = encode_tensor(Tensor2D(2, 2, {1, 2, 3, 4}));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tensor(bad_magic), ParseError);

  auto bad_version = good;
  bad_version[6] = 2;
  try {
    decode_tensor(bad_version);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 6u);
  }

  auto bad_dtype = good;
  bad_dtype[8] = 7;
  EXPECT_THROW(decode_tensor(bad_dtype), ParseError);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_tensor(truncated), ParseError);

  auto overflow = good;
  for (int i = 10; i < 26; ++i) overflow[i] = 0xFF;
  try {
    decode_tensor(overflow);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("overflow"), std::string::npos);
  }
}

TEST(QuantFile, WorkedExampleEndToEnd) {
  const Hessian h{Matrix{{2, 1}, {1, 1}}, 0.0, 0};
  QuantConfig cfg;
  cfg.approx = ApproxLevel::kLevel2;
  cfg.fixed_sz = FixedScaleZero{1.0, 0.0};
  const LayerResult r = quantize_layer(Tensor2D(2, 1, {0.6, 0.0}), h, cfg);

  const auto path = std::filesystem::temp_directory_path() / "dq_test_worked.dqq";
  write_quant(path, r.layer);
  const QuantizedLayer back = read_quant(path);
  std::filesystem::remove(path);

  EXPECT_EQ(back.column(0), (IntVector{{1, 0}}));
  const RowMatrix w = back.dequantize();
  EXPECT_EQ(w(0, 0), back.scales(0, 0) * 1 + back.zeros(0, 0));
  EXPECT_EQ(w(1, 0), back.zeros(0, 0));
  EXPECT_EQ(w(0, 0), 1.0);
}

TEST(QuantFile, RoundTripAndPackedEqualsUnpacked) {
  Rng rng(107);
  for (int bits : {2, 3, 4}) {
    QuantConfig cfg = QuantConfig::for_bits(bits);
    cfg.group_count = 3;
    cfg.rounds = 1;
    const Hessian h = testing::random_hessian(rng, 40, 9);
    const LayerResult r = quantize_layer(testing::random_tensor(rng, 9, 5), h, cfg);
    const auto bytes = encode_quant(r.layer);
    ASSERT_EQ(bytes.size(), 37u + 5 * packed_size(9, bits) + 2 * 4 * 5 * 3);
    const QuantizedLayer back = decode_quant(bytes);
    EXPECT_EQ(encode_quant(back), bytes);
    EXPECT_EQ(back.dequantize(), r.layer.dequantize());
    // Dequantize from unpacked codes independently.
    for (std::size_t j = 0; j < 5; ++j) {
      const auto codes = unpack_codes(back.column_bytes(j), 9, bits, back.alpha);
      for (std::size_t i = 0; i < 9; ++i) {
        const auto g = static_cast<Eigen::Index>(i / 3);
        const auto jj = static_cast<Eigen::Index>(j);
        EXPECT_EQ(back.dequantize()(static_cast<Eigen::Index>(i), jj),
                  back.scales(jj, g) * codes[i] + back.zeros(jj, g));
      }
    }
  }
}

TEST(QuantFile, StructuredErrors) {
  Rng rng(109);
  const Hessian h = testing::random_hessian(rng, 20, 4);
  QuantConfig cfg;
  cfg.rounds = 0;
  const auto good = encode_quant(quantize_layer(testing::random_tensor(rng, 4, 2), h, cfg).layer);

  auto bad_magic = good;
  bad_magic[2] = 'T';
  EXPECT_THROW(decode_quant(bad_magic), ParseError);

  auto bad_range = good;
  bad_range[8] = 3;  // bits=3 but range still 4 values
  EXPECT_THROW(decode_quant(bad_range), ParseError);

  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_quant(truncated), ParseError);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_quant(trailing), ParseError);

  auto huge = good;
  for (int i = 17; i < 33; ++i) huge[i] = 0xFF;
  EXPECT_THROW(decode_quant(huge), ParseError);
}

TEST(Files, MissingFileIsIoError) {
  try {
    read_tensor("/nonexistent/dir/x.dqt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_EQ(e.code(), ExitCode::kIo);
  }
}

TEST(ReportJson, Schema) {
  Rng rng(113);
  const Hessian h = testing::random_hessian(rng, 20, 4);
  const LayerResult r = quantize_layer(testing::random_tensor(rng, 4, 2), h, QuantConfig{});
  const nlohmann::json j = to_json(r.report);
  ASSERT_TRUE(j.contains("config"));
  ASSERT_EQ(j["per_column"].size(), 2u);
  for (const auto& col : j["per_column"]) {
    EXPECT_TRUE(col.contains("g_init"));
    EXPECT_TRUE(col.contains("g_trajectory"));
    EXPECT_TRUE(col.contains("g_final"));
    EXPECT_TRUE(col.contains("ridge_events"));
  }
  EXPECT_EQ(j["totals"]["g_final"].get<double>(), r.report.total_g_final);
  EXPECT_TRUE(j["timings"].contains("seconds"));
  EXPECT_EQ(j["config"]["approx"], "level1");
}

}  // namespace
}  // namespace dq
