#pragma once

// Bit packing of integer grid codes. A code is c = w - alpha and occupies
// `bits` consecutive bits of an LSB-first bit stream: element i lives in
// stream bits [i*bits, (i+1)*bits). For 2 bits this puts four codes in a byte
// with the first element in bits 0-1; for 3 bits codes straddle byte
// boundaries. The final byte is padded with zero bits.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dq/error.hpp"

namespace dq {

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

inline void check_bits(int bits) {
  if (bits < 1 || bits > 8) {
    throw ValidationError("unsupported code width " + std::to_string(bits));
  }
}

inline std::vector<std::uint8_t> pack_codes(std::span<const int> w, int bits,
                                            int alpha) {
  check_bits(bits);
  const int max_code = (1 << bits) - 1;
  std::vector<std::uint8_t> out(packed_size(w.size(), bits), 0);
  std::size_t bit_pos = 0;
  for (std::size_t i = 0; i < w.size(); ++i, bit_pos += bits) {
    const int code = w[i] - alpha;
    if (code < 0 || code > max_code) {
      throw ValidationError("integer value " + std::to_string(w[i]) +
                            " at index " + std::to_string(i) +
                            " is outside [" + std::to_string(alpha) + ", " +
                            std::to_string(alpha + max_code) + "]");
    }
    // A code spans at most two bytes for bits <= 8.
    const unsigned shifted = static_cast<unsigned>(code) << (bit_pos % 8);
    out[bit_pos / 8] |= static_cast<std::uint8_t>(shifted & 0xFFu);
    if ((bit_pos % 8) + bits > 8) {
      out[bit_pos / 8 + 1] |= static_cast<std::uint8_t>(shifted >> 8);
    }
  }
  return out;
}

inline std::vector<int> unpack_codes(std::span<const std::uint8_t> bytes,
                                     std::size_t count, int bits, int alpha) {
  check_bits(bits);
  const std::size_t expected = packed_size(count, bits);
  if (bytes.size() != expected) {
    throw ParseError("packed codes: expected " + std::to_string(expected) +
                         " bytes for " + std::to_string(count) + " " +
                         std::to_string(bits) + "-bit codes, got " +
                         std::to_string(bytes.size()),
                     std::min(bytes.size(), expected));
  }
  const unsigned mask = (1u << bits) - 1u;
  std::vector<int> w(count);
  std::size_t bit_pos = 0;
  for (std::size_t i = 0; i < count; ++i, bit_pos += bits) {
    unsigned word = bytes[bit_pos / 8];
    if ((bit_pos % 8) + bits > 8) word |= unsigned{bytes[bit_pos / 8 + 1]} << 8;
    w[i] = static_cast<int>((word >> (bit_pos % 8)) & mask) + alpha;
  }
  return w;
}

}  // namespace dq
