#pragma once

// Bit-exact CPU reference of the two W4A8 GEMM dataflows.
//
// Per-channel: INT4 codes are shifted into the top nibble of an INT8 (x16),
// the INT8 x INT8 -> INT32 GEMM runs, and the epilogue multiplies by
// s_A * (s_W / 16), the /16 having been folded into the weight scale offline.
//
// Per-group: biased nibbles become binary16 through the 0x6400 exponent
// trick, a single FMA applies the fused scale s* = s_Wg / s_Wc and adds the
// magic 1152 = 1024 + 128, the low byte of the result XOR 0x80 is the INT8
// weight, and the INT32 accumulator is dequantized with s_A * s_Wc.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "qqq/binary16.hpp"
#include "qqq/error.hpp"
#include "qqq/matrix.hpp"
#include "qqq/quantizer.hpp"

namespace qqq {

inline constexpr std::size_t kMaxGemmInner = std::size_t{1} << 16;

namespace f16 {
inline constexpr Binary16 kOne = Binary16::from_bits(0x3C00);
inline constexpr Binary16 kExponentBase = Binary16::from_bits(0x6400);  // 1024.0
inline constexpr Binary16 kNibbleBias = Binary16::from_bits(0x6408);    // 1032.0 = 1024 + 8
inline constexpr Binary16 kMagic = Binary16::from_bits(0x6480);         // 1152.0 = 1024 + 128
inline constexpr Binary16 kMagicLo = Binary16::from_bits(0x6401);       // 1025.0 -> -127
inline constexpr Binary16 kMagicHi = Binary16::from_bits(0x64FF);       // 1279.0 -> +127
}  // namespace f16

/// q * 16 by placing the code in the upper nibble.
inline std::int8_t fast_i4_to_i8(int q) {
  if (q < kInt4Min || q > kInt4Max) throw CorruptionError("fast_i4_to_i8: code " + std::to_string(q) + " outside [-8, 7]");
  const auto byte = static_cast<std::uint8_t>((static_cast<unsigned>(q) & 0x0Fu) << 4);
  return static_cast<std::int8_t>(byte);
}

/// Biased nibble u (q = u - 8) to binary16: bits 0x6400 | u are 1024 + u.
inline Binary16 fast_i4_to_f16(std::uint8_t u) noexcept {
  const Binary16 shifted = Binary16::from_bits(static_cast<std::uint16_t>(f16::kExponentBase.bits | (u & 0x0Fu)));
  return sub_f16(shifted, f16::kNibbleBias);
}

/// Low byte of a value in [1024, 1280) XOR 0x80, as two's complement.
inline std::int8_t extract_magic_i8(Binary16 r) noexcept {
  const auto byte = static_cast<std::uint8_t>((r.bits & 0xFFu) ^ 0x80u);
  return static_cast<std::int8_t>(byte);
}

/// round_half_even(x) for x in [-128, 127.5). No saturation here.
inline std::int8_t fast_f16_to_i8(Binary16 x) noexcept {
  return extract_magic_i8(fma_f16(x, f16::kOne, f16::kMagic));
}

/// clamp(round_half_even(q * s_star), -127, 127) via one FMA and a byte extract.
inline std::int8_t fused_dequant_quant(std::uint8_t u, Binary16 s_star) {
  if (!s_star.is_finite()) throw ScaleError("fused_dequant_quant: fused scale is not finite");
  const Binary16 w16 = fast_i4_to_f16(u);
  const Binary16 r = clamp_f16(fma_f16(w16, s_star, f16::kMagic), f16::kMagicLo, f16::kMagicHi);
  return extract_magic_i8(r);
}

struct FusedScales {
  Scheme scheme = Scheme::PerChannel;
  std::size_t group_size = kDefaultGroupSize;
  std::vector<double> s_w_folded;  // per-channel: s_W / 16
  Matrix<Binary16> s_star;         // per-group: f16(s_Wg / s_Wc), (K / g) x N
  std::vector<double> s_wc;        // per-group
};

/// Offline scale preparation for either dataflow.
inline FusedScales fuse_scales(const QuantizedWeights& qw) {
  FusedScales f;
  f.scheme = qw.scheme;
  f.group_size = qw.group_size;
  if (qw.scheme == Scheme::PerChannel) {
    f.s_w_folded.resize(qw.s_w.size());
    for (std::size_t n = 0; n < qw.s_w.size(); ++n) f.s_w_folded[n] = qw.s_w[n] / 16.0;
    return f;
  }
  f.s_wc = qw.s_wc;
  f.s_star = Matrix<Binary16>(qw.s_wg.rows(), qw.s_wg.cols());
  for (std::size_t g = 0; g < qw.s_wg.rows(); ++g) {
    for (std::size_t n = 0; n < qw.s_wg.cols(); ++n) {
      const Binary16 s = encode_f16(qw.s_wg(g, n) / qw.s_wc[n]);
      if (!s.is_finite() || !(decode_f16(s) > 0.0)) {
        throw ScaleError("fuse_scales: s_Wg / s_Wc at group " + std::to_string(g) + ", column " + std::to_string(n) +
                         " is not a positive finite binary16");
      }
      f.s_star(g, n) = s;
    }
  }
  return f;
}

/// Real-valued weights the integer GEMM actually multiplies by: q * s_W per
/// channel, or the requantized W8 * s_Wc per group.
inline DenseMatrix effective_weights(const QuantizedWeights& qw) {
  DenseMatrix out(qw.rows(), qw.cols());
  if (qw.scheme == Scheme::PerChannel) {
    for (std::size_t k = 0; k < qw.rows(); ++k)
      for (std::size_t n = 0; n < qw.cols(); ++n) out(k, n) = double(qw.q4.code(k, n)) * qw.s_w[n];
    return out;
  }
  const FusedScales f = fuse_scales(qw);
  for (std::size_t k = 0; k < qw.rows(); ++k)
    for (std::size_t n = 0; n < qw.cols(); ++n)
      out(k, n) = double(fused_dequant_quant(qw.q4.nibble(k, n), f.s_star(k / qw.group_size, n))) * qw.s_wc[n];
  return out;
}

/// Exact INT8 x INT8 -> INT32 product.
inline Matrix<std::int32_t> gemm_i8_i32(const Matrix<std::int8_t>& a, const Matrix<std::int8_t>& w) {
  if (a.cols() != w.rows()) throw DimensionError("gemm_i8_i32: inner dimensions differ");
  if (a.cols() > kMaxGemmInner) {
    throw OverflowRiskError("gemm_i8_i32: K = " + std::to_string(a.cols()) + " exceeds 65536; INT32 may overflow");
  }
  Matrix<std::int32_t> c(a.rows(), w.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const std::int32_t aik = a(i, k);
      if (aik == 0) continue;
      const auto wrow = w.row(k);
      for (std::size_t j = 0; j < w.cols(); ++j) out[j] += aik * std::int32_t(wrow[j]);
    }
  }
  return c;
}

struct GemmOutput {
  Matrix<Binary16> y;           // tokens x N
  Matrix<std::int32_t> acc;     // retained for white-box checks

  [[nodiscard]] DenseMatrix decoded() const {
    DenseMatrix out(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = decode_f16(y(i, j));
    return out;
  }
};

namespace detail {

inline Matrix<Binary16> dequant_epilogue(const Matrix<std::int32_t>& acc, const std::vector<double>& s_a,
                                         const std::vector<double>& s_col) {
  Matrix<Binary16> y(acc.rows(), acc.cols());
  for (std::size_t t = 0; t < acc.rows(); ++t) {
    for (std::size_t n = 0; n < acc.cols(); ++n) {
      const Binary16 v = encode_f16((double(acc(t, n)) * s_a[t]) * s_col[n]);
      if (!v.is_finite()) throw ScaleError("dequant epilogue overflows binary16");
      y(t, n) = v;
    }
  }
  return y;
}

inline void check_activations(const QuantizedActivations& a, const PackedInt4& q4) {
  if (a.q.cols() != q4.rows) throw DimensionError("w4a8 gemm: activation K differs from weight K");
  if (a.scale.size() != a.q.rows()) throw DimensionError("w4a8 gemm: one activation scale per token required");
}

}  // namespace detail

inline GemmOutput w4a8_gemm_per_channel(const QuantizedActivations& a, const PackedInt4& q4, const FusedScales& f) {
  if (f.scheme != Scheme::PerChannel) throw ConfigError("w4a8_gemm_per_channel: scales are per-group");
  detail::check_activations(a, q4);
  if (f.s_w_folded.size() != q4.cols) throw DimensionError("w4a8_gemm_per_channel: one scale per column required");
  check_packed(q4);

  Matrix<std::int8_t> w8(q4.rows, q4.cols);
  for (std::size_t k = 0; k < q4.rows; ++k)
    for (std::size_t n = 0; n < q4.cols; ++n) w8(k, n) = fast_i4_to_i8(q4.code(k, n));

  GemmOutput out;
  out.acc = gemm_i8_i32(a.q, w8);
  out.y = detail::dequant_epilogue(out.acc, a.scale, f.s_w_folded);
  return out;
}

inline GemmOutput w4a8_gemm_per_group(const QuantizedActivations& a, const PackedInt4& q4, const FusedScales& f) {
  if (f.scheme != Scheme::PerGroup) throw ConfigError("w4a8_gemm_per_group: scales are per-channel");
  detail::check_activations(a, q4);
  if (f.group_size == 0 || f.s_star.rows() * f.group_size != q4.rows || f.s_star.cols() != q4.cols ||
      f.s_wc.size() != q4.cols) {
    throw ConfigError("w4a8_gemm_per_group: group structure does not match the weight shape");
  }
  check_packed(q4);

  Matrix<std::int8_t> w8(q4.rows, q4.cols);
  for (std::size_t k = 0; k < q4.rows; ++k)
    for (std::size_t n = 0; n < q4.cols; ++n) w8(k, n) = fused_dequant_quant(q4.nibble(k, n), f.s_star(k / f.group_size, n));

  GemmOutput out;
  out.acc = gemm_i8_i32(a.q, w8);
  out.y = detail::dequant_epilogue(out.acc, a.scale, f.s_wc);
  return out;
}

/// Dispatch on the scale scheme.
inline GemmOutput w4a8_gemm(const QuantizedActivations& a, const PackedInt4& q4, const FusedScales& f) {
  return f.scheme == Scheme::PerChannel ? w4a8_gemm_per_channel(a, q4, f) : w4a8_gemm_per_group(a, q4, f);
}

}  // namespace qqq
