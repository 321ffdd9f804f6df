#pragma once

// Software IEEE 754 binary16: encode/decode and single-rounding FMA.
//
// Every rounding in this file goes through one routine that takes an exact
// value `mag * 2^exp2` as a wide integer and rounds it to nearest-even. The
// FMA builds the exact product-sum in 128-bit integers first, so the result
// carries exactly one rounding, as a hardware FMA does.

#include <cmath>
#include <cstdint>
#include <limits>

namespace qqq {

/// A binary16 value held as its raw bit pattern. Equality is bit equality.
struct Binary16 {
  std::uint16_t bits = 0;

  static constexpr Binary16 from_bits(std::uint16_t b) noexcept { return Binary16{b}; }

  [[nodiscard]] constexpr bool sign() const noexcept { return (bits & 0x8000u) != 0; }
  [[nodiscard]] constexpr unsigned exponent_field() const noexcept { return (bits >> 10) & 0x1Fu; }
  [[nodiscard]] constexpr unsigned mantissa_field() const noexcept { return bits & 0x3FFu; }
  [[nodiscard]] constexpr bool is_nan() const noexcept {
    return exponent_field() == 0x1F && mantissa_field() != 0;
  }
  [[nodiscard]] constexpr bool is_inf() const noexcept {
    return exponent_field() == 0x1F && mantissa_field() == 0;
  }
  [[nodiscard]] constexpr bool is_finite() const noexcept { return exponent_field() != 0x1F; }

  friend constexpr bool operator==(Binary16, Binary16) noexcept = default;
};

inline constexpr std::uint16_t kBinary16CanonicalNaN = 0x7E00;
inline constexpr std::uint16_t kBinary16PosInf = 0x7C00;
inline constexpr double kBinary16Max = 65504.0;

/// Round to the nearest integer, ties to even, independent of the FP environment.
inline double round_half_even(double x) noexcept {
  if (!std::isfinite(x) || std::fabs(x) >= 4503599627370496.0) return x;  // 2^52: already integral
  const double f = std::floor(x);
  const double d = x - f;  // exact
  if (d > 0.5) return f + 1.0;
  if (d < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

namespace detail {

__extension__ typedef unsigned __int128 u128;
__extension__ typedef __int128 i128;

inline int bit_length(u128 v) noexcept {
  const auto hi = static_cast<std::uint64_t>(v >> 64);
  const auto lo = static_cast<std::uint64_t>(v);
  if (hi != 0) return 128 - __builtin_clzll(hi);
  if (lo != 0) return 64 - __builtin_clzll(lo);
  return 0;
}

// Rounds (-1)^neg * mag * 2^exp2 to binary16, nearest-even, overflow to inf.
// mag must fit in 120 bits.
inline std::uint16_t round_to_binary16(bool neg, u128 mag, int exp2) noexcept {
  const std::uint16_t sign = neg ? 0x8000u : 0u;
  if (mag == 0) return sign;

  const int len = bit_length(mag);
  const int top = len - 1 + exp2;  // floor(log2(value))
  if (top > 15) return sign | kBinary16PosInf;

  // Exponent of one unit in the last place of the target.
  int quantum = top < -14 ? -24 : top - 10;
  const int shift = quantum - exp2;

  u128 m;
  if (shift <= 0) {
    m = mag << (-shift);
  } else if (shift > len) {
    return sign;  // below half the smallest subnormal
  } else {
    m = mag >> shift;
    const u128 rem = mag & ((u128{1} << shift) - 1);
    const u128 half = u128{1} << (shift - 1);
    if (rem > half || (rem == half && (m & 1) != 0)) ++m;
  }

  if (top < -14) {
    // Subnormal range; m == 1024 is the carry into the smallest normal.
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(m));
  }
  if (m == 2048) {
    m = 1024;
    ++quantum;
  }
  const int field = quantum + 25;
  if (field >= 31) return sign | kBinary16PosInf;
  return static_cast<std::uint16_t>(sign | (field << 10) | static_cast<unsigned>(m - 1024));
}

// Exact decomposition of a finite binary16: value = (-1)^neg * mant * 2^exp2.
struct Unpacked16 {
  bool neg;
  std::uint32_t mant;
  int exp2;
};

inline Unpacked16 unpack(Binary16 v) noexcept {
  const unsigned field = v.exponent_field();
  const unsigned frac = v.mantissa_field();
  if (field == 0) return {v.sign(), frac, -24};
  return {v.sign(), 1024u + frac, static_cast<int>(field) - 25};
}

}  // namespace detail

/// Encode a wide real as binary16, round-to-nearest-even. NaN encodes as 0x7E00.
inline Binary16 encode_f16(double x) noexcept {
  if (std::isnan(x)) return Binary16::from_bits(kBinary16CanonicalNaN);
  const bool neg = std::signbit(x);
  if (std::isinf(x)) return Binary16::from_bits(static_cast<std::uint16_t>((neg ? 0x8000u : 0u) | kBinary16PosInf));
  if (x == 0.0) return Binary16::from_bits(neg ? 0x8000u : 0u);

  int e = 0;
  const double frac = std::frexp(std::fabs(x), &e);  // [0.5, 1)
  const auto mant = static_cast<std::uint64_t>(std::ldexp(frac, 53));
  return Binary16::from_bits(detail::round_to_binary16(neg, mant, e - 53));
}

/// Exact real value of a binary16 pattern.
inline double decode_f16(Binary16 v) noexcept {
  if (v.is_nan()) return std::numeric_limits<double>::quiet_NaN();
  if (v.is_inf()) return v.sign() ? -std::numeric_limits<double>::infinity()
                                  : std::numeric_limits<double>::infinity();
  const auto u = detail::unpack(v);
  const double mag = std::ldexp(static_cast<double>(u.mant), u.exp2);
  return u.neg ? -mag : mag;
}

/// a*b + c with a single rounding of the exact result.
inline Binary16 fma_f16(Binary16 a, Binary16 b, Binary16 c) noexcept {
  if (!a.is_finite() || !b.is_finite() || !c.is_finite()) {
    return encode_f16(std::fma(decode_f16(a), decode_f16(b), decode_f16(c)));
  }
  using detail::i128;
  using detail::u128;

  const auto ua = detail::unpack(a);
  const auto ub = detail::unpack(b);
  const auto uc = detail::unpack(c);

  const bool pneg = ua.neg != ub.neg;
  const u128 pmag = static_cast<u128>(ua.mant) * ub.mant;
  const int pexp = ua.exp2 + ub.exp2;

  const int base = pexp < uc.exp2 ? pexp : uc.exp2;
  const i128 p = static_cast<i128>(pmag << (pexp - base));
  const i128 cc = static_cast<i128>(static_cast<u128>(uc.mant) << (uc.exp2 - base));
  const i128 sum = (pneg ? -p : p) + (uc.neg ? -cc : cc);

  if (sum == 0) {
    // Exact zero: -0 only when both addends are negative zeros (or signed-equal zeros).
    const bool both_zero = pmag == 0 && uc.mant == 0;
    return Binary16::from_bits(both_zero && pneg && uc.neg ? 0x8000u : 0u);
  }
  const bool neg = sum < 0;
  const u128 mag = static_cast<u128>(neg ? -sum : sum);
  return Binary16::from_bits(detail::round_to_binary16(neg, mag, base));
}

inline Binary16 add_f16(Binary16 a, Binary16 b) noexcept {
  return fma_f16(a, Binary16::from_bits(0x3C00), b);
}

inline Binary16 sub_f16(Binary16 a, Binary16 b) noexcept {
  return fma_f16(a, Binary16::from_bits(0x3C00), Binary16::from_bits(b.bits ^ 0x8000u));
}

inline Binary16 mul_f16(Binary16 a, Binary16 b) noexcept {
  return fma_f16(a, b, Binary16::from_bits(0x8000));  // -0 addend preserves the product's zero sign
}

/// Clamp in binary16 ordering (NaN passes through unchanged).
inline Binary16 clamp_f16(Binary16 x, Binary16 lo, Binary16 hi) noexcept {
  const double v = decode_f16(x);
  if (v < decode_f16(lo)) return lo;
  if (v > decode_f16(hi)) return hi;
  return x;
}

}  // namespace qqq
