#pragma once

// Symmetric quantizers: per-token INT8 activations, per-channel and
// per-group INT4 weights, nibble packing and the per-group requant scale.
//
// Weight matrices are K x N (input dimension by output channel). INT4 codes
// live in [-8, 7] with scale max|w| / 7; INT8 activation codes in
// [-127, 127] with scale max|x| / 127. All rounding is half-to-even.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qqq/binary16.hpp"
#include "qqq/error.hpp"
#include "qqq/matrix.hpp"

namespace qqq {

inline constexpr int kInt4Min = -8;
inline constexpr int kInt4Max = 7;
inline constexpr double kInt4Divisor = 7.0;
inline constexpr int kInt8Max = 127;
inline constexpr double kInt8Divisor = 127.0;
inline constexpr std::size_t kDefaultGroupSize = 128;

enum class Scheme { PerChannel, PerGroup };

inline std::string_view to_string(Scheme s) noexcept {
  return s == Scheme::PerChannel ? "per-channel" : "per-group";
}

inline Scheme parse_scheme(std::string_view text) {
  if (text == "per-channel") return Scheme::PerChannel;
  if (text == "per-group") return Scheme::PerGroup;
  throw ConfigError("unknown quantization scheme '" + std::string(text) + "'");
}

struct QuantSpec {
  Scheme scheme = Scheme::PerChannel;
  std::size_t group_size = kDefaultGroupSize;  // ignored for per-channel

  static QuantSpec per_channel() { return {Scheme::PerChannel, kDefaultGroupSize}; }
  static QuantSpec per_group(std::size_t g) { return {Scheme::PerGroup, g}; }

  // Throws ConfigError unless the spec can quantize a K-row weight.
  void validate(std::size_t k) const {
    if (group_size == 0) throw ConfigError("group_size must be positive");
    if (scheme == Scheme::PerGroup && k % group_size != 0) {
      throw ConfigError("group_size " + std::to_string(group_size) + " does not divide K = " +
                        std::to_string(k));
    }
  }

  [[nodiscard]] std::size_t groups(std::size_t k) const {
    return scheme == Scheme::PerGroup ? k / group_size : 1;
  }
};

/// Symmetric INT4 code for w under a fixed scale.
inline std::int8_t quantize_int4(double w, double scale) noexcept {
  const double q = std::clamp(round_half_even(w / scale), double(kInt4Min), double(kInt4Max));
  return static_cast<std::int8_t>(q);
}

/// Symmetric INT8 activation code under a fixed scale.
inline std::int8_t quantize_int8(double x, double scale) noexcept {
  const double q = std::clamp(round_half_even(x / scale), -double(kInt8Max), double(kInt8Max));
  return static_cast<std::int8_t>(q);
}

/// max|v| / divisor, or 1 when every entry is zero.
inline double symmetric_scale(double absmax, double divisor) noexcept {
  return absmax > 0.0 ? absmax / divisor : 1.0;
}

// ---------------------------------------------------------------------------
// Activations

struct QuantizedActivations {
  Matrix<std::int8_t> q;      // tokens x K
  std::vector<double> scale;  // per token

  [[nodiscard]] DenseMatrix dequantize() const {
    DenseMatrix out(q.rows(), q.cols());
    for (std::size_t t = 0; t < q.rows(); ++t)
      for (std::size_t k = 0; k < q.cols(); ++k) out(t, k) = double(q(t, k)) * scale[t];
    return out;
  }
};

inline QuantizedActivations quant_act_per_token(const DenseMatrix& x) {
  require_finite(x, "activations");
  QuantizedActivations out{Matrix<std::int8_t>(x.rows(), x.cols()), std::vector<double>(x.rows())};
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double absmax = 0.0;
    for (double v : x.row(t)) absmax = std::max(absmax, std::fabs(v));
    const double s = symmetric_scale(absmax, kInt8Divisor);
    out.scale[t] = s;
    for (std::size_t k = 0; k < x.cols(); ++k) out.q(t, k) = quantize_int8(x(t, k), s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// INT4 packing
//
// Byte (r, n) of the packed tensor holds code (2r, n) in its low nibble and
// (2r + 1, n) in its high nibble, each stored biased as u = q + 8. An odd row
// count pads the final high nibble with 0 and records the true row count.

struct PackedInt4 {
  std::size_t rows = 0;  // true K
  std::size_t cols = 0;
  std::vector<std::uint8_t> bytes;  // ceil(rows / 2) x cols, row-major

  [[nodiscard]] std::size_t packed_rows() const noexcept { return (rows + 1) / 2; }

  /// Biased nibble u in [0, 15] of element (k, n).
  [[nodiscard]] std::uint8_t nibble(std::size_t k, std::size_t n) const noexcept {
    const std::uint8_t b = bytes[(k / 2) * cols + n];
    return (k % 2 == 0) ? (b & 0x0F) : (b >> 4);
  }

  [[nodiscard]] std::int8_t code(std::size_t k, std::size_t n) const noexcept {
    return static_cast<std::int8_t>(int(nibble(k, n)) - 8);
  }

  friend bool operator==(const PackedInt4&, const PackedInt4&) = default;
};

inline PackedInt4 pack_i4(const Matrix<std::int8_t>& q4) {
  PackedInt4 p{q4.rows(), q4.cols(), std::vector<std::uint8_t>(((q4.rows() + 1) / 2) * q4.cols(), 0)};
  for (std::size_t k = 0; k < q4.rows(); ++k) {
    for (std::size_t n = 0; n < q4.cols(); ++n) {
      const int q = q4(k, n);
      if (q < kInt4Min || q > kInt4Max) {
        throw CorruptionError("pack_i4: code " + std::to_string(q) + " outside [-8, 7]");
      }
      const auto u = static_cast<std::uint8_t>(q + 8);
      auto& b = p.bytes[(k / 2) * q4.cols() + n];
      b = (k % 2 == 0) ? static_cast<std::uint8_t>((b & 0xF0) | u)
                       : static_cast<std::uint8_t>((b & 0x0F) | (u << 4));
    }
  }
  return p;
}

/// Validates the byte count and the pad nibble against the recorded row count.
inline void check_packed(const PackedInt4& p) {
  if (p.bytes.size() != p.packed_rows() * p.cols) {
    throw CorruptionError("packed int4: " + std::to_string(p.bytes.size()) + " bytes, expected " +
                          std::to_string(p.packed_rows() * p.cols) + " for " + std::to_string(p.rows) +
                          "x" + std::to_string(p.cols));
  }
  if (p.rows % 2 == 1) {
    const std::size_t last = p.packed_rows() - 1;
    for (std::size_t n = 0; n < p.cols; ++n) {
      if ((p.bytes[last * p.cols + n] & 0xF0) != 0) {
        throw CorruptionError("packed int4: non-zero pad nibble; row count metadata inconsistent");
      }
    }
  }
}

inline Matrix<std::int8_t> unpack_i4(const PackedInt4& p) {
  check_packed(p);
  Matrix<std::int8_t> q(p.rows, p.cols);
  for (std::size_t k = 0; k < p.rows; ++k)
    for (std::size_t n = 0; n < p.cols; ++n) q(k, n) = p.code(k, n);
  return q;
}

// ---------------------------------------------------------------------------
// Weights

struct QuantizedWeights {
  Scheme scheme = Scheme::PerChannel;
  std::size_t group_size = kDefaultGroupSize;
  PackedInt4 q4;                // K x N
  std::vector<double> s_w;      // per-channel: length N
  DenseMatrix s_wg;             // per-group: (K / g) x N
  std::vector<double> s_wc;     // per-group: length N, requant scale

  [[nodiscard]] std::size_t rows() const noexcept { return q4.rows; }
  [[nodiscard]] std::size_t cols() const noexcept { return q4.cols; }
  [[nodiscard]] Matrix<std::int8_t> codes() const { return unpack_i4(q4); }

  [[nodiscard]] double scale(std::size_t k, std::size_t n) const noexcept {
    return scheme == Scheme::PerChannel ? s_w[n] : s_wg(k / group_size, n);
  }

  friend bool operator==(const QuantizedWeights&, const QuantizedWeights&) = default;
};

/// s_wc[n] = max_k |f16(q4[k,n] * s_wg[g(k),n])| / 127, or 1 for a zero column.
inline std::vector<double> requant_scale(const Matrix<std::int8_t>& q4, const DenseMatrix& s_wg,
                                         std::size_t group_size) {
  if (group_size == 0 || s_wg.cols() != q4.cols() || s_wg.rows() * group_size != q4.rows()) {
    throw DimensionError("requant_scale: codes and group scales disagree");
  }
  std::vector<double> s_wc(q4.cols());
  for (std::size_t n = 0; n < q4.cols(); ++n) {
    double absmax = 0.0;
    for (std::size_t k = 0; k < q4.rows(); ++k) {
      const double deq = decode_f16(encode_f16(double(q4(k, n)) * s_wg(k / group_size, n)));
      absmax = std::max(absmax, std::fabs(deq));
    }
    s_wc[n] = symmetric_scale(absmax, kInt8Divisor);
  }
  return s_wc;
}

inline QuantizedWeights quant_weight_per_channel(const DenseMatrix& w) {
  require_finite(w, "weights");
  const std::size_t k_dim = w.rows();
  const std::size_t n_dim = w.cols();
  Matrix<std::int8_t> codes(k_dim, n_dim);
  std::vector<double> s_w(n_dim);
  for (std::size_t n = 0; n < n_dim; ++n) {
    double absmax = 0.0;
    for (std::size_t k = 0; k < k_dim; ++k) absmax = std::max(absmax, std::fabs(w(k, n)));
    s_w[n] = symmetric_scale(absmax, kInt4Divisor);
    for (std::size_t k = 0; k < k_dim; ++k) codes(k, n) = quantize_int4(w(k, n), s_w[n]);
  }
  QuantizedWeights out;
  out.scheme = Scheme::PerChannel;
  out.q4 = pack_i4(codes);
  out.s_w = std::move(s_w);
  return out;
}

inline QuantizedWeights quant_weight_per_group(const DenseMatrix& w, const QuantSpec& spec) {
  require_finite(w, "weights");
  if (spec.group_size == 0 || w.rows() % spec.group_size != 0) {
    throw ConfigError("quant_weight_per_group: group_size " + std::to_string(spec.group_size) +
                      " does not divide K = " + std::to_string(w.rows()));
  }
  const std::size_t g = spec.group_size;
  const std::size_t n_groups = w.rows() / g;
  Matrix<std::int8_t> codes(w.rows(), w.cols());
  DenseMatrix s_wg(n_groups, w.cols());
  for (std::size_t n = 0; n < w.cols(); ++n) {
    for (std::size_t grp = 0; grp < n_groups; ++grp) {
      double absmax = 0.0;
      for (std::size_t k = grp * g; k < (grp + 1) * g; ++k) absmax = std::max(absmax, std::fabs(w(k, n)));
      const double s = symmetric_scale(absmax, kInt4Divisor);
      s_wg(grp, n) = s;
      for (std::size_t k = grp * g; k < (grp + 1) * g; ++k) codes(k, n) = quantize_int4(w(k, n), s);
    }
  }
  QuantizedWeights out;
  out.scheme = Scheme::PerGroup;
  out.group_size = g;
  out.s_wc = requant_scale(codes, s_wg, g);
  out.q4 = pack_i4(codes);
  out.s_wg = std::move(s_wg);
  return out;
}

/// Round-to-nearest weight quantization under the spec's scheme.
inline QuantizedWeights quant_weight(const DenseMatrix& w, const QuantSpec& spec) {
  spec.validate(w.rows());
  return spec.scheme == Scheme::PerChannel ? quant_weight_per_channel(w) : quant_weight_per_group(w, spec);
}

/// Assembles QuantizedWeights from codes and scales produced elsewhere (GPTQ).
inline QuantizedWeights make_quantized_weights(const Matrix<std::int8_t>& codes, const QuantSpec& spec,
                                               std::vector<double> s_w, DenseMatrix s_wg) {
  QuantizedWeights out;
  out.scheme = spec.scheme;
  out.group_size = spec.scheme == Scheme::PerGroup ? spec.group_size : kDefaultGroupSize;
  if (spec.scheme == Scheme::PerChannel) {
    out.s_w = std::move(s_w);
  } else {
    out.s_wc = requant_scale(codes, s_wg, spec.group_size);
    out.s_wg = std::move(s_wg);
  }
  out.q4 = pack_i4(codes);
  return out;
}

/// Wide-precision q4 * scale.
inline DenseMatrix dequantize_ref(const QuantizedWeights& qw) {
  const auto codes = qw.codes();
  DenseMatrix out(codes.rows(), codes.cols());
  for (std::size_t k = 0; k < codes.rows(); ++k)
    for (std::size_t n = 0; n < codes.cols(); ++n) out(k, n) = double(codes(k, n)) * qw.scale(k, n);
  return out;
}

}  // namespace qqq
