#pragma once

// Exhaustive self checks of the integer and binary16 conversion paths and
// of the storage round trips. Each suite compares the fast path against a
// plain arithmetic reference over its whole input domain.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "qqq/binary16.hpp"
#include "qqq/checkpoint.hpp"
#include "qqq/gemm.hpp"
#include "qqq/quantizer.hpp"

namespace qqq {

struct SelftestSuite {
  std::string name;
  std::size_t checked = 0;
  std::vector<std::string> failures;  // first few only
  std::size_t failure_count = 0;
  double seconds = 0.0;

  [[nodiscard]] bool ok() const noexcept { return failure_count == 0; }
};

struct SelftestReport {
  std::vector<SelftestSuite> suites;

  [[nodiscard]] bool ok() const noexcept {
    return std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.ok(); });
  }
  [[nodiscard]] double seconds() const noexcept {
    double t = 0.0;
    for (const auto& s : suites) t += s.seconds;
    return t;
  }
};

namespace detail {

class SuiteRecorder {
 public:
  explicit SuiteRecorder(SelftestSuite& s) : s_(s) {}

  template <class... Args>
  void check(bool pass, const Args&... context) {
    ++s_.checked;
    if (pass) return;
    if (++s_.failure_count <= 8) {
      std::ostringstream os;
      (os << ... << context);
      s_.failures.push_back(os.str());
    }
  }

 private:
  SelftestSuite& s_;
};

// Nearest integer, ties to even, using the current (default) FP rounding mode.
inline double nearest_even(double v) { return std::nearbyint(v); }

inline void suite_binary16_roundtrip(SuiteRecorder& r) {
  for (std::uint32_t b = 0; b <= 0xFFFF; ++b) {
    const auto x = Binary16::from_bits(static_cast<std::uint16_t>(b));
    const double v = decode_f16(x);
    const std::uint16_t want = std::isnan(v) ? kBinary16CanonicalNaN : x.bits;
    r.check(encode_f16(v).bits == want, "bits 0x", std::hex, b);
  }
}

inline void suite_i4_to_i8(SuiteRecorder& r) {
  for (int q = kInt4Min; q <= kInt4Max; ++q) r.check(int(fast_i4_to_i8(q)) == 16 * q, "q ", q);
}

inline void suite_i4_to_f16(SuiteRecorder& r) {
  for (unsigned u = 0; u < 16; ++u) {
    r.check(decode_f16(fast_i4_to_f16(std::uint8_t(u))) == double(u) - 8.0, "u ", u);
  }
}

inline void suite_f16_to_i8(SuiteRecorder& r) {
  for (std::uint32_t b = 0; b <= 0xFFFF; ++b) {
    const auto x = Binary16::from_bits(static_cast<std::uint16_t>(b));
    const double v = decode_f16(x);
    if (!(v >= -128.0 && v < 127.5)) continue;
    r.check(double(fast_f16_to_i8(x)) == nearest_even(v), "bits 0x", std::hex, b);
  }
}

inline void suite_fused_dequant_quant(SuiteRecorder& r) {
  for (std::uint32_t sb = 1; sb < kBinary16PosInf; ++sb) {
    const auto s = Binary16::from_bits(static_cast<std::uint16_t>(sb));
    for (unsigned u = 0; u < 16; ++u) {
      const double want = std::clamp(nearest_even((double(u) - 8.0) * decode_f16(s)), -127.0, 127.0);
      r.check(double(fused_dequant_quant(std::uint8_t(u), s)) == want, "s 0x", std::hex, sb, " u ", u);
    }
  }
}

inline void suite_pack_i4(SuiteRecorder& r) {
  for (int lo = kInt4Min; lo <= kInt4Max; ++lo) {
    for (int hi = kInt4Min; hi <= kInt4Max; ++hi) {
      Matrix<std::int8_t> q(2, 1, std::vector<std::int8_t>{std::int8_t(lo), std::int8_t(hi)});
      const auto p = pack_i4(q);
      const bool layout = p.bytes.size() == 1 && p.bytes[0] == std::uint8_t((lo + 8) | ((hi + 8) << 4));
      r.check(layout && unpack_i4(p) == q, "codes ", lo, " ", hi);
    }
  }
  Matrix<std::int8_t> odd(3, 1, std::vector<std::int8_t>{-8, 7, -1});
  const auto p = pack_i4(odd);
  r.check(p.bytes.size() == 2 && (p.bytes[1] >> 4) == 0 && unpack_i4(p) == odd, "odd K padding");
}

inline void suite_checkpoint(SuiteRecorder& r) {
  Checkpoint ck;
  ck.metadata = {{"selftest", true}};
  ck.add_f32("f32", DenseMatrix(2, 2, {1.0, -0.5, 65504.0, 1e-30}));
  Matrix<Binary16> h(1, 4);
  for (std::size_t i = 0; i < 4; ++i) h(0, i) = Binary16::from_bits(std::uint16_t(0x3C00 + 0x1111 * i));
  ck.add_f16("f16", h);
  ck.add_i8("i8", Matrix<std::int8_t>(1, 3, std::vector<std::int8_t>{-128, 0, 127}));
  ck.add_i4p("i4p", pack_i4(Matrix<std::int8_t>(3, 2, std::vector<std::int8_t>{-8, 7, 0, 1, -1, 3})));
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  r.check(back == ck, "decoded checkpoint differs");
  r.check(encode_checkpoint(back) == bytes, "re-encoded checkpoint differs");
}

}  // namespace detail

inline SelftestReport run_selftest() {
  using Fn = std::function<void(detail::SuiteRecorder&)>;
  const std::vector<std::pair<std::string, Fn>> suites = {
      {"binary16-roundtrip", detail::suite_binary16_roundtrip},
      {"int4-to-int8", detail::suite_i4_to_i8},
      {"int4-to-f16", detail::suite_i4_to_f16},
      {"f16-to-int8", detail::suite_f16_to_i8},
      {"fused-dequant-quant", detail::suite_fused_dequant_quant},
      {"int4-packing", detail::suite_pack_i4},
      {"checkpoint-roundtrip", detail::suite_checkpoint},
  };
  SelftestReport report;
  for (const auto& [name, fn] : suites) {
    SelftestSuite s;
    s.name = name;
    detail::SuiteRecorder rec(s);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(rec);
    } catch (const std::exception& e) {
      rec.check(false, "exception: ", e.what());
    }
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.suites.push_back(std::move(s));
  }
  return report;
}

}  // namespace qqq
