#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "qqq/quantizer.hpp"
#include "test_util.hpp"

namespace qqq {
namespace {

// Brute-force quantizer used as the oracle: straight transcription of the
// formulas in wide precision with nearbyint for the tie rule.
std::vector<int> oracle_codes(const std::vector<double>& col, double divisor, int lo, int hi, double* scale) {
  double m = 0.0;
  for (double v : col) m = std::max(m, std::fabs(v));
  *scale = m > 0.0 ? m / divisor : 1.0;
  std::vector<int> q;
  for (double v : col) q.push_back(int(std::clamp(std::nearbyint(v / *scale), double(lo), double(hi))));
  return q;
}

TEST(QuantActPerToken, TieRoundsToEven) {
  const DenseMatrix x(1, 3, {0.0, 63.5, -127.0});
  const auto qa = quant_act_per_token(x);
  EXPECT_EQ(qa.scale[0], 1.0);
  EXPECT_EQ(qa.q(0, 0), 0);
  EXPECT_EQ(qa.q(0, 1), 64);
  EXPECT_EQ(qa.q(0, 2), -127);
}

TEST(QuantActPerToken, ZeroRowConvention) {
  const auto qa = quant_act_per_token(DenseMatrix(2, 3, 0.0));
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(qa.scale[t], 1.0);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(qa.q(t, k), 0);
  }
}

TEST(QuantActPerToken, ScaleInvariance) {
  testing::Rng rng(5);
  const auto base = testing::gaussian_matrix(rng, 1, 64);
  const auto ref = quant_act_per_token(base);
  for (double c : {0.001, 0.5, 3.7, 16.0, 1e4}) {
    DenseMatrix x = base;
    for (double& v : x.data()) v *= c;
    EXPECT_EQ(quant_act_per_token(x).q, ref.q) << c;
  }
}

TEST(QuantActPerToken, MatchesOracleAndRange) {
  testing::Rng rng(6);
  const auto x = testing::gaussian_matrix(rng, 32, 48, 3.0);
  const auto qa = quant_act_per_token(x);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double s = 0.0;
    const auto want = oracle_codes({x.row(t).begin(), x.row(t).end()}, 127.0, -127, 127, &s);
    EXPECT_EQ(qa.scale[t], s);
    EXPECT_GT(qa.scale[t], 0.0);
    for (std::size_t k = 0; k < x.cols(); ++k) {
      EXPECT_EQ(qa.q(t, k), want[k]);
      EXPECT_LE(std::abs(int(qa.q(t, k))), 127);
    }
  }
}

TEST(QuantActPerToken, RejectsNonFinite) {
  DenseMatrix x(1, 2, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_THROW(quant_act_per_token(x), DataError);
}

TEST(QuantWeightPerChannel, Example) {
  const DenseMatrix w(3, 1, {1.4, -0.7, 0.35});
  const auto qw = quant_weight_per_channel(w);
  EXPECT_DOUBLE_EQ(qw.s_w[0], 0.2);
  const auto c = qw.codes();
  EXPECT_EQ(c(0, 0), 7);
  EXPECT_EQ(c(1, 0), -4);  // -3.5 ties to even
  EXPECT_EQ(c(2, 0), 2);   // 1.75
  EXPECT_TRUE(qw.s_wg.empty());
  EXPECT_TRUE(qw.s_wc.empty());
}

TEST(QuantWeightPerChannel, ZeroColumn) {
  const auto qw = quant_weight_per_channel(DenseMatrix(4, 2, 0.0));
  EXPECT_EQ(qw.s_w, (std::vector<double>{1.0, 1.0}));
  const auto codes = qw.codes();
  for (auto q : codes.data()) EXPECT_EQ(q, 0);
}

TEST(QuantWeightPerChannel, RoundingBoundAndOracle) {
  testing::Rng rng(8);
  const auto w = testing::gaussian_matrix(rng, 64, 16);
  const auto qw = quant_weight_per_channel(w);
  const auto deq = dequantize_ref(qw);
  const auto codes = qw.codes();
  for (std::size_t n = 0; n < w.cols(); ++n) {
    std::vector<double> col;
    for (std::size_t k = 0; k < w.rows(); ++k) col.push_back(w(k, n));
    double s = 0.0;
    const auto want = oracle_codes(col, 7.0, -8, 7, &s);
    EXPECT_EQ(qw.s_w[n], s);
    for (std::size_t k = 0; k < w.rows(); ++k) {
      EXPECT_EQ(codes(k, n), want[k]);
      EXPECT_LE(std::fabs(deq(k, n) - w(k, n)), qw.s_w[n] / 2 * (1 + 1e-12));
    }
  }
}

TEST(QuantWeightPerChannel, RejectsNonFinite) {
  DenseMatrix w(2, 1, {1.0, std::nan("")});
  EXPECT_THROW(quant_weight_per_channel(w), DataError);
}

TEST(QuantWeightPerGroup, Example) {
  const DenseMatrix w(4, 1, {1.4, -0.7, 0.2, 0.1});
  const auto qw = quant_weight_per_group(w, QuantSpec::per_group(2));
  ASSERT_EQ(qw.s_wg.rows(), 2u);
  EXPECT_DOUBLE_EQ(qw.s_wg(0, 0), 0.2);
  EXPECT_DOUBLE_EQ(qw.s_wg(1, 0), 0.2 / 7);
  const auto c = qw.codes();
  EXPECT_EQ(c(0, 0), 7);
  EXPECT_EQ(c(1, 0), -4);
  EXPECT_EQ(c(2, 0), 7);
  EXPECT_EQ(c(3, 0), 4);  // 3.5 ties to even
  ASSERT_EQ(qw.s_wc.size(), 1u);
  EXPECT_TRUE(qw.s_w.empty());
}

TEST(QuantWeightPerGroup, SingleGroupIsPerChannel) {
  testing::Rng rng(9);
  const auto w = testing::gaussian_matrix(rng, 32, 8);
  const auto pc = quant_weight_per_channel(w);
  const auto pg = quant_weight_per_group(w, QuantSpec::per_group(32));
  EXPECT_EQ(pg.q4, pc.q4);
  for (std::size_t n = 0; n < 8; ++n) EXPECT_EQ(pg.s_wg(0, n), pc.s_w[n]);
  EXPECT_EQ(pg.s_wc.size(), 8u);
  EXPECT_EQ(dequantize_ref(pg), dequantize_ref(pc));
}

TEST(QuantWeightPerGroup, ConstantColumn) {
  const auto qw = quant_weight_per_group(DenseMatrix(8, 1, 0.3), QuantSpec::per_group(4));
  EXPECT_EQ(qw.s_wg(0, 0), qw.s_wg(1, 0));
  const auto codes = qw.codes();
  for (auto q : codes.data()) EXPECT_EQ(q, 7);
}

TEST(QuantWeightPerGroup, GroupMustDivideK) {
  EXPECT_THROW(quant_weight_per_group(DenseMatrix(6, 1, 1.0), QuantSpec::per_group(4)), ConfigError);
  EXPECT_THROW(quant_weight(DenseMatrix(6, 1, 1.0), QuantSpec::per_group(0)), ConfigError);
}

TEST(RequantScale, Examples) {
  const Matrix<std::int8_t> q(2, 2, std::vector<std::int8_t>{3, 0, -2, 0});
  const DenseMatrix s_wg(1, 2, {0.5, 0.25});
  const auto s_wc = requant_scale(q, s_wg, 2);
  EXPECT_EQ(s_wc[0], 1.5 / 127);
  EXPECT_EQ(s_wc[1], 1.0);
}

TEST(RequantScale, UsesBinary16RoundedProducts) {
  // 7 * 0.1 = 0.7 is not a binary16 value; the max must be taken after rounding.
  const Matrix<std::int8_t> q(1, 1, std::vector<std::int8_t>{7});
  const DenseMatrix s_wg(1, 1, {0.1});
  EXPECT_EQ(requant_scale(q, s_wg, 1)[0], decode_f16(encode_f16(0.7)) / 127);
  EXPECT_NE(decode_f16(encode_f16(0.7)), 0.7);
}

TEST(RequantScale, RequantizedCodesFitInt8) {
  testing::Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = testing::gaussian_matrix(rng, 64, 16, std::exp2(trial % 7 - 3));
    const auto qw = quant_weight_per_group(w, QuantSpec::per_group(16));
    const auto codes = qw.codes();
    for (std::size_t n = 0; n < w.cols(); ++n) {
      EXPECT_GT(qw.s_wc[n], 0.0);
      for (std::size_t k = 0; k < w.rows(); ++k) {
        const double deq = decode_f16(encode_f16(double(codes(k, n)) * qw.s_wg(k / 16, n)));
        EXPECT_LE(std::fabs(round_half_even(deq / qw.s_wc[n])), 127.0);
      }
    }
  }
}

TEST(PackI4, NibbleLayout) {
  const Matrix<std::int8_t> a(2, 1, std::vector<std::int8_t>{-8, 7});
  EXPECT_EQ(pack_i4(a).bytes, (std::vector<std::uint8_t>{0xF0}));
  const Matrix<std::int8_t> b(2, 1, std::vector<std::int8_t>{0, 0});
  EXPECT_EQ(pack_i4(b).bytes, (std::vector<std::uint8_t>{0x88}));
  // Two columns: byte (r, n) is row-major over packed rows.
  const Matrix<std::int8_t> c(2, 2, std::vector<std::int8_t>{1, -1, 2, -2});
  EXPECT_EQ(pack_i4(c).bytes, (std::vector<std::uint8_t>{0xA9, 0x67}));
}

TEST(PackI4, RoundTripIsBijective) {
  testing::Rng rng(12);
  std::uniform_int_distribution<int> code(-8, 7);
  for (std::size_t k : {1u, 2u, 7u, 64u}) {
    Matrix<std::int8_t> q(k, 5);
    for (auto& v : q.data()) v = static_cast<std::int8_t>(code(rng));
    const auto p = pack_i4(q);
    EXPECT_EQ(p.rows, k);
    EXPECT_EQ(p.bytes.size(), ((k + 1) / 2) * 5);
    EXPECT_EQ(unpack_i4(p), q);
    // Distinct tensors pack to distinct bytes.
    Matrix<std::int8_t> q2 = q;
    q2(k - 1, 4) = static_cast<std::int8_t>(q2(k - 1, 4) == 7 ? -8 : q2(k - 1, 4) + 1);
    EXPECT_NE(pack_i4(q2).bytes, p.bytes);
  }
}

TEST(PackI4, OddRowsPadWithZeroNibble) {
  const Matrix<std::int8_t> q(3, 1, std::vector<std::int8_t>{1, 2, 3});
  const auto p = pack_i4(q);
  ASSERT_EQ(p.bytes.size(), 2u);
  EXPECT_EQ(p.bytes[1], 0x0B);
}

TEST(PackI4, CorruptionIsDetected) {
  const Matrix<std::int8_t> q(3, 1, std::vector<std::int8_t>{1, 2, 3});
  auto p = pack_i4(q);
  p.bytes[1] |= 0x10;  // pad nibble disagrees with the recorded row count
  EXPECT_THROW(unpack_i4(p), CorruptionError);
  auto short_p = pack_i4(q);
  short_p.bytes.pop_back();
  EXPECT_THROW(unpack_i4(short_p), CorruptionError);
  const Matrix<std::int8_t> bad(1, 1, std::vector<std::int8_t>{9});
  EXPECT_THROW(pack_i4(bad), CorruptionError);
}

TEST(DequantizeRef, Examples) {
  QuantizedWeights qw;
  qw.q4 = pack_i4(Matrix<std::int8_t>(1, 1, std::vector<std::int8_t>{7}));
  qw.s_w = {0.2};
  EXPECT_DOUBLE_EQ(dequantize_ref(qw)(0, 0), 1.4);
}

TEST(QuantizerProperties, IdempotentOnDequantized) {
  testing::Rng rng(13);
  for (auto spec : {QuantSpec::per_channel(), QuantSpec::per_group(8)}) {
    const auto w = testing::gaussian_matrix(rng, 32, 12);
    const auto q1 = quant_weight(w, spec);
    const auto q2 = quant_weight(dequantize_ref(q1), spec);
    EXPECT_EQ(q1.q4, q2.q4);
    for (std::size_t n = 0; n < 12; ++n) {
      if (spec.scheme == Scheme::PerChannel) {
        EXPECT_NEAR(q2.s_w[n], q1.s_w[n], 1e-15 * q1.s_w[n]);
      } else {
        for (std::size_t g = 0; g < 4; ++g) EXPECT_NEAR(q2.s_wg(g, n), q1.s_wg(g, n), 1e-15 * q1.s_wg(g, n));
      }
    }
  }
}

TEST(QuantizerProperties, RangesAndPositiveScales) {
  testing::Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = testing::gaussian_matrix(rng, 16, 8, 1e-3 * (trial + 1));
    for (std::size_t k = 0; k < 16; ++k) w(k, trial % 8) = 0.0;  // one dead column per trial
    for (auto spec : {QuantSpec::per_channel(), QuantSpec::per_group(4)}) {
      const auto qw = quant_weight(w, spec);
      const auto codes = qw.codes();
      for (auto q : codes.data()) {
        EXPECT_GE(q, -8);
        EXPECT_LE(q, 7);
      }
      for (double s : qw.s_w) EXPECT_TRUE(s > 0.0 && std::isfinite(s));
      for (double s : qw.s_wg.data()) EXPECT_TRUE(s > 0.0 && std::isfinite(s));
      for (double s : qw.s_wc) EXPECT_TRUE(s > 0.0 && std::isfinite(s));
    }
  }
}

}  // namespace
}  // namespace qqq
