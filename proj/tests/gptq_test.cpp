#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "qqq/gptq.hpp"
#include "test_util.hpp"

namespace qqq {
namespace {

Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Textbook optimal-brain-surgeon sweep: at step i, invert the damped Hessian
// restricted to the remaining rows and spread the error through its column.
struct ObsResult {
  Matrix<std::int8_t> codes;
  DenseMatrix scales;  // groups x N (one row for per-channel)
};

ObsResult obs_sweep(const DenseMatrix& w, const HessianState& hs, const QuantSpec& spec) {
  const Eigen::Index k = Eigen::Index(w.rows()), n = Eigen::Index(w.cols());
  Eigen::MatrixXd wc = to_eigen(w);
  for (Eigen::Index i = 0; i < k; ++i)
    if (hs.dead[i]) wc.row(i).setZero();
  Eigen::MatrixXd h = to_eigen(hs.h);
  h.diagonal().array() += hs.lambda;

  const bool pg = spec.scheme == Scheme::PerGroup;
  const Eigen::Index g = pg ? Eigen::Index(spec.group_size) : k;
  ObsResult out{Matrix<std::int8_t>(w.rows(), w.cols()), DenseMatrix(std::size_t(k / g), w.cols())};
  for (Eigen::Index i = 0; i < k; ++i) {
    if (i % g == 0)
      for (Eigen::Index c = 0; c < n; ++c) {
        const double mx = wc.block(i, c, g, 1).cwiseAbs().maxCoeff();
        out.scales(std::size_t(i / g), std::size_t(c)) = mx > 0 ? mx / 7.0 : 1.0;
      }
    const Eigen::Index rest = k - i;
    const Eigen::MatrixXd hinv = h.bottomRightCorner(rest, rest).inverse();
    for (Eigen::Index c = 0; c < n; ++c) {
      const double s = out.scales(std::size_t(i / g), std::size_t(c));
      const double q = std::clamp(std::nearbyint(wc(i, c) / s), -8.0, 7.0);
      out.codes(std::size_t(i), std::size_t(c)) = static_cast<std::int8_t>(q);
      const double e = (wc(i, c) - q * s) / hinv(0, 0);
      wc.block(i, c, rest, 1) -= e * hinv.col(0);
    }
  }
  return out;
}

TEST(BuildHessian, Example) {
  const auto hs = build_hessian(DenseMatrix(1, 2, {1, 2}), 0.0);
  EXPECT_EQ(hs.h, DenseMatrix(2, 2, {2, 4, 4, 8}));
  EXPECT_EQ(hs.lambda, 0.0);
  EXPECT_EQ(build_hessian(DenseMatrix(1, 2, {1, 2})).lambda, 0.01 * 5.0);
}

TEST(BuildHessian, SymmetricAndBatchAdditive) {
  testing::Rng rng(1);
  const auto x = testing::gaussian_matrix(rng, 40, 9);
  const auto whole = build_hessian(x);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) ASSERT_EQ(whole.h(i, j), whole.h(j, i));

  HessianAccumulator acc(9);
  DenseMatrix top(17, 9), bottom(23, 9);
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 9; ++c) (r < 17 ? top(r, c) : bottom(r - 17, c)) = x(r, c);
  acc.add_batch(top);
  acc.add_batch(bottom);
  EXPECT_EQ(acc.tokens(), 40u);
  const auto split = acc.finalize();
  EXPECT_EQ(split.h, whole.h);
  EXPECT_EQ(split.hinv_chol, whole.hinv_chol);

  const Eigen::MatrixXd xe = to_eigen(x);
  const Eigen::MatrixXd he = 2.0 * xe.transpose() * xe;
  EXPECT_LE((he - to_eigen(whole.h)).norm(), 1e-12 * he.norm());
}

TEST(BuildHessian, Errors) {
  EXPECT_THROW(build_hessian(DenseMatrix(4, 3)), CalibrationError);
  EXPECT_THROW(build_hessian(DenseMatrix(0, 3)), CalibrationError);
  EXPECT_THROW(build_hessian(DenseMatrix(2, 2, 1.0), -0.1), ConfigError);
  EXPECT_THROW(HessianAccumulator(3).add_batch(DenseMatrix(2, 4)), DimensionError);
  EXPECT_THROW(build_hessian(DenseMatrix(1, 1, {std::nan("")})), DataError);
}

TEST(BuildHessian, DeadColumnsGetLambda) {
  const DenseMatrix x(2, 3, {1, 0, 2, 3, 0, -1});
  const auto hs = build_hessian(x);
  EXPECT_EQ(hs.dead, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_DOUBLE_EQ(hs.lambda, 0.01 * (20.0 + 0.0 + 10.0) / 3.0);
  EXPECT_EQ(hs.h(1, 1), hs.lambda);
}

TEST(DampedCholeskyInverse, Examples) {
  EXPECT_EQ(damped_cholesky_inverse(DenseMatrix::identity(3), 0.0), DenseMatrix::identity(3));
  EXPECT_EQ(damped_cholesky_inverse(DenseMatrix(2, 2, {4, 0, 0, 4}), 0.0), DenseMatrix(2, 2, {0.5, 0, 0, 0.5}));
  EXPECT_THROW(damped_cholesky_inverse(DenseMatrix(2, 2, {1, 2, 2, 1}), 0.0), NumericalError);
  EXPECT_THROW(damped_cholesky_inverse(DenseMatrix(2, 3), 0.0), DimensionError);
}

TEST(DampedCholeskyInverse, ReproducesInverse) {
  testing::Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = testing::gaussian_matrix(rng, 12, 8);
    const auto hs = build_hessian(x);
    const Eigen::MatrixXd u = to_eigen(hs.hinv_chol);
    for (Eigen::Index i = 0; i < 8; ++i) {
      EXPECT_GT(u(i, i), 0.0);
      for (Eigen::Index j = 0; j < i; ++j) EXPECT_EQ(u(i, j), 0.0);
    }
    Eigen::MatrixXd a = to_eigen(hs.h);
    a.diagonal().array() += hs.lambda;
    const Eigen::MatrixXd inv = a.inverse();
    EXPECT_LE((u.transpose() * u - inv).norm(), 1e-10 * inv.norm());
  }
}

TEST(GptqSweep, SingleRowIsRoundToNearest) {
  testing::Rng rng(3);
  const auto w = testing::gaussian_matrix(rng, 1, 6);
  const auto x = testing::gaussian_matrix(rng, 10, 1);
  const auto g = gptq_sweep(w, x, build_hessian(x), QuantSpec::per_channel());
  EXPECT_EQ(g.qweights, rtn_quantize(w, x, QuantSpec::per_channel()).qweights);
}

TEST(GptqSweep, DiagonalHessianIsRoundToNearest) {
  testing::Rng rng(4);
  const auto w = testing::gaussian_matrix(rng, 8, 5);
  DenseMatrix x(16, 8);  // disjoint supports -> diagonal X^T X
  for (std::size_t r = 0; r < 16; ++r) x(r, r % 8) = 0.5 + double(r);
  for (const auto& spec : {QuantSpec::per_channel(), QuantSpec::per_group(4)}) {
    const auto g = gptq_sweep(w, x, build_hessian(x), spec);
    const auto r = rtn_quantize(w, x, spec);
    EXPECT_EQ(g.qweights, r.qweights);
    EXPECT_DOUBLE_EQ(g.layer_error, r.layer_error);
  }
}

TEST(GptqSweep, TwoRowExampleMatchesBruteForce) {
  const DenseMatrix x(2, 2, {1, 1, 1, -0.9});
  const DenseMatrix w(2, 1, {0.6, 0.55});
  const auto g = gptq_sweep(w, x, build_hessian(x), QuantSpec::per_channel());
  const auto r = rtn_quantize(w, x, QuantSpec::per_channel());
  EXPECT_LE(g.layer_error, r.layer_error);
  const auto bf = testing::brute_force_pair(x, 0.6, 0.55, g.qweights.s_w[0]);
  const auto codes = g.qweights.codes();
  EXPECT_EQ(codes(0, 0), bf.first);
  EXPECT_EQ(codes(1, 0), bf.second);
  EXPECT_EQ(bf, (std::pair<int, int>{7, 6}));
  EXPECT_NEAR(g.layer_error, 0.0023086734693877533, 1e-15);
}

TEST(GptqSweep, MatchesObsOracle) {
  testing::Rng rng(5);
  for (const auto& spec : {QuantSpec::per_channel(), QuantSpec::per_group(8)}) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto x = testing::gaussian_matrix(rng, 64, 32);
      const auto w = testing::gaussian_matrix(rng, 32, 6);
      const auto hs = build_hessian(x);
      const auto g = gptq_sweep(w, x, hs, spec);
      const auto want = obs_sweep(w, hs, spec);
      EXPECT_EQ(g.qweights.codes(), want.codes);
      const DenseMatrix got_scales =
          spec.scheme == Scheme::PerGroup ? g.qweights.s_wg : DenseMatrix(1, 6, g.qweights.s_w);
      ASSERT_EQ(got_scales.size(), want.scales.size());
      for (std::size_t i = 0; i < got_scales.size(); ++i)
        EXPECT_NEAR(got_scales.data()[i], want.scales.data()[i], 1e-10 * want.scales.data()[i]);
    }
  }
}

TEST(GptqSweep, BeatsRoundToNearestOnRandomLayers) {
  testing::Rng rng(6);
  int le = 0, lt = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = testing::gaussian_matrix(rng, 64, 64);
    const auto x = testing::gaussian_matrix(rng, 256, 64);
    const double eg = gptq_sweep(w, x, build_hessian(x), QuantSpec::per_channel()).layer_error;
    const double er = rtn_quantize(w, x, QuantSpec::per_channel()).layer_error;
    le += eg <= er;
    lt += eg < er;
  }
  EXPECT_GE(le, 19);
  EXPECT_GE(lt, 16);
}

TEST(GptqSweep, BlockedEqualsUnblocked) {
  testing::Rng rng(7);
  const auto x = testing::gaussian_matrix(rng, 300, 160);
  const auto w = testing::gaussian_matrix(rng, 160, 12);
  const auto hs = build_hessian(x);
  for (const auto& spec : {QuantSpec::per_channel(), QuantSpec::per_group(32)}) {
    const auto ref = gptq_sweep(w, x, hs, spec, {1});
    for (std::size_t b : {7u, 32u, 128u, 1000u}) {
      const auto got = gptq_sweep(w, x, hs, spec, {b});
      EXPECT_EQ(got.qweights, ref.qweights) << b;
      EXPECT_EQ(got.row_losses, ref.row_losses) << b;
      EXPECT_EQ(got.layer_error, ref.layer_error) << b;
    }
  }
}

TEST(GptqSweep, DeadColumnsEmitZeroCodes) {
  testing::Rng rng(8);
  auto x = testing::gaussian_matrix(rng, 50, 16);
  for (std::size_t r = 0; r < 50; ++r) x(r, 3) = x(r, 11) = 0.0;
  const auto w = testing::gaussian_matrix(rng, 16, 4);
  const auto hs = build_hessian(x);
  for (const auto& spec : {QuantSpec::per_channel(), QuantSpec::per_group(4)}) {
    const auto codes = gptq_sweep(w, x, hs, spec).qweights.codes();
    for (std::size_t n = 0; n < 4; ++n) {
      EXPECT_EQ(codes(3, n), 0);
      EXPECT_EQ(codes(11, n), 0);
    }
  }
}

TEST(GptqSweep, CodesRespectGridAndRunsAreDeterministic) {
  testing::Rng rng(9);
  const auto x = testing::gaussian_matrix(rng, 80, 32);
  const auto w = testing::gaussian_matrix(rng, 32, 8, 3.0);
  const auto hs = build_hessian(x);
  const auto a = gptq_sweep(w, x, hs, QuantSpec::per_group(16));
  const auto b = gptq_sweep(w, x, build_hessian(x), QuantSpec::per_group(16));
  EXPECT_EQ(a.qweights, b.qweights);
  EXPECT_EQ(a.layer_error, b.layer_error);
  EXPECT_GE(a.layer_error, 0.0);
  const auto codes = a.qweights.codes();
  for (auto q : codes.storage()) {
    EXPECT_GE(q, -8);
    EXPECT_LE(q, 7);
  }
  for (double s : a.qweights.s_wg.storage()) EXPECT_GT(s, 0.0);
  for (double s : a.qweights.s_wc) EXPECT_GT(s, 0.0);
}

TEST(GptqSweep, ShapeAndConfigErrors) {
  const auto x = DenseMatrix(4, 4, 1.0);
  DenseMatrix xi = DenseMatrix::identity(4);
  const auto hs = build_hessian(xi);
  EXPECT_THROW(gptq_sweep(DenseMatrix(3, 2), xi, hs, QuantSpec::per_channel()), DimensionError);
  EXPECT_THROW(gptq_sweep(DenseMatrix(4, 2), DenseMatrix(4, 3), hs, QuantSpec::per_channel()), DimensionError);
  EXPECT_THROW(gptq_sweep(DenseMatrix(4, 2), x, hs, QuantSpec::per_group(3)), ConfigError);
  EXPECT_THROW(gptq_sweep(DenseMatrix(4, 2), x, hs, QuantSpec::per_channel(), {0}), ConfigError);
}

TEST(RtnQuantize, Examples) {
  const DenseMatrix w(2, 1, {7, -3});
  const auto x = DenseMatrix(3, 2, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(rtn_quantize(w, x, QuantSpec::per_channel()).layer_error, 0.0);

  testing::Rng rng(10);
  const auto w2 = testing::gaussian_matrix(rng, 8, 3);
  const auto x2 = testing::gaussian_matrix(rng, 20, 8);
  const auto r = rtn_quantize(w2, x2, QuantSpec::per_channel());
  const auto d = dequantize_ref(r.qweights);
  const auto a = testing::naive_matmul(x2, w2), b = testing::naive_matmul(x2, d);
  double e = 0;
  for (std::size_t i = 0; i < a.size(); ++i) e += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  EXPECT_NEAR(r.layer_error, e, 1e-12 * e);
}

}  // namespace
}  // namespace qqq
