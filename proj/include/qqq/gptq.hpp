#pragma once

// Hessian-based quantization compensation (GPTQ-style).
//
// For a layer Y = X W with W of shape K x N, the Hessian of the layer-wise
// squared error with respect to each output column is H = 2 X^T X. Input
// dimensions are quantized one at a time in natural order; the error of row
// i is pushed onto the not-yet-quantized rows through the Cholesky factor of
// the damped inverse Hessian:
//
//   e_n   = (W[i, n] - Q(W[i, n])) / U[i, i]
//   W[j, n] -= e_n * U[i, j]            for j > i
//
// where U is upper triangular with U^T U = (H + lambda I)^-1. U[i, i]^2 is the
// inverse-Hessian diagonal restricted to the remaining rows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "qqq/error.hpp"
#include "qqq/matrix.hpp"
#include "qqq/quantizer.hpp"

namespace qqq {

inline constexpr double kDefaultPercdamp = 0.01;
inline constexpr std::size_t kDefaultGptqBlock = 128;

struct HessianState {
  DenseMatrix h;                   // 2 X^T X, dead diagonals replaced by lambda
  double lambda = 0.0;             // percdamp * mean(diag(2 X^T X))
  std::vector<std::uint8_t> dead;  // 1 where the calibration column is all zero
  DenseMatrix hinv_chol;           // upper U, U^T U = (h + lambda I)^-1

  [[nodiscard]] std::size_t dim() const noexcept { return h.rows(); }
};

/// Lower Cholesky factor of a symmetric positive definite matrix.
inline DenseMatrix cholesky_lower(const DenseMatrix& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("cholesky: matrix is not square");
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      throw NumericalError("cholesky: non-positive pivot at " + std::to_string(j) +
                           "; the damped Hessian is not positive definite, increase percdamp");
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / ljj;
    }
  }
  return l;
}

/// Inverse of a lower-triangular matrix by forward substitution.
inline DenseMatrix invert_lower(const DenseMatrix& l) {
  const std::size_t n = l.rows();
  DenseMatrix inv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    inv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = 0.0;
      for (std::size_t k = j; k < i; ++k) v -= l(i, k) * inv(k, j);
      inv(i, j) = v / l(i, i);
    }
  }
  return inv;
}

/// Upper U with U^T U = (H + lambda I)^-1.
inline DenseMatrix damped_cholesky_inverse(const DenseMatrix& h, double lambda) {
  const std::size_t n = h.rows();
  if (h.cols() != n) throw DimensionError("damped_cholesky_inverse: H is not square");
  DenseMatrix a = h;
  for (std::size_t i = 0; i < n; ++i) a(i, i) += lambda;

  const DenseMatrix linv = invert_lower(cholesky_lower(a));
  // (L L^T)^-1 = L^-T L^-1; only the lower triangle is needed for the next factorization.
  DenseMatrix ainv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double v = 0.0;
      for (std::size_t k = i; k < n; ++k) v += linv(k, i) * linv(k, j);
      ainv(i, j) = v;
      ainv(j, i) = v;
    }
  }
  return transpose(cholesky_lower(ainv));
}

/// Streams calibration rows into H = 2 X^T X. Batches add bit-identically to a
/// single pass over the same rows.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t k) : k_(k), h_(k, k) {}

  void add_batch(const DenseMatrix& x) {
    if (x.cols() != k_) throw DimensionError("HessianAccumulator: batch has wrong K");
    require_finite(x, "calibration activations");
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto row = x.row(r);
      for (std::size_t i = 0; i < k_; ++i) {
        const double xi2 = 2.0 * row[i];
        if (xi2 == 0.0) continue;
        auto out = h_.row(i);
        for (std::size_t j = i; j < k_; ++j) out[j] += xi2 * row[j];
      }
    }
    tokens_ += x.rows();
  }

  [[nodiscard]] std::size_t tokens() const noexcept { return tokens_; }

  [[nodiscard]] HessianState finalize(double percdamp = kDefaultPercdamp) const {
    if (!(percdamp >= 0.0)) throw ConfigError("percdamp must be non-negative");
    HessianState st;
    st.h = h_;
    for (std::size_t i = 0; i < k_; ++i)
      for (std::size_t j = 0; j < i; ++j) st.h(i, j) = st.h(j, i);

    double trace = 0.0;
    for (std::size_t i = 0; i < k_; ++i) trace += st.h(i, i);
    if (k_ == 0 || !(trace > 0.0)) {
      throw CalibrationError("degenerate calibration: activations are all zero");
    }
    st.lambda = percdamp * (trace / double(k_));
    st.dead.assign(k_, 0);
    for (std::size_t i = 0; i < k_; ++i) {
      if (st.h(i, i) == 0.0) {
        st.dead[i] = 1;
        st.h(i, i) = st.lambda > 0.0 ? st.lambda : 1.0;
      }
    }
    st.hinv_chol = damped_cholesky_inverse(st.h, st.lambda);
    return st;
  }

 private:
  std::size_t k_;
  DenseMatrix h_;  // upper triangle only until finalize
  std::size_t tokens_ = 0;
};

inline HessianState build_hessian(const DenseMatrix& x, double percdamp = kDefaultPercdamp) {
  if (x.rows() == 0) throw CalibrationError("build_hessian: no calibration tokens");
  HessianAccumulator acc(x.cols());
  acc.add_batch(x);
  return acc.finalize(percdamp);
}

struct CompensationResult {
  QuantizedWeights qweights;
  double layer_error = 0.0;          // ||X W - X deq(Q(W))||_F^2
  std::vector<double> row_losses;    // per input dimension: sum_n (w - q)^2 / (2 U[i,i]^2)
};

/// ||X W - X W_hat||_F^2 through matmul_ref.
inline double layer_error(const DenseMatrix& x, const DenseMatrix& w, const DenseMatrix& w_hat) {
  return squared_error(matmul_ref(x, w), matmul_ref(x, w_hat));
}

struct GptqOptions {
  std::size_t block_size = kDefaultGptqBlock;
};

/// Quantize W (K x N) with Hessian compensation. X supplies only the
/// reported layer error; the sweep itself reads the Hessian state.
inline CompensationResult gptq_sweep(const DenseMatrix& w, const DenseMatrix& x, const HessianState& hs,
                                     const QuantSpec& spec, const GptqOptions& opts = {}) {
  const std::size_t k_dim = w.rows();
  const std::size_t n_dim = w.cols();
  if (hs.dim() != k_dim || hs.hinv_chol.rows() != k_dim) {
    throw DimensionError("gptq_sweep: Hessian is " + std::to_string(hs.dim()) + "x" + std::to_string(hs.dim()) +
                         " but W has K = " + std::to_string(k_dim));
  }
  if (x.cols() != k_dim) throw DimensionError("gptq_sweep: calibration K differs from W");
  if (opts.block_size == 0) throw ConfigError("gptq_sweep: block_size must be positive");
  require_finite(w, "weights");
  spec.validate(k_dim);

  const DenseMatrix& u = hs.hinv_chol;
  const bool per_group = spec.scheme == Scheme::PerGroup;
  const std::size_t g = spec.group_size;

  DenseMatrix wc = w;
  for (std::size_t i = 0; i < k_dim; ++i)
    if (hs.dead[i]) std::fill(wc.row(i).begin(), wc.row(i).end(), 0.0);

  std::vector<double> s_w;
  DenseMatrix s_wg;
  if (per_group) {
    s_wg = DenseMatrix(k_dim / g, n_dim);
  } else {
    s_w.resize(n_dim);
    for (std::size_t n = 0; n < n_dim; ++n) {
      double absmax = 0.0;
      for (std::size_t k = 0; k < k_dim; ++k) absmax = std::max(absmax, std::fabs(wc(k, n)));
      s_w[n] = symmetric_scale(absmax, kInt4Divisor);
    }
  }

  Matrix<std::int8_t> codes(k_dim, n_dim);
  std::vector<double> losses(k_dim, 0.0);
  std::vector<double> colmax(n_dim);

  for (std::size_t b0 = 0; b0 < k_dim; b0 += opts.block_size) {
    const std::size_t b1 = std::min(b0 + opts.block_size, k_dim);
    DenseMatrix err(b1 - b0, n_dim);  // scaled errors of this block, applied lazily past b1

    for (std::size_t i = b0; i < b1; ++i) {
      if (per_group && i % g == 0) {
        // Scales come from the compensated weights of the group, including
        // updates still pending for rows past the block.
        std::fill(colmax.begin(), colmax.end(), 0.0);
        for (std::size_t j = i; j < i + g; ++j) {
          for (std::size_t n = 0; n < n_dim; ++n) {
            double v = wc(j, n);
            if (j >= b1)
              for (std::size_t r = b0; r < i; ++r) v -= err(r - b0, n) * u(r, j);
            colmax[n] = std::max(colmax[n], std::fabs(v));
          }
        }
        for (std::size_t n = 0; n < n_dim; ++n) s_wg(i / g, n) = symmetric_scale(colmax[n], kInt4Divisor);
      }

      const double d = u(i, i);
      auto wrow = wc.row(i);
      auto erow = err.row(i - b0);
      for (std::size_t n = 0; n < n_dim; ++n) {
        const double scale = per_group ? s_wg(i / g, n) : s_w[n];
        const std::int8_t q = quantize_int4(wrow[n], scale);
        codes(i, n) = q;
        const double diff = wrow[n] - double(q) * scale;
        erow[n] = diff / d;
        losses[i] += diff * diff / (2.0 * d * d);
      }
      for (std::size_t j = i + 1; j < b1; ++j) {
        const double uij = u(i, j);
        auto dst = wc.row(j);
        for (std::size_t n = 0; n < n_dim; ++n) dst[n] -= erow[n] * uij;
      }
    }

    // Deferred trailing update. Each destination receives the block's
    // contributions in row order, so the result matches an unblocked sweep.
    for (std::size_t j = b1; j < k_dim; ++j) {
      auto dst = wc.row(j);
      for (std::size_t r = b0; r < b1; ++r) {
        const double urj = u(r, j);
        const auto erow = err.row(r - b0);
        for (std::size_t n = 0; n < n_dim; ++n) dst[n] -= erow[n] * urj;
      }
    }
  }

  CompensationResult out;
  out.qweights = make_quantized_weights(codes, spec, std::move(s_w), std::move(s_wg));
  out.layer_error = layer_error(x, w, dequantize_ref(out.qweights));
  out.row_losses = std::move(losses);
  return out;
}

/// Round-to-nearest baseline with the same result type.
inline CompensationResult rtn_quantize(const DenseMatrix& w, const DenseMatrix& x, const QuantSpec& spec) {
  if (x.cols() != w.rows()) throw DimensionError("rtn_quantize: calibration K differs from W");
  CompensationResult out;
  out.qweights = quant_weight(w, spec);
  const DenseMatrix deq = dequantize_ref(out.qweights);
  out.layer_error = layer_error(x, w, deq);
  out.row_losses.assign(w.rows(), 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k)
    for (std::size_t n = 0; n < w.cols(); ++n) {
      const double d = w(k, n) - deq(k, n);
      out.row_losses[k] += d * d / 2.0;
    }
  return out;
}

}  // namespace qqq
