#pragma once

// Adaptive smoothing. Channels whose activation maximum reaches the outlier
// threshold sigma are divided by s[t] = m[t] / sigma (so their maximum lands
// exactly on sigma); the matching weight rows are multiplied by s[t]. Every
// other channel keeps s[t] = 1. sigma is chosen by an exhaustive grid search
// over the W4A8 output error.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "qqq/error.hpp"
#include "qqq/matrix.hpp"
#include "qqq/quantizer.hpp"

namespace qqq {

inline constexpr std::size_t kDefaultSigmaGrid = 20;

struct SmoothingPlan {
  double sigma = 1.0;
  std::vector<std::size_t> selected;  // ascending channel indices
  std::vector<double> s;              // length K
  double objective = 0.0;

  [[nodiscard]] bool is_identity() const noexcept { return selected.empty(); }

  static SmoothingPlan identity(std::size_t k, double sigma) {
    return {sigma, {}, std::vector<double>(k, 1.0), 0.0};
  }

  friend bool operator==(const SmoothingPlan&, const SmoothingPlan&) = default;
};

/// m[t] = max_r |X[r, t]|.
inline std::vector<double> channel_maxima(const DenseMatrix& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t t = 0; t < x.cols(); ++t) m[t] = std::max(m[t], std::fabs(row[t]));
  }
  return m;
}

/// {t : m[t] >= sigma}. Channels at or above the threshold are the smoothed ones.
inline std::vector<std::size_t> select_outlier_channels(const std::vector<double>& m, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("select_outlier_channels: sigma must be positive");
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < m.size(); ++t)
    if (m[t] >= sigma) out.push_back(t);
  return out;
}

inline std::vector<double> smoothing_vector(const std::vector<double>& m, const std::vector<std::size_t>& selected,
                                            double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("smoothing_vector: sigma must be positive");
  std::vector<double> s(m.size(), 1.0);
  for (std::size_t t : selected) s.at(t) = m[t] / sigma;
  return s;
}

/// X with column t divided by s[t].
inline DenseMatrix smooth_activations(const DenseMatrix& x, const std::vector<double>& s) {
  if (s.size() != x.cols()) throw DimensionError("smooth_activations: s length != K");
  DenseMatrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t t = 0; t < row.size(); ++t) row[t] /= s[t];
  }
  return out;
}

/// W with row t multiplied by s[t].
inline DenseMatrix smooth_weights(const DenseMatrix& w, const std::vector<double>& s) {
  if (s.size() != w.rows()) throw DimensionError("smooth_weights: s length != K");
  DenseMatrix out = w;
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (double& v : out.row(t)) v *= s[t];
  return out;
}

/// Same objective against a caller-supplied reference product X W.
inline double smoothing_objective(const DenseMatrix& x, const DenseMatrix& w, const std::vector<double>& s,
                                  const QuantSpec& spec, const DenseMatrix& reference) {
  if (x.cols() != w.rows() || s.size() != x.cols()) throw DimensionError("smoothing_objective: shape mismatch");
  const DenseMatrix xq = quant_act_per_token(smooth_activations(x, s)).dequantize();
  const DenseMatrix wq = dequantize_ref(quant_weight(smooth_weights(w, s), spec));
  return squared_error(matmul_ref(xq, wq), reference);
}

/// ||Q(X / s) Q(W * s) - X W||_F^2 with round-to-nearest weights.
inline double smoothing_objective(const DenseMatrix& x, const DenseMatrix& w, const std::vector<double>& s,
                                  const QuantSpec& spec) {
  if (x.cols() != w.rows()) throw DimensionError("smoothing_objective: shape mismatch");
  return smoothing_objective(x, w, s, spec, matmul_ref(x, w));
}

/// Every plan search_sigma considers, in evaluation order: the identity plan
/// first, then sigma_i = (i / grid_points) * max|X| for i = grid_points .. 1.
inline std::vector<SmoothingPlan> sigma_candidates(const DenseMatrix& x, std::size_t grid_points) {
  if (grid_points < 2) throw ConfigError("search_sigma: grid_points must be >= 2");
  const auto m = channel_maxima(x);
  const double xmax = m.empty() ? 0.0 : *std::max_element(m.begin(), m.end());
  std::vector<SmoothingPlan> plans;
  plans.push_back(SmoothingPlan::identity(x.cols(), xmax > 0.0 ? xmax : 1.0));
  if (xmax <= 0.0) return plans;
  for (std::size_t i = grid_points; i >= 1; --i) {
    const double sigma = (double(i) / double(grid_points)) * xmax;
    auto selected = select_outlier_channels(m, sigma);
    auto s = smoothing_vector(m, selected, sigma);
    plans.push_back({sigma, std::move(selected), std::move(s), 0.0});
  }
  return plans;
}

/// Grid search for sigma. Ties go to the earlier candidate, i.e. toward the
/// identity plan and then toward larger sigma.
inline SmoothingPlan search_sigma(const DenseMatrix& x, const DenseMatrix& w, const QuantSpec& spec,
                                  std::size_t grid_points = kDefaultSigmaGrid) {
  if (x.cols() != w.rows()) throw DimensionError("search_sigma: X and W disagree on K");
  require_finite(x, "calibration activations");
  spec.validate(w.rows());
  const DenseMatrix reference = matmul_ref(x, w);

  auto plans = sigma_candidates(x, grid_points);
  std::size_t best = 0;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    plans[i].objective = smoothing_objective(x, w, plans[i].s, spec, reference);
    if (plans[i].objective < plans[best].objective) best = i;
  }
  return plans[best];
}

}  // namespace qqq
