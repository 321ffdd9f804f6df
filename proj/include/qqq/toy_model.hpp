#pragma once

// A small feed-forward stack used to evaluate quantization end to end:
//
//   per block:  LayerNorm -> Linear(d, 4d) -> GELU -> Linear(4d, d)
//
// Linear layers have no bias; weights are stored K x N so y = x W. The
// generator plants a few large LayerNorm gains so that the first Linear of
// each block sees outlier input channels. All parameters are
// float-representable so they survive an f32 checkpoint unchanged.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qqq/checkpoint.hpp"
#include "qqq/error.hpp"
#include "qqq/matrix.hpp"

namespace qqq {

inline constexpr double kLayerNormEps = 1e-5;

struct ToyBlock {
  std::vector<double> ln_weight;
  std::vector<double> ln_bias;
  DenseMatrix fc1;  // d x 4d
  DenseMatrix fc2;  // 4d x d

  friend bool operator==(const ToyBlock&, const ToyBlock&) = default;
};

struct ToyModel {
  std::size_t d = 64;
  std::vector<ToyBlock> blocks;

  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

struct ToyModelConfig {
  std::size_t d = 64;
  std::size_t blocks = 2;
  std::size_t outlier_channels = 2;
  double outlier_gain = 20.0;
};

inline std::string layer_name(std::size_t block, std::string_view fc) {
  return "blocks." + std::to_string(block) + "." + std::string(fc);
}

inline ToyModel make_toy_model(std::uint64_t seed, const ToyModelConfig& cfg = {}) {
  if (cfg.d == 0 || cfg.blocks == 0) throw ConfigError("toy model needs d > 0 and at least one block");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, cfg.d - 1);
  auto f32 = [](double v) { return double(static_cast<float>(v)); };

  const std::size_t d = cfg.d, h = 4 * cfg.d;
  ToyModel m;
  m.d = d;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    ToyBlock blk;
    blk.ln_weight.resize(d);
    for (auto& g : blk.ln_weight) g = f32(1.0 + 0.1 * normal(rng));
    for (std::size_t i = 0; i < cfg.outlier_channels; ++i) blk.ln_weight[pick(rng)] = f32(cfg.outlier_gain);
    blk.ln_bias.assign(d, 0.0);

    blk.fc1 = DenseMatrix(d, h);
    for (auto& v : blk.fc1.data()) v = f32(normal(rng) / std::sqrt(double(d)));
    blk.fc2 = DenseMatrix(h, d);
    for (auto& v : blk.fc2.data()) v = f32(normal(rng) / std::sqrt(double(h)));
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

inline DenseMatrix layer_norm(const DenseMatrix& x, const std::vector<double>& gamma, const std::vector<double>& beta) {
  if (gamma.size() != x.cols() || beta.size() != x.cols()) throw DimensionError("layer_norm: parameter length != d");
  DenseMatrix y(x.rows(), x.cols());
  const double n = double(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x.row(r)) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) * inv * gamma[c] + beta[c];
  }
  return y;
}

/// Exact (erf) GELU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline DenseMatrix gelu(DenseMatrix x) {
  for (double& v : x.data()) v = gelu(v);
  return x;
}

inline DenseMatrix forward_fp(const ToyModel& m, const DenseMatrix& x) {
  if (x.cols() != m.d) throw DimensionError("forward_fp: input width != d");
  DenseMatrix h = x;
  for (const auto& b : m.blocks) h = matmul_ref(gelu(matmul_ref(layer_norm(h, b.ln_weight, b.ln_bias), b.fc1)), b.fc2);
  return h;
}

/// Seeded Gaussian model inputs.
inline DenseMatrix synthetic_input(std::uint64_t seed, std::size_t tokens, std::size_t d) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DenseMatrix x(tokens, d);
  for (auto& v : x.data()) v = double(static_cast<float>(normal(rng)));
  return x;
}

inline Checkpoint toy_model_checkpoint(const ToyModel& m) {
  Checkpoint ck;
  ck.metadata = {{"kind", "fp"}, {"model", "toy-ffn"}, {"d", m.d}, {"blocks", m.blocks.size()}};
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    ck.add_f32(layer_name(b, "ln.weight"), blk.ln_weight);
    ck.add_f32(layer_name(b, "ln.bias"), blk.ln_bias);
    ck.add_f32(layer_name(b, "fc1.weight"), blk.fc1);
    ck.add_f32(layer_name(b, "fc2.weight"), blk.fc2);
  }
  return ck;
}

inline ToyModel toy_model_from_checkpoint(const Checkpoint& ck) {
  if (ck.metadata.value("model", "") != "toy-ffn" || ck.metadata.value("kind", "") != "fp") {
    throw DataError("checkpoint is not a full-precision toy model");
  }
  ToyModel m;
  m.d = ck.metadata.at("d").get<std::size_t>();
  const auto nb = ck.metadata.at("blocks").get<std::size_t>();
  for (std::size_t b = 0; b < nb; ++b) {
    ToyBlock blk{ck.f32_vector(layer_name(b, "ln.weight")), ck.f32_vector(layer_name(b, "ln.bias")),
                 ck.f32_matrix(layer_name(b, "fc1.weight")), ck.f32_matrix(layer_name(b, "fc2.weight"))};
    if (blk.ln_weight.size() != m.d || blk.fc1.rows() != m.d || blk.fc2.cols() != m.d ||
        blk.fc1.cols() != blk.fc2.rows()) {
      throw DimensionError("toy model block " + std::to_string(b) + " has inconsistent shapes");
    }
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

}  // namespace qqq
