#pragma once

// Two-stage layer quantization (smoothing, then Hessian compensation on the
// smoothed weights), its application to the toy model, and the quantized
// checkpoint layout.
//
// Layer errors are measured on the W4A8 output the layer actually produces:
//
//   err = || deq(Q_act(X / s)) deq(Q_w) - X W ||_F^2
//
// so err_AS is exactly the objective the smoothing search minimized.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qqq/checkpoint.hpp"
#include "qqq/error.hpp"
#include "qqq/gemm.hpp"
#include "qqq/gptq.hpp"
#include "qqq/matrix.hpp"
#include "qqq/quantizer.hpp"
#include "qqq/smoothing.hpp"
#include "qqq/toy_model.hpp"

namespace qqq {

inline constexpr std::size_t kDefaultCalibTokens = 512;
inline constexpr std::size_t kMinCalibTokens = 16;

struct LayerOptions {
  bool smooth = true;
  bool gptq = true;
  std::size_t sigma_grid = kDefaultSigmaGrid;
  double percdamp = kDefaultPercdamp;
  std::size_t block_size = kDefaultGptqBlock;
  bool ablation = true;  // also compute err_B / err_AS / err_AS_GPTQ
};

struct QuantizedLinear {
  QuantizedWeights qw;
  SmoothingPlan plan;

  friend bool operator==(const QuantizedLinear&, const QuantizedLinear&) = default;
};

struct LayerMetrics {
  std::string name;
  double sigma = 0.0;
  std::size_t n_smoothed = 0;
  double err_B = 0.0;          // RTN, no smoothing
  double err_AS = 0.0;         // RTN on smoothed weights
  double err_AS_GPTQ = 0.0;    // GPTQ on smoothed weights
  double err_emitted = 0.0;    // the configuration actually written out
};

struct LayerResult {
  QuantizedLinear layer;
  LayerMetrics metrics;
};

/// W4A8 output error of a quantized layer against the reference X W.
inline double w4a8_layer_error(const DenseMatrix& x, const DenseMatrix& reference, const std::vector<double>& s,
                               const QuantizedWeights& qw) {
  const DenseMatrix xq = quant_act_per_token(smooth_activations(x, s)).dequantize();
  return squared_error(matmul_ref(xq, dequantize_ref(qw)), reference);
}

inline LayerResult quantize_layer(const DenseMatrix& w, const DenseMatrix& x, const QuantSpec& spec,
                                  const LayerOptions& opts = {}, std::string name = {}) {
  if (x.cols() != w.rows()) throw DimensionError("quantize_layer: calibration K differs from W");
  require_finite(w, "weights");
  require_finite(x, "calibration activations");
  spec.validate(w.rows());
  const DenseMatrix reference = matmul_ref(x, w);
  const GptqOptions gopts{opts.block_size};
  const std::vector<double> ones(w.rows(), 1.0);

  LayerResult out;
  auto& m = out.metrics;
  m.name = std::move(name);

  // Stage 1 runs whenever smoothing is emitted or the ablation needs it.
  SmoothingPlan plan;
  if (opts.smooth || opts.ablation) {
    plan = search_sigma(x, w, spec, opts.sigma_grid);
  }
  const DenseMatrix ws = smooth_weights(w, plan.s.empty() ? ones : plan.s);
  const DenseMatrix xs = smooth_activations(x, plan.s.empty() ? ones : plan.s);

  std::optional<QuantizedWeights> rtn_plain, rtn_smooth, gptq_smooth;
  if (opts.ablation || (!opts.smooth && !opts.gptq)) rtn_plain = quant_weight(w, spec);
  if (opts.ablation || (opts.smooth && !opts.gptq)) rtn_smooth = quant_weight(ws, spec);
  if (opts.ablation || (opts.smooth && opts.gptq)) {
    gptq_smooth = gptq_sweep(ws, xs, build_hessian(xs, opts.percdamp), spec, gopts).qweights;
  }
  if (opts.ablation) {
    m.err_B = w4a8_layer_error(x, reference, ones, *rtn_plain);
    m.err_AS = w4a8_layer_error(x, reference, plan.s, *rtn_smooth);
    m.err_AS_GPTQ = w4a8_layer_error(x, reference, plan.s, *gptq_smooth);
  }

  if (opts.smooth) {
    out.layer.qw = opts.gptq ? *gptq_smooth : *rtn_smooth;
  } else {
    plan = SmoothingPlan::identity(w.rows(), sigma_candidates(x, opts.sigma_grid).front().sigma);
    out.layer.qw = opts.gptq ? gptq_sweep(w, x, build_hessian(x, opts.percdamp), spec, gopts).qweights : *rtn_plain;
  }
  m.err_emitted = w4a8_layer_error(x, reference, plan.s, out.layer.qw);
  if (!opts.smooth) plan.objective = w4a8_layer_error(x, reference, ones, rtn_plain ? *rtn_plain : quant_weight(w, spec));
  m.sigma = plan.sigma;
  m.n_smoothed = plan.selected.size();
  out.layer.plan = std::move(plan);
  return out;
}

/// Round every stored scale to f32 so that an in-memory record equals its
/// checkpoint image. Codes are unchanged; s_Wc is rederived from the rounded
/// group scales.
inline QuantizedLinear to_storage_precision(QuantizedLinear l) {
  auto f32 = [](double v) { return double(static_cast<float>(v)); };
  for (double& v : l.plan.s) v = f32(v);
  if (l.qw.scheme == Scheme::PerChannel) {
    for (double& v : l.qw.s_w) v = f32(v);
  } else {
    for (double& v : l.qw.s_wg.data()) v = f32(v);
    l.qw.s_wc = requant_scale(l.qw.codes(), l.qw.s_wg, l.qw.group_size);
    for (double& v : l.qw.s_wc) v = f32(v);
  }
  return l;
}

// ---------------------------------------------------------------------------
// Quantized toy model

struct QuantizedBlock {
  std::vector<double> ln_weight;
  std::vector<double> ln_bias;
  QuantizedLinear fc1;
  QuantizedLinear fc2;

  friend bool operator==(const QuantizedBlock&, const QuantizedBlock&) = default;
};

struct QuantizedModel {
  std::size_t d = 0;
  Scheme scheme = Scheme::PerChannel;
  std::size_t group_size = kDefaultGroupSize;
  std::vector<QuantizedBlock> blocks;

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

struct ModelOptions {
  LayerOptions layer;
  bool fp_calibration = false;  // calibrate every layer on full-precision activations
  std::size_t min_tokens = kMinCalibTokens;
};

struct ModelResult {
  QuantizedModel model;
  std::vector<LayerMetrics> metrics;
};

/// y = x W through the integer GEMM of the requested engine.
inline DenseMatrix linear_quant(const DenseMatrix& x, const QuantizedLinear& l, Scheme engine) {
  if (engine != l.qw.scheme) {
    throw ConfigError("forward_quant: " + std::string(to_string(engine)) + " engine on a " +
                      std::string(to_string(l.qw.scheme)) + " layer");
  }
  const auto a = quant_act_per_token(smooth_activations(x, l.plan.s));
  return w4a8_gemm(a, l.qw.q4, fuse_scales(l.qw)).decoded();
}

/// Same layer with the GEMM operands dequantized and multiplied in double.
inline DenseMatrix linear_dequant(const DenseMatrix& x, const QuantizedLinear& l) {
  const auto xq = quant_act_per_token(smooth_activations(x, l.plan.s)).dequantize();
  return matmul_ref(xq, effective_weights(l.qw));
}

inline DenseMatrix forward_quant(const QuantizedModel& m, const DenseMatrix& x, Scheme engine) {
  if (engine != m.scheme) {
    throw ConfigError("forward_quant: " + std::string(to_string(engine)) + " engine on a " +
                      std::string(to_string(m.scheme)) + " checkpoint");
  }
  if (x.cols() != m.d) throw DimensionError("forward_quant: input width != d");
  DenseMatrix h = x;
  for (const auto& b : m.blocks)
    h = linear_quant(gelu(linear_quant(layer_norm(h, b.ln_weight, b.ln_bias), b.fc1, engine)), b.fc2, engine);
  return h;
}

/// Dequantize-everything reference for forward_quant.
inline DenseMatrix forward_dequant_oracle(const QuantizedModel& m, const DenseMatrix& x) {
  if (x.cols() != m.d) throw DimensionError("forward_dequant_oracle: input width != d");
  DenseMatrix h = x;
  for (const auto& b : m.blocks)
    h = linear_dequant(gelu(linear_dequant(layer_norm(h, b.ln_weight, b.ln_bias), b.fc1)), b.fc2);
  return h;
}

inline void check_calibration(const DenseMatrix& x, std::size_t d, std::size_t min_tokens) {
  if (x.cols() != d) throw DimensionError("calibration input width != model d");
  if (x.rows() < min_tokens) {
    throw CalibrationError("calibration set has " + std::to_string(x.rows()) + " tokens; at least " +
                           std::to_string(min_tokens) + " required");
  }
  require_finite(x, "calibration input");
}

/// Quantize each Linear in order. Layer L is calibrated on the activations
/// of the model with layers < L already quantized, unless fp_calibration.
inline ModelResult quantize_model(const ToyModel& fp, const DenseMatrix& calib, const QuantSpec& spec,
                                  const ModelOptions& opts = {}) {
  check_calibration(calib, fp.d, opts.min_tokens);
  ModelResult r;
  r.model.d = fp.d;
  r.model.scheme = spec.scheme;
  r.model.group_size = spec.scheme == Scheme::PerGroup ? spec.group_size : kDefaultGroupSize;

  DenseMatrix h_q = calib, h_fp = calib;
  for (std::size_t b = 0; b < fp.blocks.size(); ++b) {
    const auto& blk = fp.blocks[b];
    QuantizedBlock qb{blk.ln_weight, blk.ln_bias, {}, {}};

    const DenseMatrix a_q = layer_norm(h_q, blk.ln_weight, blk.ln_bias);
    const DenseMatrix a_fp = layer_norm(h_fp, blk.ln_weight, blk.ln_bias);
    auto fc1 = quantize_layer(blk.fc1, opts.fp_calibration ? a_fp : a_q, spec, opts.layer, layer_name(b, "fc1"));
    qb.fc1 = to_storage_precision(std::move(fc1.layer));
    r.metrics.push_back(std::move(fc1.metrics));

    const DenseMatrix g_q = gelu(linear_quant(a_q, qb.fc1, spec.scheme));
    const DenseMatrix g_fp = gelu(matmul_ref(a_fp, blk.fc1));
    auto fc2 = quantize_layer(blk.fc2, opts.fp_calibration ? g_fp : g_q, spec, opts.layer, layer_name(b, "fc2"));
    qb.fc2 = to_storage_precision(std::move(fc2.layer));
    r.metrics.push_back(std::move(fc2.metrics));

    h_q = linear_quant(g_q, qb.fc2, spec.scheme);
    h_fp = matmul_ref(g_fp, blk.fc2);
    r.model.blocks.push_back(std::move(qb));
  }
  return r;
}

inline double relative_frobenius(const DenseMatrix& a, const DenseMatrix& ref) {
  const double den = frobenius_norm(ref);
  const double num = std::sqrt(squared_error(a, ref));
  return den > 0.0 ? num / den : num;
}

// ---------------------------------------------------------------------------
// Checkpoint layout of a quantized model

namespace detail {

inline Json plan_json(const SmoothingPlan& p) {
  return {{"sigma", p.sigma}, {"selected", p.selected}, {"objective", p.objective}};
}

inline void add_linear(Checkpoint& ck, Json& layers, const std::string& name, const QuantizedLinear& l) {
  Json tensors = {{"q4", name + ".q4"}, {"smooth", name + ".smooth"}};
  ck.add_i4p(name + ".q4", l.qw.q4);
  ck.add_f32(name + ".smooth", l.plan.s);
  if (l.qw.scheme == Scheme::PerChannel) {
    ck.add_f32(name + ".s_w", l.qw.s_w);
    tensors["s_w"] = name + ".s_w";
  } else {
    ck.add_f32(name + ".s_wg", l.qw.s_wg);
    ck.add_f32(name + ".s_wc", l.qw.s_wc);
    ck.add_f16(name + ".s_star", fuse_scales(l.qw).s_star);
    tensors["s_wg"] = name + ".s_wg";
    tensors["s_wc"] = name + ".s_wc";
    tensors["s_star"] = name + ".s_star";
  }
  layers[name] = {{"scheme", to_string(l.qw.scheme)},
                  {"group_size", l.qw.group_size},
                  {"tensors", tensors},
                  {"smoothing", plan_json(l.plan)}};
}

inline QuantizedLinear read_linear(const Checkpoint& ck, const std::string& name) {
  if (!ck.metadata.contains("layers") || !ck.metadata["layers"].contains(name)) {
    throw DataError("checkpoint has no metadata for layer '" + name + "'");
  }
  const Json& meta = ck.metadata["layers"][name];
  const Json& t = meta.at("tensors");
  QuantizedLinear l;
  l.qw.scheme = parse_scheme(meta.at("scheme").get<std::string>());
  l.qw.group_size = meta.at("group_size").get<std::size_t>();
  l.qw.q4 = ck.i4p(t.at("q4").get<std::string>());
  if (l.qw.scheme == Scheme::PerChannel) {
    l.qw.s_w = ck.f32_vector(t.at("s_w").get<std::string>());
    if (l.qw.s_w.size() != l.qw.cols()) throw DimensionError(name + ": s_w length != N");
  } else {
    l.qw.s_wg = ck.f32_matrix(t.at("s_wg").get<std::string>());
    l.qw.s_wc = ck.f32_vector(t.at("s_wc").get<std::string>());
    QuantSpec::per_group(l.qw.group_size).validate(l.qw.rows());
    if (l.qw.s_wg.rows() * l.qw.group_size != l.qw.rows() || l.qw.s_wg.cols() != l.qw.cols() ||
        l.qw.s_wc.size() != l.qw.cols()) {
      throw DimensionError(name + ": group scales do not match the weight shape");
    }
    if (!(ck.f16_matrix(t.at("s_star").get<std::string>()) == fuse_scales(l.qw).s_star)) {
      throw CorruptionError(name + ": stored s_star disagrees with s_wg / s_wc");
    }
  }
  const Json& sm = meta.at("smoothing");
  l.plan.sigma = sm.at("sigma").get<double>();
  l.plan.selected = sm.at("selected").get<std::vector<std::size_t>>();
  l.plan.objective = sm.at("objective").get<double>();
  l.plan.s = ck.f32_vector(t.at("smooth").get<std::string>());
  if (l.plan.s.size() != l.qw.rows()) throw DimensionError(name + ": smoothing vector length != K");
  return l;
}

}  // namespace detail

inline Checkpoint quantized_model_checkpoint(const QuantizedModel& m) {
  Checkpoint ck;
  Json layers = Json::object();
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    ck.add_f32(layer_name(b, "ln.weight"), blk.ln_weight);
    ck.add_f32(layer_name(b, "ln.bias"), blk.ln_bias);
    detail::add_linear(ck, layers, layer_name(b, "fc1"), blk.fc1);
    detail::add_linear(ck, layers, layer_name(b, "fc2"), blk.fc2);
  }
  ck.metadata = {{"kind", "quantized"},
                 {"model", "toy-ffn"},
                 {"d", m.d},
                 {"blocks", m.blocks.size()},
                 {"scheme", to_string(m.scheme)},
                 {"group_size", m.group_size},
                 {"layers", layers}};
  return ck;
}

inline QuantizedModel quantized_model_from_checkpoint(const Checkpoint& ck) {
  if (ck.metadata.value("model", "") != "toy-ffn" || ck.metadata.value("kind", "") != "quantized") {
    throw DataError("checkpoint is not a quantized toy model");
  }
  QuantizedModel m;
  m.d = ck.metadata.at("d").get<std::size_t>();
  m.scheme = parse_scheme(ck.metadata.at("scheme").get<std::string>());
  m.group_size = ck.metadata.at("group_size").get<std::size_t>();
  const auto nb = ck.metadata.at("blocks").get<std::size_t>();
  for (std::size_t b = 0; b < nb; ++b) {
    QuantizedBlock blk{ck.f32_vector(layer_name(b, "ln.weight")), ck.f32_vector(layer_name(b, "ln.bias")),
                       detail::read_linear(ck, layer_name(b, "fc1")), detail::read_linear(ck, layer_name(b, "fc2"))};
    if (blk.ln_weight.size() != m.d || blk.fc1.qw.rows() != m.d || blk.fc2.qw.cols() != m.d ||
        blk.fc1.qw.cols() != blk.fc2.qw.rows()) {
      throw DimensionError("quantized block " + std::to_string(b) + " has inconsistent shapes");
    }
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

/// The JSON metrics report written by `qqq quantize`.
inline Json metrics_report(const std::vector<LayerMetrics>& metrics, const QuantSpec& spec, const LayerOptions& opts) {
  Json layers = Json::array();
  double b = 0, as = 0, asg = 0;
  for (const auto& m : metrics) {
    layers.push_back({{"name", m.name},
                      {"sigma", m.sigma},
                      {"n_smoothed", m.n_smoothed},
                      {"err_B", m.err_B},
                      {"err_AS", m.err_AS},
                      {"err_AS_GPTQ", m.err_AS_GPTQ},
                      {"err_emitted", m.err_emitted}});
    b += m.err_B;
    as += m.err_AS;
    asg += m.err_AS_GPTQ;
  }
  const double n = metrics.empty() ? 1.0 : double(metrics.size());
  return {{"scheme", to_string(spec.scheme)},
          {"group_size", spec.group_size},
          {"smooth", opts.smooth},
          {"gptq", opts.gptq},
          {"sigma_grid", opts.sigma_grid},
          {"percdamp", opts.percdamp},
          {"layers", layers},
          {"mean", {{"err_B", b / n}, {"err_AS", as / n}, {"err_AS_GPTQ", asg / n}}}};
}

/// Parses "synthetic:SEED".
inline std::uint64_t parse_synthetic_seed(std::string_view spec) {
  constexpr std::string_view prefix = "synthetic:";
  if (!spec.starts_with(prefix) || spec.size() == prefix.size()) {
    throw ConfigError("expected synthetic:SEED, got '" + std::string(spec) + "'");
  }
  try {
    std::size_t used = 0;
    const std::string digits(spec.substr(prefix.size()));
    const auto v = std::stoull(digits, &used);
    if (used != digits.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad seed in '" + std::string(spec) + "'");
  }
}

}  // namespace qqq
