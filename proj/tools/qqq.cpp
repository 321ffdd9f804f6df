// qqq: command-line driver for the W4A8 quantization toolkit.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "qqq/qqq.hpp"

namespace {

using namespace qqq;

constexpr const char* kCalibTensor = "calib.input";
constexpr std::size_t kEvalTokens = 512;

void write_json(const Json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
  if (!f) throw ParseError(ParseError::Kind::Io, "write to '" + path + "' failed");
}

// Either "synthetic:SEED" or a checkpoint holding a calib.input tensor.
DenseMatrix load_inputs(const std::string& source, std::size_t d) {
  if (source.rfind("synthetic:", 0) == 0) return synthetic_input(parse_synthetic_seed(source), kDefaultCalibTokens, d);
  const auto ck = read_checkpoint(source);
  if (!ck.contains(kCalibTensor)) {
    throw CalibrationError("'" + source + "' has no '" + std::string(kCalibTensor) + "' tensor");
  }
  return ck.f32_matrix(kCalibTensor);
}

int cmd_selftest() {
  const auto report = run_selftest();
  for (const auto& s : report.suites) {
    std::printf("%-22s %-4s %9zu checks  %.3f s\n", s.name.c_str(), s.ok() ? "ok" : "FAIL", s.checked, s.seconds);
    for (const auto& f : s.failures) std::printf("    %s\n", f.c_str());
    if (s.failure_count > s.failures.size()) {
      std::printf("    ... %zu more\n", s.failure_count - s.failures.size());
    }
  }
  std::printf("%s (%.3f s)\n", report.ok() ? "selftest passed" : "selftest FAILED", report.seconds());
  return report.ok() ? 0 : 1;
}

struct QuantizeArgs {
  std::string in, calib, scheme = "per-channel", out, report;
  std::size_t group_size = kDefaultGroupSize;
  std::size_t sigma_grid = kDefaultSigmaGrid;
  double percdamp = 0.01;
  bool no_smooth = false, no_gptq = false;
  std::uint64_t seed = 0;
};

int cmd_quantize(const QuantizeArgs& a) {
  const ToyModel fp = toy_model_from_checkpoint(read_checkpoint(a.in));
  const std::string calib_source = a.calib.empty() ? "synthetic:" + std::to_string(a.seed) : a.calib;
  const DenseMatrix calib = load_inputs(calib_source, fp.d);

  QuantSpec spec{parse_scheme(a.scheme), a.group_size};
  ModelOptions opts;
  opts.layer.smooth = !a.no_smooth;
  opts.layer.gptq = !a.no_gptq;
  opts.layer.sigma_grid = a.sigma_grid;
  opts.layer.percdamp = a.percdamp;

  const auto result = quantize_model(fp, calib, spec, opts);
  auto ck = quantized_model_checkpoint(result.model);
  ck.metadata["calibration"] = {{"source", calib_source}, {"tokens", calib.rows()}};
  write_checkpoint(ck, a.out);

  Json report = metrics_report(result.metrics, spec, opts.layer);
  report["calibration"] = ck.metadata["calibration"];
  if (!a.report.empty()) write_json(report, a.report);

  for (const auto& m : result.metrics) {
    std::printf("%-14s sigma=%-10.4g smoothed=%-3zu B=%-11.5g AS=%-11.5g AS+GPTQ=%-11.5g\n", m.name.c_str(), m.sigma,
                m.n_smoothed, m.err_B, m.err_AS, m.err_AS_GPTQ);
  }
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

int cmd_eval(const std::string& fp_path, const std::string& q_path, const std::string& input,
             const std::string& report_path) {
  const ToyModel fp = toy_model_from_checkpoint(read_checkpoint(fp_path));
  const QuantizedModel q = quantized_model_from_checkpoint(read_checkpoint(q_path));
  if (q.d != fp.d || q.blocks.size() != fp.blocks.size()) {
    throw DimensionError("quantized checkpoint does not match the full-precision model");
  }
  const DenseMatrix x = synthetic_input(parse_synthetic_seed(input), kEvalTokens, fp.d);
  const DenseMatrix y_fp = forward_fp(fp, x);
  const DenseMatrix y_q = forward_quant(q, x, q.scheme);
  const double vs_fp = relative_frobenius(y_q, y_fp);
  const double vs_oracle = relative_frobenius(y_q, forward_dequant_oracle(q, x));

  const Json report = {{"input", input},
                       {"tokens", x.rows()},
                       {"scheme", to_string(q.scheme)},
                       {"group_size", q.group_size},
                       {"rel_error_vs_fp", vs_fp},
                       {"rel_error_vs_dequant_oracle", vs_oracle}};
  if (!report_path.empty()) write_json(report, report_path);
  std::printf("relative error vs fp:              %.6g\n", vs_fp);
  std::printf("relative error vs dequant oracle:  %.6g\n", vs_oracle);
  return 0;
}

template <class F>
double seconds_per_call(F&& f) {
  using clock = std::chrono::steady_clock;
  std::size_t calls = 0;
  const auto t0 = clock::now();
  double elapsed = 0.0;
  do {
    f();
    ++calls;
    elapsed = std::chrono::duration<double>(clock::now() - t0).count();
  } while (elapsed < 0.25);
  return elapsed / double(calls);
}

int cmd_gemm_bench(std::size_t m, std::size_t n, std::size_t k, const std::string& scheme, std::size_t group_size) {
  const QuantSpec spec{parse_scheme(scheme), group_size};
  spec.validate(k);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> normal(0.0, 1.0);
  DenseMatrix x(m, k), w(k, n);
  for (auto& v : x.data()) v = normal(rng);
  for (auto& v : w.data()) v = normal(rng);

  const auto qw = quant_weight(w, spec);
  const auto fused = fuse_scales(qw);
  const auto a = quant_act_per_token(x);
  const DenseMatrix deq = dequantize_ref(qw);
  const double ops = 2.0 * double(m) * double(n) * double(k);

  const double t_gemm = seconds_per_call([&] { (void)w4a8_gemm(a, qw.q4, fused); });
  const double t_full = seconds_per_call([&] { (void)w4a8_gemm(quant_act_per_token(x), qw.q4, fuse_scales(qw)); });
  const double t_ref = seconds_per_call([&] { (void)matmul_ref(x, deq); });

  std::printf("m=%zu n=%zu k=%zu scheme=%s", m, n, k, scheme.c_str());
  if (spec.scheme == Scheme::PerGroup) std::printf(" group_size=%zu", group_size);
  std::printf("\n");
  std::printf("%-32s %12.4g ops/s\n", "w4a8 gemm (prepared operands)", ops / t_gemm);
  std::printf("%-32s %12.4g ops/s\n", "w4a8 gemm (with act quant)", ops / t_full);
  std::printf("%-32s %12.4g ops/s\n", "double matmul (dequantized)", ops / t_ref);
  return 0;
}

int cmd_inspect(const std::string& path) {
  const auto header = checkpoint_header(read_file_bytes(path));
  std::cout << header.dump(2) << '\n';
  return 0;
}

int cmd_toy_model(std::uint64_t seed, std::size_t d, std::size_t blocks, const std::string& out) {
  ToyModelConfig cfg;
  cfg.d = d;
  cfg.blocks = blocks;
  write_checkpoint(toy_model_checkpoint(make_toy_model(seed, cfg)), out);
  std::printf("wrote %s (d=%zu, blocks=%zu, seed=%llu)\n", out.c_str(), d, blocks, (unsigned long long)seed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"W4A8 post-training quantization toolkit"};
  app.require_subcommand(1);
  std::function<int()> run;

  app.add_subcommand("selftest", "run exhaustive conversion and round-trip checks")->callback([&] {
    run = cmd_selftest;
  });

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "quantize a full-precision toy model checkpoint");
  quant->add_option("--in", qa.in, "full-precision checkpoint")->required();
  quant->add_option("--calib", qa.calib, "calibration checkpoint or synthetic:SEED (default synthetic:<seed>)");
  quant->add_option("--scheme", qa.scheme, "weight scheme")
      ->check(CLI::IsMember({"per-channel", "per-group"}))
      ->capture_default_str();
  quant->add_option("--group-size", qa.group_size, "per-group block length")->capture_default_str();
  quant->add_option("--sigma-grid", qa.sigma_grid, "number of outlier thresholds searched")->capture_default_str();
  quant->add_option("--percdamp", qa.percdamp, "Hessian damping as a fraction of mean diagonal")->capture_default_str();
  quant->add_flag("--no-smooth", qa.no_smooth, "skip adaptive smoothing");
  quant->add_flag("--no-gptq", qa.no_gptq, "round to nearest instead of GPTQ");
  quant->add_option("--seed", qa.seed, "seed for synthetic calibration")->capture_default_str();
  quant->add_option("--out", qa.out, "output checkpoint")->required();
  quant->add_option("--report", qa.report, "JSON metrics report");
  quant->callback([&] { run = [&] { return cmd_quantize(qa); }; });

  std::string fp_path, q_path, input, eval_report;
  auto* eval = app.add_subcommand("eval", "compare quantized and full-precision forward passes");
  eval->add_option("--fp", fp_path, "full-precision checkpoint")->required();
  eval->add_option("--quant", q_path, "quantized checkpoint")->required();
  eval->add_option("--input", input, "synthetic:SEED")->required();
  eval->add_option("--report", eval_report, "JSON report");
  eval->callback([&] { run = [&] { return cmd_eval(fp_path, q_path, input, eval_report); }; });

  std::size_t bm = 64, bn = 256, bk = 256, bgroup = kDefaultGroupSize;
  std::string bscheme = "per-group";
  auto* bench = app.add_subcommand("gemm-bench", "time the reference GEMM pipelines");
  bench->add_option("--m", bm, "tokens")->capture_default_str();
  bench->add_option("--n", bn, "output channels")->capture_default_str();
  bench->add_option("--k", bk, "input channels")->capture_default_str();
  bench->add_option("--scheme", bscheme, "weight scheme")
      ->check(CLI::IsMember({"per-channel", "per-group"}))
      ->capture_default_str();
  bench->add_option("--group-size", bgroup, "per-group block length")->capture_default_str();
  bench->callback([&] { run = [&] { return cmd_gemm_bench(bm, bn, bk, bscheme, bgroup); }; });

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "print a checkpoint header");
  inspect->add_option("ckpt", inspect_path, "checkpoint file")->required();
  inspect->callback([&] { run = [&] { return cmd_inspect(inspect_path); }; });

  std::uint64_t tseed = 0;
  std::size_t td = 64, tblocks = 2;
  std::string tout;
  auto* toy = app.add_subcommand("toy-model", "write a seeded full-precision toy model");
  toy->add_option("--seed", tseed)->capture_default_str();
  toy->add_option("--d", td, "model width")->capture_default_str();
  toy->add_option("--blocks", tblocks)->capture_default_str();
  toy->add_option("--out", tout, "output checkpoint")->required();
  toy->callback([&] { run = [&] { return cmd_toy_model(tseed, td, tblocks, tout); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    return run();
  } catch (const qqq::Error& e) {
    std::fprintf(stderr, "qqq: error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "qqq: unexpected error: %s\n", e.what());
    return 1;
  }
}
