// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline steps shared by the command-line tool and the test
// suites: toy package creation, calibration, integer runs, comparison
// metrics, and the structured reports.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtx/package.hpp"
#include "qtx/refmodel.hpp"
#include "qtx/sched.hpp"
#include "qtx/xblocks.hpp"

namespace qtx {

/// Independent RNG streams derived from the user seed (splitmix64 finalizer).
enum class Stream : std::uint64_t { weights = 1, calibration = 2, input = 3 };

inline std::uint64_t derive_seed(std::uint64_t seed, Stream s) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(s);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Fitted kernel polynomials plus seeded toy float weights.
inline Package make_fit_package(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Package pkg;
  pkg.config = cfg;
  pkg.seed = seed;
  pkg.fits = ref::fit_all();
  pkg.float_model = ref::make_toy_model(cfg, derive_seed(seed, Stream::weights));
  return pkg;
}

/// Freezes junction scales from `samples` seeded inputs and quantizes the weights.
inline void calibrate_package(Package& pkg, std::size_t samples, std::uint64_t seed,
                              ref::CalibrationOptions options = {}) {
  if (samples == 0) throw UsageError("calibration needs at least one sample");
  const auto xs = ref::make_samples(pkg.config, samples, derive_seed(seed, Stream::calibration));
  const ref::CalibrationSet cal = ref::calibrate(pkg.float_model, xs, pkg.config, options);
  CalibrationInfo info{samples, seed, options, {}};
  for (const auto& [name, st] : cal.stats) info.max_abs[name] = cal.range(name);
  pkg.calibration = std::move(info);
  pkg.quant = quantize_model(pkg.float_model, cal, pkg.fits, pkg.config);
}

/// "zeros", "random" (seeded), or a JSON file holding an m x d array of numbers.
inline ref::Mat make_input(const ModelConfig& cfg, const std::string& source, std::uint64_t seed) {
  const auto m = static_cast<Eigen::Index>(cfg.m), d = static_cast<Eigen::Index>(cfg.d);
  if (source == "zeros") return ref::Mat::Zero(m, d);
  if (source == "random") return ref::make_samples(cfg, 1, derive_seed(seed, Stream::input)).front();
  json j;
  try {
    j = json::parse(read_text(source));
  } catch (const json::parse_error& e) {
    throw FormatError("input " + source + ": " + e.what());
  }
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != m) {
    throw FormatError("input " + source + " must be an array of " + std::to_string(m) + " rows");
  }
  ref::Mat x(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != d) {
      throw FormatError("input row " + std::to_string(i) + " must have " + std::to_string(d) + " numbers");
    }
    for (Eigen::Index k = 0; k < d; ++k) x(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return x;
}

struct Metrics {
  double max_abs_err = 0.0;
  double mean_abs_err = 0.0;
  double cosine = 0.0;
  double argmax_agreement = 0.0;  // fraction of rows with the same argmax
  std::size_t elements = 0;
};

/// Cosine of two all-zero tensors is defined as 1.
inline Metrics compare_outputs(const ref::Mat& integer, const ref::Mat& real) {
  if (integer.rows() != real.rows() || integer.cols() != real.cols()) {
    throw UsageError("compare_outputs: shape mismatch");
  }
  Metrics m;
  m.elements = static_cast<std::size_t>(real.size());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < real.size(); ++i) {
    const double e = std::fabs(integer.data()[i] - real.data()[i]);
    m.max_abs_err = std::max(m.max_abs_err, e);
    sum += e;
  }
  m.mean_abs_err = m.elements ? sum / static_cast<double>(m.elements) : 0.0;
  const double ni = integer.norm(), nr = real.norm();
  m.cosine = ni == 0.0 && nr == 0.0 ? 1.0 : (ni == 0.0 || nr == 0.0 ? 0.0 : integer.cwiseProduct(real).sum() / (ni * nr));
  std::size_t agree = 0;
  for (Eigen::Index r = 0; r < real.rows(); ++r) {
    Eigen::Index ai = 0, ar = 0;
    integer.row(r).maxCoeff(&ai);
    real.row(r).maxCoeff(&ar);
    agree += ai == ar;
  }
  m.argmax_agreement = real.rows() ? static_cast<double>(agree) / static_cast<double>(real.rows()) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Structured reports
// ---------------------------------------------------------------------------

inline json to_json(const Metrics& m) {
  return {{"max_abs_err", m.max_abs_err},
          {"mean_abs_err", m.mean_abs_err},
          {"cosine_similarity", m.cosine},
          {"argmax_agreement", m.argmax_agreement},
          {"elements", m.elements}};
}

inline json to_json(const SaturationStats& s) {
  return {{"dyadic", s.dyadic}, {"int8_clamp", s.int8_clamp}, {"accumulator", s.accumulator},
          {"kernel", s.kernel}, {"total", s.total()}};
}

inline json to_json(const LayerTiming& t) {
  json batches = json::array();
  for (const HeadTiming& h : t.mhsa.batches) {
    batches.push_back({{"qkv", h.qkv}, {"qk", h.qk}, {"softmax", h.softmax}, {"pv", h.pv}});
  }
  auto ln = [](const LnTiming& n) {
    return json{{"pipeline", n.pipeline}, {"sqrt_iterations", n.sqrt_iterations}, {"total", n.total()}};
  };
  return {{"mhsa", {{"head_batches", batches}, {"wo", t.mhsa.wo}, {"total", t.mhsa.total()}}},
          {"ln1", ln(t.ln1)},
          {"ffn", {{"mm1", t.ffn.mm1}, {"mm2", t.ffn.mm2}, {"total", t.ffn.total()}}},
          {"ln2", ln(t.ln2)},
          {"control_overhead", t.control_overhead * LayerTiming::kBlocks},
          {"total", t.total()}};
}

inline json to_json(const CycleReport& r, const ModelConfig& cfg) {
  json layers = json::array();
  for (const LayerTiming& t : r.layers) layers.push_back(to_json(t));
  json blocks;
  for (const char* kind : {"MHSA", "LN1", "FFN", "LN2"}) blocks[kind] = r.block_total(kind);
  return {{"config", to_json(cfg)},
          {"sqrt_iterations", r.measured ? "measured" : "worst-case"},
          {"worst_case_sqrt_iters", r.worst_case_sqrt_iters},
          {"clock_period_ns", r.clock_period_ns},
          {"clock_mhz", r.clock_mhz()},
          {"total_cycles", r.total_cycles},
          {"latency_ms", r.latency_ms()},
          {"block_cycles", blocks},
          {"layers", layers}};
}

struct RunResult {
  TracedRun traced;
  ref::Mat integer_out;  // dequantized
  ref::Mat float_out;
  Metrics metrics;
  json report;
};

/// Integer inference on `x` with cycle accounting, compared against the float model.
/// `timing` may override the package's parallelism, tile, and clock.
inline RunResult run_and_compare(const Package& pkg, const ref::Mat& x, const ModelConfig& timing,
                                 const std::string& input_label) {
  if (!pkg.quant) throw UsageError("package is not calibrated; run the calibrate command first");
  QuantModel qm = *pkg.quant;
  qm.config.heads_parallel = timing.heads_parallel;
  qm.config.tile = timing.tile;
  qm.config.clock_period_ns = timing.clock_period_ns;
  qm.config.control_overhead = timing.control_overhead;
  qm.config.validate();

  RunResult r;
  SaturationStats in_sat;
  const QMat8 xq = quantize_input(x, qm.input_scale, &in_sat);
  r.traced = run_with_trace(qm, xq);
  r.traced.saturation += in_sat;
  r.integer_out = to_real(r.traced.output.out);
  r.float_out = ref::encoder(x, pkg.float_model, pkg.config.attention_shift());
  r.metrics = compare_outputs(r.integer_out, r.float_out);

  json layers = json::array();
  for (std::size_t l = 0; l < r.traced.output.layer_outputs.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"output_digest", digest(r.traced.output.layer_outputs[l])},
                      {"output_scale", r.traced.output.layer_outputs[l].scale.value()},
                      {"cycles", r.traced.output.timings[l].total()}});
  }
  r.report = {{"input", {{"source", input_label}, {"digest", digest(xq)}, {"scale", xq.scale.value()}}},
              {"layers", layers},
              {"output_digest", digest(r.traced.output.out)},
              {"integer_vs_float", to_json(r.metrics)},
              {"saturation", to_json(r.traced.saturation)},
              {"cycles", to_json(r.traced.report, qm.config)}};
  return r;
}

}  // namespace qtx
