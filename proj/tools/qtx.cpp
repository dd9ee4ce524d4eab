// SPDX-License-Identifier: Apache-2.0
//
// qtx: fit | calibrate | run | cycles | compare
//
// Errors go to stderr as one JSON object {"error": {"kind", "message"}} with
// exit code 2 (usage), 3 (config), 4 (format), 5 (kernel) or 1 (other).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "qtx/package.hpp"
#include "qtx/report.hpp"
#include "qtx/sched.hpp"

namespace {

using qtx::json;

struct Options {
  std::string config = "toy";
  std::string package;
  std::uint64_t seed = 0;
  std::string report;
  std::string trace;
  std::optional<double> clock_ns;
  std::optional<std::size_t> heads_parallel;
  std::optional<std::string> scale_mode;
  std::optional<std::size_t> layers;
  std::optional<std::string> tile;
  std::string input = "random";
  std::size_t samples = 64;
  bool percentile = false;
  std::string dump_dir;
  std::optional<double> target_ms;
};

qtx::TileShape parse_tile(const std::string& s) {
  if (s == "full") return {};
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    const qtx::TileShape t{std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
    if (t.rows == 0 || t.cols == 0) throw std::invalid_argument(s);
    return t;
  } catch (const std::logic_error&) {
    throw qtx::UsageError("--tile expects ROWSxCOLS with both >= 1, or 'full'; got '" + s + "'");
  }
}

std::string tile_label(qtx::TileShape t) {
  return t.rows == 0 && t.cols == 0 ? "full" : std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

/// Timing and shape overrides from the command line.
qtx::ModelConfig apply_overrides(qtx::ModelConfig c, const Options& o) {
  if (o.clock_ns) c.clock_period_ns = *o.clock_ns;
  if (o.heads_parallel) c.heads_parallel = *o.heads_parallel;
  if (o.scale_mode) c.scale_mode = qtx::parse_scale_mode(*o.scale_mode);
  if (o.layers) c.n_layers = *o.layers;
  if (o.tile) c.tile = parse_tile(*o.tile);
  c.validate();
  return c;
}

void emit(const Options& o, const json& report) {
  const std::string text = report.dump(2) + "\n";
  if (o.report.empty()) {
    std::cout << text;
  } else {
    qtx::write_text(o.report, text);
  }
}

void need_package(const Options& o) {
  if (o.package.empty()) throw qtx::UsageError("--package is required");
}

int cmd_fit(const Options& o) {
  need_package(o);
  const qtx::Package pkg = qtx::make_fit_package(apply_overrides(qtx::load_config(o.config), o), o.seed);
  qtx::save_package(pkg, o.package);
  emit(o, {{"package", o.package},
           {"exp", {{"a", pkg.fits.exp.coeffs.a}, {"b", pkg.fits.exp.coeffs.b}, {"c", pkg.fits.exp.coeffs.c},
                    {"max_abs_err", pkg.fits.exp.max_abs_err}, {"rms_err", pkg.fits.exp.rms_err}}},
           {"erf", {{"a", pkg.fits.erf.coeffs.a}, {"b", pkg.fits.erf.coeffs.b}, {"c", pkg.fits.erf.coeffs.c},
                    {"interval", {pkg.fits.erf.coeffs.lo, pkg.fits.erf.coeffs.hi}},
                    {"max_abs_err", pkg.fits.erf.max_abs_err}, {"rms_err", pkg.fits.erf.rms_err}}}});
  return 0;
}

int cmd_calibrate(const Options& o) {
  need_package(o);
  qtx::Package pkg = qtx::load_package(o.package);
  qtx::ref::CalibrationOptions opt;
  opt.percentile = o.percentile;
  qtx::calibrate_package(pkg, o.samples, o.seed, opt);
  qtx::save_package(pkg, o.package);
  json scales;
  for (const auto& [name, r] : pkg.calibration->max_abs) scales[name] = r;
  emit(o, {{"package", o.package}, {"samples", o.samples}, {"seed", o.seed},
           {"input_scale", pkg.quant->input_scale.value()}, {"junction_max_abs", scales}});
  return 0;
}

/// Shared by run and compare.
qtx::RunResult load_and_run(const Options& o) {
  need_package(o);
  const qtx::Package pkg = qtx::load_package(o.package);
  if (o.scale_mode && qtx::parse_scale_mode(*o.scale_mode) != pkg.config.scale_mode) {
    throw qtx::UsageError("--scale-mode differs from the calibrated package (" +
                          std::string(qtx::to_string(pkg.config.scale_mode)) + ")");
  }
  if (o.layers && *o.layers != pkg.config.n_layers) {
    throw qtx::UsageError("--layers differs from the package's layer count");
  }
  const qtx::ModelConfig timing = apply_overrides(pkg.config, o);
  const qtx::ref::Mat x = qtx::make_input(pkg.config, o.input, o.seed);
  qtx::RunResult r = qtx::run_and_compare(pkg, x, timing, o.input);
  if (!o.trace.empty()) qtx::write_text(o.trace, r.traced.trace.to_text());
  return r;
}

void dump_matrix(const std::filesystem::path& p, const qtx::ref::Mat& m) {
  qtx::write_bytes(p, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

int cmd_run(const Options& o) {
  const qtx::RunResult r = load_and_run(o);
  emit(o, r.report);
  return 0;
}

int cmd_compare(const Options& o) {
  const qtx::RunResult r = load_and_run(o);
  json out = {{"integer_vs_float", qtx::to_json(r.metrics)},
              {"output_digest", r.report.at("output_digest")},
              {"shape", {r.float_out.rows(), r.float_out.cols()}}};
  if (!o.dump_dir.empty()) {
    std::filesystem::create_directories(o.dump_dir);
    const std::filesystem::path dir(o.dump_dir);
    dump_matrix(dir / "integer_output.f64", r.integer_out);
    dump_matrix(dir / "float_output.f64", r.float_out);
    out["dumps"] = {{"integer", "integer_output.f64"}, {"float", "float_output.f64"},
                    {"layout", "row-major little-endian float64"}};
  }
  emit(o, out);
  return 0;
}

int cmd_cycles(const Options& o) {
  const qtx::ModelConfig cfg = apply_overrides(qtx::load_config(o.config), o);
  qtx::FsmTrace trace;
  const qtx::CycleReport rep = qtx::schedule(cfg, cfg.n_layers, o.trace.empty() ? nullptr : &trace);
  if (!o.trace.empty()) qtx::write_text(o.trace, trace.to_text());
  json doc = qtx::to_json(rep, cfg);

  std::printf("config: d=%zu k_heads=%zu m=%zu d_ff=%zu layers=%zu heads_parallel=%zu tile=%s scale_mode=%s\n",
              cfg.d, cfg.k_heads, cfg.m, cfg.d_ff, cfg.n_layers, cfg.heads_per_batch(),
              tile_label(cfg.tile).c_str(), qtx::to_string(cfg.scale_mode));
  std::printf("clock: %.3g ns (%.0f MHz)\n", rep.clock_period_ns, rep.clock_mhz());
  for (const char* kind : {"MHSA", "LN1", "FFN", "LN2"}) {
    std::printf("cycles %-4s %llu\n", kind, static_cast<unsigned long long>(rep.block_total(kind)));
  }
  std::printf("total cycles: %llu\n", static_cast<unsigned long long>(rep.total_cycles));
  std::printf("latency: %.4f ms\n", rep.latency_ms());

  if (o.target_ms) {
    std::vector<std::size_t> hp;
    for (std::size_t h = 1; h <= cfg.k_heads; ++h) {
      if (cfg.k_heads % h == 0) hp.push_back(h);
    }
    std::vector<qtx::TileShape> tiles{cfg.tile};
    const qtx::Sweep s = qtx::sweep_latency(cfg, hp, tiles, *o.target_ms);
    json pts = json::array();
    for (const auto& p : s.points) {
      const double ratio = p.latency_ms / *o.target_ms;
      std::printf("sweep heads_parallel=%zu tile=%s latency=%.4f ms ratio=%.3f\n", p.heads_parallel,
                  tile_label(p.tile).c_str(), p.latency_ms, ratio);
      pts.push_back({{"heads_parallel", p.heads_parallel}, {"tile", tile_label(p.tile)},
                     {"total_cycles", p.total_cycles}, {"latency_ms", p.latency_ms}, {"ratio", ratio}});
    }
    auto point = [](const std::optional<qtx::SweepPoint>& p) -> json {
      if (!p) return nullptr;
      return {{"heads_parallel", p->heads_parallel}, {"tile", tile_label(p->tile)}, {"latency_ms", p->latency_ms}};
    };
    doc["sweep"] = {{"target_ms", *o.target_ms}, {"points", pts}, {"below", point(s.below)},
                    {"above", point(s.above)}};
  }
  if (!o.report.empty()) qtx::write_text(o.report, doc.dump(2) + "\n");
  return 0;
}

int error_exit(const char* kind, const std::string& message, int code) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Integer-only Transformer encoder model: fitting, calibration, inference, cycle model"};
  app.require_subcommand(1, 1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Config preset (toy, roberta-base) or JSON file");
    c->add_option("--seed", o.seed, "Seed for weights, samples and random inputs");
    c->add_option("--report", o.report, "Write the report here instead of stdout");
    c->add_option("--clock-ns", o.clock_ns, "Clock period in ns")->check(CLI::PositiveNumber);
    c->add_option("--heads-parallel", o.heads_parallel, "Heads processed concurrently (0 = all)");
    c->add_option("--scale-mode", o.scale_mode, "Attention scale: sqrt-dh-shift or model-dim")
        ->check(CLI::IsMember({"sqrt-dh-shift", "model-dim"}));
    c->add_option("--tile", o.tile, "MAC array tile ROWSxCOLS or 'full'");
  };

  auto* fit = app.add_subcommand("fit", "Fit kernel polynomials and write a package with toy weights");
  common(fit);
  fit->add_option("--package", o.package, "Package directory")->required();
  fit->add_option("--layers", o.layers, "Number of encoder layers");

  auto* cal = app.add_subcommand("calibrate", "Derive and freeze junction scales, quantize weights");
  common(cal);
  cal->add_option("--package", o.package, "Package directory")->required();
  cal->add_option("--samples", o.samples, "Number of calibration inputs")->check(CLI::PositiveNumber);
  cal->add_flag("--percentile", o.percentile, "Clip junction ranges at the 99.9th percentile");

  auto* run = app.add_subcommand("run", "Integer inference with a run report");
  common(run);
  run->add_option("--package", o.package, "Package directory")->required();
  run->add_option("--input", o.input, "zeros, random, or a JSON m x d array");
  run->add_option("--trace", o.trace, "Write the FSM trace here");
  run->add_option("--layers", o.layers, "Must match the package");

  auto* cyc = app.add_subcommand("cycles", "Shape-only cycle report");
  common(cyc);
  cyc->add_option("--layers", o.layers, "Number of encoder layers");
  cyc->add_option("--trace", o.trace, "Write the FSM trace here");
  cyc->add_option("--target-ms", o.target_ms, "Sweep head parallelism against this latency");

  auto* cmp = app.add_subcommand("compare", "Integer vs float metrics");
  common(cmp);
  cmp->add_option("--package", o.package, "Package directory")->required();
  cmp->add_option("--input", o.input, "zeros, random, or a JSON m x d array");
  cmp->add_option("--dump-dir", o.dump_dir, "Write both outputs as raw float64 here");
  cmp->add_option("--trace", o.trace, "Write the FSM trace here");
  cmp->add_option("--layers", o.layers, "Must match the package");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return error_exit("usage", e.what(), 2);
  }

  try {
    if (*fit) return cmd_fit(o);
    if (*cal) return cmd_calibrate(o);
    if (*run) return cmd_run(o);
    if (*cyc) return cmd_cycles(o);
    if (*cmp) return cmd_compare(o);
  } catch (const qtx::Error& e) {
    const std::string kind = e.kind();
    const int code = kind == "usage" ? 2 : kind == "config" ? 3 : kind == "format" ? 4 : kind == "kernel" ? 5 : 1;
    return error_exit(kind.c_str(), e.what(), code);
  } catch (const std::exception& e) {
    return error_exit("internal", e.what(), 1);
  }
  return 1;
}
