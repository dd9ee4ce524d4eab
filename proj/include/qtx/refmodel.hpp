// SPDX-License-Identifier: Apache-2.0
//
// Floating-point reference model: real-valued oracles for every integer
// kernel and block, quadratic least-squares fitting, toy weight generation
// and per-junction scale calibration.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qtx/config.hpp"
#include "qtx/errors.hpp"
#include "qtx/intkernels.hpp"
#include "qtx/quantcore.hpp"

namespace qtx::ref {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// Scalar and row oracles
// ---------------------------------------------------------------------------

inline double exp(double x) { return std::exp(x); }
inline double erf(double x) { return std::erf(x); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

/// exp(x_i - max) / sum_j exp(x_j - max)
inline std::vector<double> softmax(std::span<const double> row) {
  if (row.empty()) throw UsageError("softmax: empty row");
  const double m = *std::max_element(row.begin(), row.end());
  std::vector<double> out(row.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) sum += out[i] = std::exp(row[i] - m);
  for (double& v : out) v /= sum;
  return out;
}

/// (x - mean) / std * gamma + beta; a zero-variance row normalizes to 0.
inline std::vector<double> layernorm(std::span<const double> row, std::span<const double> gamma,
                                     std::span<const double> beta, double eps = 0.0) {
  if (row.size() != gamma.size() || row.size() != beta.size() || row.empty()) {
    throw UsageError("layernorm: length mismatch");
  }
  const double n = static_cast<double>(row.size());
  double mean = 0.0;
  for (double v : row) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : row) var += (v - mean) * (v - mean);
  var /= n;
  const double sd = std::sqrt(var + eps);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    const double z = sd > 0.0 ? (row[i] - mean) / sd : 0.0;
    out[i] = z * gamma[i] + beta[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quadratic fitting
// ---------------------------------------------------------------------------

struct FitResult {
  PolyCoeffs coeffs;
  double max_abs_err = 0.0;
  double rms_err = 0.0;
};

inline constexpr std::size_t kFitSamples = 100000;

/// Least-squares fit of a(x+b)^2+c to f on a uniform grid over [lo, hi].
inline FitResult fit_poly2(const std::function<double(double)>& f, double lo, double hi,
                           std::size_t samples = kFitSamples) {
  if (!(lo < hi) || samples < 3) throw ConfigError("fit_poly2: degenerate interval");
  // Centre and scale x for conditioning: t = (x - mid) / half.
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  Eigen::MatrixXd v(samples, 3);
  Eigen::VectorXd y(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(samples - 1);
    const double t = (x - mid) / half;
    v(i, 0) = t * t;
    v(i, 1) = t;
    v(i, 2) = 1.0;
    y(i) = f(x);
  }
  const Eigen::Vector3d p = v.colPivHouseholderQr().solve(y);
  // p2 t^2 + p1 t + p0 with t = (x - mid)/half  ->  a (x + b)^2 + c
  const double a = p(0) / (half * half);
  const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
  if (std::fabs(p(0)) < 1e-9 * scale) throw ConfigError("fit_poly2: degenerate fit (a ~ 0)");
  const double vertex_t = -p(1) / (2.0 * p(0));
  const double b = -(mid + half * vertex_t);
  const double c = p(2) - p(1) * p(1) / (4.0 * p(0));

  FitResult r;
  r.coeffs = {a, b, c, lo, hi};
  double sq = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(samples - 1);
    const double e = std::fabs(r.coeffs(x) - y(i));
    r.max_abs_err = std::max(r.max_abs_err, e);
    sq += e * e;
  }
  r.rms_err = std::sqrt(sq / static_cast<double>(samples));
  return r;
}

/// exp on [-ln2, 0].
inline FitResult fit_exp() {
  return fit_poly2([](double x) { return std::exp(x); }, -std::numbers::ln2, 0.0);
}

/// erf on its clip interval [0, -b]: the fit interval is iterated until it
/// coincides with the vertex the fit itself produces.
inline FitResult fit_erf() {
  double hi = 2.0;
  FitResult r;
  for (int it = 0; it < 200; ++it) {
    r = fit_poly2([](double x) { return std::erf(x); }, 0.0, hi);
    const double next = -r.coeffs.b;
    if (!(next > 0.0)) throw ConfigError("fit_erf: vertex left the positive axis");
    if (std::fabs(next - hi) < 1e-12) break;
    hi = next;
  }
  return r;
}

struct FitSet {
  FitResult exp;
  FitResult erf;
};

inline FitSet fit_all() { return {fit_exp(), fit_erf()}; }

// ---------------------------------------------------------------------------
// Float encoder
// ---------------------------------------------------------------------------

struct FloatHead {
  Mat wq, wk, wv;  // d x d_h
  RowVec bq, bk, bv;
};

struct FloatLayer {
  std::vector<FloatHead> heads;
  Mat wo;  // d x d
  RowVec bo;
  Mat w1;  // d x d_ff
  RowVec b1;
  Mat w2;  // d_ff x d
  RowVec b2;
  RowVec ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct FloatModel {
  std::vector<FloatLayer> layers;
};

/// Called with every junction value during a float forward pass.
using Tap = std::function<void(const std::string& name, const Mat& value)>;

inline Mat add_bias(Mat x, const RowVec& b) {
  x.rowwise() += b;
  return x;
}

inline Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto r = softmax(std::span<const double>(x.row(i).data(), static_cast<std::size_t>(x.cols())));
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = r[static_cast<std::size_t>(j)];
  }
  return out;
}

inline Mat layernorm_rows(const Mat& x, const RowVec& gamma, const RowVec& beta) {
  Mat out(x.rows(), x.cols());
  const auto n = static_cast<std::size_t>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto r = layernorm(std::span<const double>(x.row(i).data(), n),
                             std::span<const double>(gamma.data(), n),
                             std::span<const double>(beta.data(), n));
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = r[static_cast<std::size_t>(j)];
  }
  return out;
}

/// softmax((X Wq + bq)(X Wk + bk)^T * 2^-shift) (X Wv + bv)
inline Mat attention_head(const Mat& x, const FloatHead& h, int shift, const Tap& tap = {},
                          const std::string& prefix = {}) {
  const Mat q = add_bias(x * h.wq, h.bq);
  const Mat k = add_bias(x * h.wk, h.bk);
  const Mat v = add_bias(x * h.wv, h.bv);
  const Mat scores = (q * k.transpose()) * std::ldexp(1.0, -shift);
  const Mat p = softmax_rows(scores);
  Mat o = p * v;
  if (tap) {
    tap(prefix + "q", q);
    tap(prefix + "k", k);
    tap(prefix + "v", v);
    tap(prefix + "scores", scores);
    tap(prefix + "head_out", o);
  }
  return o;
}

inline Mat mhsa(const Mat& x, const FloatLayer& w, int shift, const Tap& tap = {},
                const std::string& prefix = {}) {
  const Eigen::Index dh = w.heads.front().wq.cols();
  Mat cat(x.rows(), dh * static_cast<Eigen::Index>(w.heads.size()));
  for (std::size_t h = 0; h < w.heads.size(); ++h) {
    const std::string hp = prefix + "h" + std::to_string(h) + ".";
    cat.middleCols(static_cast<Eigen::Index>(h) * dh, dh) = attention_head(x, w.heads[h], shift, tap, hp);
  }
  if (tap) tap(prefix + "cat", cat);
  return add_bias(cat * w.wo, w.bo);
}

inline Mat ffn(const Mat& x, const FloatLayer& w, const Tap& tap = {}, const std::string& prefix = {}) {
  const Mat pre = add_bias(x * w.w1, w.b1);
  const Mat act = pre.unaryExpr([](double v) { return gelu(v); });
  if (tap) {
    tap(prefix + "pre_gelu", pre);
    tap(prefix + "gelu", act);
  }
  return add_bias(act * w.w2, w.b2);
}

inline Mat encoder_layer(const Mat& x, const FloatLayer& w, int shift, const Tap& tap = {},
                         const std::string& prefix = {}) {
  if (tap) tap(prefix + "in", x);
  const Mat attn = mhsa(x, w, shift, tap, prefix);
  const Mat res1 = x + attn;
  const Mat h = layernorm_rows(res1, w.ln1_gamma, w.ln1_beta);
  const Mat f = ffn(h, w, tap, prefix);
  const Mat res2 = h + f;
  Mat y = layernorm_rows(res2, w.ln2_gamma, w.ln2_beta);
  if (tap) {
    tap(prefix + "attn", attn);
    tap(prefix + "res1", res1);
    tap(prefix + "ln1", h);
    tap(prefix + "ffn", f);
    tap(prefix + "res2", res2);
    tap(prefix + "ln2", y);
  }
  return y;
}

inline std::string layer_prefix(std::size_t l) { return "L" + std::to_string(l) + "."; }

inline Mat encoder(const Mat& x, const FloatModel& model, int shift, const Tap& tap = {}) {
  Mat h = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    h = encoder_layer(h, model.layers[l], shift, tap, layer_prefix(l));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Toy weights and samples
// ---------------------------------------------------------------------------

/// Values are rounded to float32 so a package written with 32-bit blobs
/// reloads to exactly the same model.
inline double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f32(dist(rng));
  return m;
}

inline RowVec random_vec(std::mt19937_64& rng, Eigen::Index n, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  RowVec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = f32(dist(rng));
  return v;
}

inline FloatModel make_toy_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const auto dh = static_cast<Eigen::Index>(cfg.d_head());
  const auto dff = static_cast<Eigen::Index>(cfg.d_ff);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  const double sd_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  FloatModel model;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    FloatLayer w;
    for (std::size_t h = 0; h < cfg.k_heads; ++h) {
      FloatHead fh;
      fh.wq = random_mat(rng, d, dh, sd_d);
      fh.wk = random_mat(rng, d, dh, sd_d);
      fh.wv = random_mat(rng, d, dh, sd_d);
      fh.bq = random_vec(rng, dh, 0.0, 0.02);
      fh.bk = random_vec(rng, dh, 0.0, 0.02);
      fh.bv = random_vec(rng, dh, 0.0, 0.02);
      w.heads.push_back(std::move(fh));
    }
    w.wo = random_mat(rng, d, d, sd_d);
    w.bo = random_vec(rng, d, 0.0, 0.02);
    w.w1 = random_mat(rng, d, dff, sd_d);
    w.b1 = random_vec(rng, dff, 0.0, 0.02);
    w.w2 = random_mat(rng, dff, d, sd_ff);
    w.b2 = random_vec(rng, d, 0.0, 0.02);
    w.ln1_gamma = random_vec(rng, d, 1.0, 0.1);
    w.ln1_beta = random_vec(rng, d, 0.0, 0.05);
    w.ln2_gamma = random_vec(rng, d, 1.0, 0.1);
    w.ln2_beta = random_vec(rng, d, 0.0, 0.05);
    model.layers.push_back(std::move(w));
  }
  return model;
}

/// Standard-normal input sequences (m x d), standing in for embeddings after
/// positional encoding.
inline std::vector<Mat> make_samples(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Mat> out;
  for (std::size_t s = 0; s < count; ++s) {
    out.push_back(random_mat(rng, static_cast<Eigen::Index>(cfg.m), static_cast<Eigen::Index>(cfg.d), 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationOptions {
  bool percentile = false;
  double percentile_value = 99.9;
  double min_scale = 1e-6;
};

struct JunctionStat {
  double max_abs = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> magnitudes;  // kept only for percentile clipping
};

/// Per-junction activation statistics from a float calibration run.
struct CalibrationSet {
  std::map<std::string, JunctionStat> stats;
  CalibrationOptions options;

  bool contains(const std::string& name) const { return stats.count(name) != 0; }

  /// Clipping magnitude for the junction: max |x|, or the configured percentile.
  double range(const std::string& name) const {
    const auto it = stats.find(name);
    if (it == stats.end()) throw ConfigError("no calibration statistic for junction '" + name + "'");
    const JunctionStat& s = it->second;
    if (!options.percentile || s.magnitudes.empty()) return s.max_abs;
    std::vector<double> mags = s.magnitudes;
    const auto rank = static_cast<std::size_t>(
        std::ceil(options.percentile_value / 100.0 * static_cast<double>(mags.size())) - 1);
    const auto idx = std::min(rank, mags.size() - 1);
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(idx), mags.end());
    return mags[idx];
  }

  /// Symmetric scale mapping the junction range onto +-levels.
  Scale scale(const std::string& name, double levels = 127.0) const {
    return Scale(std::max(range(name) / levels, options.min_scale));
  }
};

inline CalibrationSet calibrate(const FloatModel& model, std::span<const Mat> samples,
                                const ModelConfig& cfg, CalibrationOptions options = {}) {
  CalibrationSet cal;
  cal.options = options;
  const Tap tap = [&](const std::string& name, const Mat& v) {
    JunctionStat& s = cal.stats[name];
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double x = v.data()[i];
      s.max_abs = std::max(s.max_abs, std::fabs(x));
      s.min = std::min(s.min, x);
      s.max = std::max(s.max, x);
      if (options.percentile) s.magnitudes.push_back(std::fabs(x));
    }
  };
  for (const Mat& x : samples) encoder(x, model, cfg.attention_shift(), tap);
  return cal;
}

}  // namespace qtx::ref
