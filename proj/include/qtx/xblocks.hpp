// SPDX-License-Identifier: Apache-2.0
//
// Transformer sub-blocks assembled from the integer primitives: attention
// head, multi-head self attention, feed-forward network, residual +
// LayerNorm, and the encoder layer. Every junction between blocks carries a
// scale frozen at calibration time.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "qtx/config.hpp"
#include "qtx/errors.hpp"
#include "qtx/intkernels.hpp"
#include "qtx/macarray.hpp"
#include "qtx/quantcore.hpp"
#include "qtx/refmodel.hpp"
#include "qtx/timing.hpp"

namespace qtx {

/// Polynomial kernels lose their int32 headroom on very fine input scales;
/// inputs finer than this are coarsened by a power-of-two right shift first.
inline constexpr double kMinKernelInputScale = 1.0 / 8192.0;

/// Softmax output scale inside the attention unit, before requantization to INT8.
inline constexpr double kSoftmaxScale = 1.0 / 16384.0;

/// LayerNorm output scale (normalized values at 1/128 resolution).
inline constexpr double kLayerNormScale = 1.0 / 128.0;

/// Residual sums are held as int32 with 12-bit magnitude headroom, which keeps
/// the LayerNorm variance inside [0, 2^24].
inline constexpr double kResidualLevels = 2047.0;

/// Requantization target: a scale plus the dyadic precision used to reach it.
struct Junction {
  Scale scale;
  int shift = kDefaultDyadicShift;
};

struct HeadWeights {
  QMat8 wq, wk, wv;
  Bias bq, bk, bv;  // at the projection accumulator scale
  Junction q, k, v;
  Junction cat;         // P*V output to the shared concatenation scale
  int score_shift = 0;  // attention Scale shift + input coarsening
  ExpConsts exp;        // at the shifted score scale
};

struct LayerWeights {
  Scale in_scale;
  int attn_shift = 0;
  std::vector<HeadWeights> heads;
  Junction prob;  // softmax probabilities as INT8
  Scale cat_scale;  // head outputs, one shared scale for the output MatMul
  QMat8 wo;
  Bias bo;
  Junction res1;
  LnConsts ln1;
  Junction ln1_out;
  QMat8 w1;
  Bias b1;
  int gelu_coarsen = 0;
  GeluConsts gelu;
  Junction gelu_out;
  QMat8 w2;
  Bias b2;
  Junction res2;
  LnConsts ln2;
  Junction out;
};

struct QuantModel {
  ModelConfig config;
  ref::FitSet fits;
  Scale input_scale;
  std::vector<LayerWeights> layers;
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

struct HeadOutput {
  QMat32 out;  // P*V at scale S_p * S_v
  HeadTiming timing;
};

struct BlockOutput {
  QMat32 out;
  std::uint64_t cycles = 0;
};

inline void check_shape(const QMat8& x, std::size_t rows, std::size_t cols, const char* what) {
  if (x.rows != rows || x.cols != cols) {
    throw UsageError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " input, got " + std::to_string(x.rows) + "x" +
                     std::to_string(x.cols));
  }
}

/// Scaled dot-product attention for one head.
inline HeadOutput attention_head(const QMat8& x, const HeadWeights& h, const LayerWeights& lw,
                                 const ModelConfig& cfg, SaturationStats* stats = nullptr) {
  check_shape(x, cfg.m, cfg.d, "attention_head");
  auto q = matmul(x, h.wq, h.bq, cfg.tile);
  auto k = matmul(x, h.wk, h.bk, cfg.tile);
  auto v = matmul(x, h.wv, h.bv, cfg.tile);
  const QMat8 q8 = requantize(q.out, h.q.scale, h.q.shift, stats);
  const QMat8 k8 = requantize(k.out, h.k.scale, h.k.shift, stats);
  const QMat8 v8 = requantize(v.out, h.v.scale, h.v.shift, stats);

  auto a = matmul(q8, transpose(k8), std::nullopt, cfg.tile);
  QMat32 scores(a.out.rows, a.out.cols, h.exp.s_e);
  for (std::size_t i = 0; i < scores.data.size(); ++i) scores.data[i] = a.out.data[i] >> h.score_shift;

  const QMat32 p32 = softmax_rows(scores, h.exp, Scale(kSoftmaxScale), 32, stats);
  const QMat8 p8 = requantize(p32, lw.prob.scale, lw.prob.shift, stats);
  auto o = matmul(p8, v8, std::nullopt, cfg.tile);

  if (stats) stats->accumulator += q.saturations + k.saturations + v.saturations + a.saturations + o.saturations;
  HeadTiming t{std::max({q.cycles, k.cycles, v.cycles}), a.cycles,
               pipeline_cycles(cfg.m, kSoftmaxStages), o.cycles};
  return {std::move(o.out), t};
}

struct MhsaOutput {
  QMat32 out;  // Cat * Wo + bo
  MhsaTiming timing;
};

/// All heads plus the output MatMul, which accumulates each head batch as it
/// arrives. `head_order` permutes the processing order (default 0..k-1).
inline MhsaOutput mhsa(const QMat8& x, const LayerWeights& lw, const ModelConfig& cfg,
                       SaturationStats* stats = nullptr,
                       std::optional<std::vector<std::size_t>> head_order = std::nullopt) {
  check_shape(x, cfg.m, cfg.d, "mhsa");
  const std::size_t dh = cfg.d_head();
  std::vector<std::size_t> order(cfg.k_heads);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (head_order) {
    std::vector<std::size_t> sorted = *head_order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != order) throw UsageError("mhsa: head_order must be a permutation of the heads");
    order = *head_order;
  }

  // Output MatMul arrays, one per output tile, kept alive across head batches.
  const std::size_t m = cfg.m, n = cfg.d;
  const std::size_t tr = cfg.tile.rows ? std::min(cfg.tile.rows, m) : m;
  const std::size_t tc = cfg.tile.cols ? std::min(cfg.tile.cols, n) : n;
  struct TileArray {
    std::size_t i0, j0;
    MacArray arr;
  };
  std::vector<TileArray> tiles;
  for (std::size_t i0 = 0; i0 < m; i0 += tr) {
    for (std::size_t j0 = 0; j0 < n; j0 += tc) {
      const std::size_t cols = std::min(tc, n - j0);
      TileArray t{i0, j0, MacArray(std::min(tr, m - i0), cols)};
      t.arr.begin(cfg.d, Bias{{lw.bo.values.begin() + static_cast<std::ptrdiff_t>(j0),
                               lw.bo.values.begin() + static_cast<std::ptrdiff_t>(j0 + cols)},
                              lw.bo.align});
      tiles.push_back(std::move(t));
    }
  }

  MhsaOutput res;
  const std::size_t per_batch = cfg.heads_per_batch();
  std::vector<std::int8_t> row_in, col_in;
  for (std::size_t b0 = 0; b0 < order.size(); b0 += per_batch) {
    HeadTiming batch{};
    const std::size_t b1 = std::min(order.size(), b0 + per_batch);
    for (std::size_t bi = b0; bi < b1; ++bi) {
      const std::size_t h = order[bi];
      HeadOutput ho = attention_head(x, lw.heads[h], lw, cfg, stats);
      const QMat8 o8 = requantize(ho.out, lw.heads[h].cat.scale, lw.heads[h].cat.shift, stats);
      // Heads in a batch run concurrently.
      batch.qkv = std::max(batch.qkv, ho.timing.qkv);
      batch.qk = std::max(batch.qk, ho.timing.qk);
      batch.softmax = std::max(batch.softmax, ho.timing.softmax);
      batch.pv = std::max(batch.pv, ho.timing.pv);
      // Feed this head's slice of the inner dimension into the output arrays.
      for (TileArray& t : tiles) {
        row_in.resize(t.arr.rows());
        col_in.resize(t.arr.cols());
        for (std::size_t p = 0; p < dh; ++p) {
          const std::size_t inner = h * dh + p;
          for (std::size_t i = 0; i < t.arr.rows(); ++i) row_in[i] = o8.at(t.i0 + i, p);
          for (std::size_t j = 0; j < t.arr.cols(); ++j) col_in[j] = lw.wo.at(inner, t.j0 + j);
          t.arr.step_accumulate(row_in, col_in);
        }
      }
    }
    res.timing.batches.push_back(batch);
  }

  res.out = QMat32(m, n, lw.cat_scale * lw.wo.scale);
  for (TileArray& t : tiles) {
    for (std::size_t j = 0; j < t.arr.cols(); ++j) {
      const auto col = t.arr.read_column(j, true);
      for (std::size_t i = 0; i < t.arr.rows(); ++i) res.out.at(t.i0 + i, t.j0 + j) = col[i];
    }
    res.timing.wo += t.arr.cycles();
    if (stats) stats->accumulator += t.arr.saturation_events();
  }
  return res;
}

struct FfnOutput {
  QMat32 out;
  FfnTiming timing;
};

/// X*W1 + b1 -> GELU -> requantize -> *W2 + b2.
inline FfnOutput ffn(const QMat8& x, const LayerWeights& lw, const ModelConfig& cfg,
                     SaturationStats* stats = nullptr) {
  check_shape(x, cfg.m, cfg.d, "ffn");
  auto f1 = matmul(x, lw.w1, lw.b1, cfg.tile);
  QMat32 pre(f1.out.rows, f1.out.cols, lw.gelu.s);
  for (std::size_t i = 0; i < pre.data.size(); ++i) {
    pre.data[i] = static_cast<std::int32_t>(round_shift(f1.out.data[i], lw.gelu_coarsen));
  }
  const QMat32 act = gelu_map(pre, lw.gelu, stats);
  const QMat8 g8 = requantize(act, lw.gelu_out.scale, lw.gelu_out.shift, stats);
  auto f2 = matmul(g8, lw.w2, lw.b2, cfg.tile);
  if (stats) stats->accumulator += f1.saturations + f2.saturations;
  return {std::move(f2.out), {f1.cycles, f2.cycles}};
}

struct NormOutput {
  QMat8 out;
  LnTiming timing;
};

/// LayerNorm(rescale_add(residual, block_out)) requantized to INT8.
inline NormOutput residual_layernorm(const QMat8& residual, const QMat32& block_out,
                                     const Junction& sum_junction, const LnConsts& ln,
                                     const Junction& out_junction, const ModelConfig& cfg,
                                     SaturationStats* stats = nullptr) {
  const QMat32 sum = rescale_add(widen(residual), block_out, sum_junction.scale, sum_junction.shift, stats);
  const LayerNormRows normed = layernorm_rows(sum, ln, stats);
  return {requantize(normed.out, out_junction.scale, out_junction.shift, stats),
          {pipeline_cycles(cfg.d, kLayerNormStages), normed.max_sqrt_iterations}};
}

struct LayerOutput {
  QMat8 out;
  LayerTiming timing;
};

inline LayerOutput encoder_layer(const QMat8& x, const LayerWeights& lw, const ModelConfig& cfg,
                                 SaturationStats* stats = nullptr) {
  if (std::fabs(x.scale.value() / lw.in_scale.value() - 1.0) > 1e-12) {
    throw UsageError("encoder_layer: input scale does not match the layer's declared input scale");
  }
  MhsaOutput attn = mhsa(x, lw, cfg, stats);
  NormOutput h = residual_layernorm(x, attn.out, lw.res1, lw.ln1, lw.ln1_out, cfg, stats);
  FfnOutput f = ffn(h.out, lw, cfg, stats);
  NormOutput y = residual_layernorm(h.out, f.out, lw.res2, lw.ln2, lw.out, cfg, stats);
  LayerTiming t{std::move(attn.timing), h.timing, f.timing, y.timing, cfg.control_overhead};
  return {std::move(y.out), std::move(t)};
}

struct EncoderOutput {
  QMat8 out;
  std::vector<QMat8> layer_outputs;
  std::vector<LayerTiming> timings;
};

inline EncoderOutput run_encoder(const QuantModel& model, const QMat8& x,
                                 SaturationStats* stats = nullptr) {
  EncoderOutput res;
  QMat8 h = x;
  for (const LayerWeights& lw : model.layers) {
    LayerOutput lo = encoder_layer(h, lw, model.config, stats);
    res.timings.push_back(std::move(lo.timing));
    res.layer_outputs.push_back(lo.out);
    h = std::move(lo.out);
  }
  res.out = std::move(h);
  return res;
}

// ---------------------------------------------------------------------------
// Building integer layers from float weights and calibration statistics
// ---------------------------------------------------------------------------

inline QMat8 quantize_weights(const ref::Mat& w, double min_scale = 1e-6) {
  const double max_abs = w.size() ? w.cwiseAbs().maxCoeff() : 0.0;
  const Scale s(std::max(max_abs / 127.0, min_scale));
  return quantize(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                  static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()), s);
}

/// Bias stored directly at the accumulator scale.
inline Bias quantize_bias(const ref::RowVec& b, Scale acc_scale) {
  Bias out;
  for (Eigen::Index i = 0; i < b.size(); ++i) out.values.push_back(quantize_i32(b(i), acc_scale));
  return out;
}

inline Junction make_junction(Scale from, Scale to) {
  return {to, choose_dyadic_shift(from.value() / to.value())};
}

/// Smallest power-of-two coarsening that brings `s` up to the kernel minimum.
inline int coarsen_shift(Scale s) {
  int shift = 0;
  while (std::ldexp(s.value(), shift) < kMinKernelInputScale && shift < 31) ++shift;
  return shift;
}

inline LayerWeights quantize_layer(const ref::FloatLayer& w, const ref::CalibrationSet& cal,
                                   std::size_t layer, Scale in_scale, const ref::FitSet& fits,
                                   const ModelConfig& cfg) {
  const std::string p = ref::layer_prefix(layer);
  LayerWeights lw;
  lw.in_scale = in_scale;
  lw.attn_shift = cfg.attention_shift();
  lw.prob = {Scale(1.0 / 127.0), choose_dyadic_shift(kSoftmaxScale * 127.0)};

  for (std::size_t h = 0; h < w.heads.size(); ++h) {
    const ref::FloatHead& fh = w.heads[h];
    const std::string hp = p + "h" + std::to_string(h) + ".";
    HeadWeights hw;
    hw.wq = quantize_weights(fh.wq);
    hw.wk = quantize_weights(fh.wk);
    hw.wv = quantize_weights(fh.wv);
    hw.bq = quantize_bias(fh.bq, in_scale * hw.wq.scale);
    hw.bk = quantize_bias(fh.bk, in_scale * hw.wk.scale);
    hw.bv = quantize_bias(fh.bv, in_scale * hw.wv.scale);
    hw.q = make_junction(in_scale * hw.wq.scale, cal.scale(hp + "q"));
    hw.k = make_junction(in_scale * hw.wk.scale, cal.scale(hp + "k"));
    hw.v = make_junction(in_scale * hw.wv.scale, cal.scale(hp + "v"));
    const Scale acc = hw.q.scale * hw.k.scale;
    const int coarsen = coarsen_shift(acc);
    hw.score_shift = lw.attn_shift + coarsen;
    hw.exp = ExpConsts::make(Scale(std::ldexp(acc.value(), coarsen)), fits.exp.coeffs);
    lw.heads.push_back(std::move(hw));
  }
  lw.cat_scale = cal.scale(p + "cat");
  for (HeadWeights& hw : lw.heads) hw.cat = make_junction(lw.prob.scale * hw.v.scale, lw.cat_scale);
  lw.wo = quantize_weights(w.wo);
  lw.bo = quantize_bias(w.bo, lw.cat_scale * lw.wo.scale);

  const Scale attn_scale = lw.cat_scale * lw.wo.scale;
  lw.res1 = {cal.scale(p + "res1", kResidualLevels), 0};
  lw.res1.shift = std::min(choose_dyadic_shift(in_scale.value() / lw.res1.scale.value()),
                           choose_dyadic_shift(attn_scale.value() / lw.res1.scale.value()));
  const auto n = static_cast<std::size_t>(w.ln1_gamma.size());
  lw.ln1 = LnConsts::make({w.ln1_gamma.data(), n}, {w.ln1_beta.data(), n}, Scale(kLayerNormScale));
  lw.ln1_out = make_junction(Scale(kLayerNormScale), cal.scale(p + "ln1"));

  lw.w1 = quantize_weights(w.w1);
  const Scale f1_scale = lw.ln1_out.scale * lw.w1.scale;
  lw.b1 = quantize_bias(w.b1, f1_scale);
  lw.gelu_coarsen = coarsen_shift(f1_scale);
  lw.gelu = GeluConsts::make(Scale(std::ldexp(f1_scale.value(), lw.gelu_coarsen)), fits.erf.coeffs);
  lw.gelu_out = make_junction(lw.gelu.s_out, cal.scale(p + "gelu"));
  lw.w2 = quantize_weights(w.w2);
  lw.b2 = quantize_bias(w.b2, lw.gelu_out.scale * lw.w2.scale);

  const Scale ffn_scale = lw.gelu_out.scale * lw.w2.scale;
  lw.res2 = {cal.scale(p + "res2", kResidualLevels), 0};
  lw.res2.shift = std::min(choose_dyadic_shift(lw.ln1_out.scale.value() / lw.res2.scale.value()),
                           choose_dyadic_shift(ffn_scale.value() / lw.res2.scale.value()));
  lw.ln2 = LnConsts::make({w.ln2_gamma.data(), n}, {w.ln2_beta.data(), n}, Scale(kLayerNormScale));
  lw.out = make_junction(Scale(kLayerNormScale), cal.scale(p + "ln2"));
  return lw;
}

inline QuantModel quantize_model(const ref::FloatModel& fm, const ref::CalibrationSet& cal,
                                 const ref::FitSet& fits, const ModelConfig& cfg) {
  cfg.validate();
  QuantModel qm;
  qm.config = cfg;
  qm.fits = fits;
  qm.input_scale = cal.scale("L0.in");
  Scale in = qm.input_scale;
  for (std::size_t l = 0; l < fm.layers.size(); ++l) {
    qm.layers.push_back(quantize_layer(fm.layers[l], cal, l, in, fits, cfg));
    in = qm.layers.back().out.scale;
  }
  return qm;
}

inline QMat8 quantize_input(const ref::Mat& x, Scale s, SaturationStats* stats = nullptr) {
  return quantize(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                  static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(x.cols()), s, stats);
}

template <typename T>
ref::Mat to_real(const QMat<T>& q) {
  ref::Mat m(static_cast<Eigen::Index>(q.rows), static_cast<Eigen::Index>(q.cols));
  for (std::size_t i = 0; i < q.data.size(); ++i) m.data()[i] = q.data[i] * q.scale.value();
  return m;
}

inline ref::RowVec bias_to_real(const Bias& b, Scale acc_scale) {
  ref::RowVec v(static_cast<Eigen::Index>(b.values.size()));
  for (std::size_t i = 0; i < b.values.size(); ++i) {
    v(static_cast<Eigen::Index>(i)) = b.values[i] * b.align.value() * acc_scale.value();
  }
  return v;
}

/// Float layer holding exactly the quantized weights, for oracle comparisons
/// that should isolate datapath error from weight quantization.
inline ref::FloatLayer dequantized_layer(const LayerWeights& lw, const ref::FloatLayer& original) {
  ref::FloatLayer f = original;
  for (std::size_t h = 0; h < lw.heads.size(); ++h) {
    const HeadWeights& hw = lw.heads[h];
    f.heads[h].wq = to_real(hw.wq);
    f.heads[h].wk = to_real(hw.wk);
    f.heads[h].wv = to_real(hw.wv);
    f.heads[h].bq = bias_to_real(hw.bq, lw.in_scale * hw.wq.scale);
    f.heads[h].bk = bias_to_real(hw.bk, lw.in_scale * hw.wk.scale);
    f.heads[h].bv = bias_to_real(hw.bv, lw.in_scale * hw.wv.scale);
  }
  f.wo = to_real(lw.wo);
  f.bo = bias_to_real(lw.bo, lw.cat_scale * lw.wo.scale);
  f.w1 = to_real(lw.w1);
  f.b1 = bias_to_real(lw.b1, lw.ln1_out.scale * lw.w1.scale);
  f.w2 = to_real(lw.w2);
  f.b2 = bias_to_real(lw.b2, lw.gelu_out.scale * lw.w2.scale);
  return f;
}

}  // namespace qtx
