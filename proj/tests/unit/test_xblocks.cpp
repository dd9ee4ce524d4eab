// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "qtx/refmodel.hpp"
#include "qtx/xblocks.hpp"

using namespace qtx;

namespace {

ModelConfig small_config(std::size_t m = 8) {
  ModelConfig c;
  c.d = 16;
  c.k_heads = 4;
  c.m = m;
  c.d_ff = 32;
  c.n_layers = 1;
  return c;
}

const ref::FitSet& fits() {
  static const ref::FitSet f = ref::fit_all();
  return f;
}

struct Built {
  ModelConfig cfg;
  ref::FloatModel fm;
  QuantModel qm;
};

Built build(const ModelConfig& cfg, std::uint64_t seed, bool zero_bias = false) {
  Built b{cfg, ref::make_toy_model(cfg, seed), {}};
  if (zero_bias) {
    for (auto& l : b.fm.layers) {
      for (auto& h : l.heads) {
        h.bq.setZero();
        h.bk.setZero();
        h.bv.setZero();
      }
      l.bo.setZero();
      l.b1.setZero();
      l.b2.setZero();
    }
  }
  const auto xs = ref::make_samples(cfg, 32, seed + 100);
  const ref::CalibrationSet cal = ref::calibrate(b.fm, xs, cfg);
  b.qm = quantize_model(b.fm, cal, fits(), cfg);
  return b;
}

QMat8 input(const Built& b, std::uint64_t seed) {
  return quantize_input(ref::make_samples(b.cfg, 1, seed).front(), b.qm.input_scale);
}

double max_abs_diff(const ref::Mat& a, const ref::Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

double cosine(const ref::Mat& a, const ref::Mat& b) { return a.cwiseProduct(b).sum() / (a.norm() * b.norm()); }

// Float values snapped to an INT8 junction grid, as the integer pipeline stores them.
ref::Mat on_grid(const ref::Mat& m, double s) {
  return m.unaryExpr([s](double v) { return std::clamp(std::nearbyint(v / s), -128.0, 127.0) * s; });
}

// Float attention with Q, K, V snapped to their junction grids.
ref::Mat junction_head(const ref::Mat& x, const ref::FloatHead& fh, const HeadWeights& hw, int shift) {
  const ref::Mat q = on_grid(ref::add_bias(x * fh.wq, fh.bq), hw.q.scale.value());
  const ref::Mat k = on_grid(ref::add_bias(x * fh.wk, fh.bk), hw.k.scale.value());
  const ref::Mat v = on_grid(ref::add_bias(x * fh.wv, fh.bv), hw.v.scale.value());
  return ref::softmax_rows(q * k.transpose() * std::ldexp(1.0, -shift)) * v;
}

}  // namespace

TEST(AttentionHead, SingleTokenReturnsValueRow) {
  const Built b = build(small_config(1), 1);
  const LayerWeights& lw = b.qm.layers[0];
  const QMat8 x = input(b, 7);
  for (const HeadWeights& h : lw.heads) {
    const HeadOutput o = attention_head(x, h, lw, b.cfg);
    const QMat8 v8 = requantize(matmul(x, h.wv, h.bv).out, h.v.scale, h.v.shift);
    for (std::size_t j = 0; j < v8.cols; ++j) {
      EXPECT_NEAR(o.out.dequant(0, j), v8.dequant(0, j), 2 * o.out.scale.value() + 1e-12);
    }
  }
}

TEST(AttentionHead, ZeroInputZeroBiasGivesZero) {
  const Built b = build(small_config(), 2, true);
  const QMat8 x(b.cfg.m, b.cfg.d, b.qm.input_scale);
  const LayerWeights& lw = b.qm.layers[0];
  const HeadOutput o = attention_head(x, lw.heads[0], lw, b.cfg);
  for (const auto v : o.out.data) EXPECT_EQ(v, 0);
}

TEST(AttentionHead, MatchesJunctionOracle) {
  const Built b = build(small_config(), 3);
  const LayerWeights& lw = b.qm.layers[0];
  const ref::FloatLayer fl = dequantized_layer(lw, b.fm.layers[0]);
  for (std::uint64_t s = 0; s < 8; ++s) {
    const QMat8 x = input(b, 50 + s);
    const ref::Mat xr = to_real(x);
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      const HeadWeights& hw = lw.heads[h];
      const ref::FloatHead& fh = fl.heads[h];
      const ref::Mat want = junction_head(xr, fh, hw, lw.attn_shift);
      const HeadOutput o = attention_head(x, hw, lw, b.cfg);
      EXPECT_LE(max_abs_diff(to_real(o.out), want), 0.05) << "sample " << s << " head " << h;
      EXPECT_GE(cosine(to_real(o.out), ref::attention_head(xr, fh, lw.attn_shift)), 0.99);
    }
  }
}

TEST(AttentionHead, CyclesFollowShapes) {
  const Built b = build(small_config(), 3);
  const LayerWeights& lw = b.qm.layers[0];
  const HeadOutput o = attention_head(input(b, 1), lw.heads[0], lw, b.cfg);
  const HeadTiming want{matmul_cycles(8, 16, 4, {}), matmul_cycles(8, 4, 8, {}), 8 + 2, matmul_cycles(8, 8, 4, {})};
  EXPECT_EQ(o.timing, want);
  EXPECT_THROW(attention_head(QMat8(8, 15, Scale(1.0)), lw.heads[0], lw, b.cfg), UsageError);
}

TEST(Mhsa, SingleHeadIsHeadThenOutputProjection) {
  ModelConfig cfg = small_config();
  cfg.k_heads = 1;
  const Built b = build(cfg, 4);
  const LayerWeights& lw = b.qm.layers[0];
  const QMat8 x = input(b, 9);
  const HeadOutput ho = attention_head(x, lw.heads[0], lw, cfg);
  const QMat8 cat = requantize(ho.out, lw.heads[0].cat.scale, lw.heads[0].cat.shift);
  const MatmulResult want = matmul(cat, lw.wo, lw.bo);
  const MhsaOutput got = mhsa(x, lw, cfg);
  EXPECT_EQ(got.out.data, want.out.data);
  EXPECT_EQ(got.out.scale, want.out.scale);
}

TEST(Mhsa, HeadParallelismChangesOnlyCycles) {
  Built b = build(small_config(), 5);
  const QMat8 x = input(b, 10);
  const LayerWeights& lw = b.qm.layers[0];
  ModelConfig one = b.cfg, all = b.cfg;
  one.heads_parallel = 1;
  all.heads_parallel = 4;
  const MhsaOutput a = mhsa(x, lw, one), c = mhsa(x, lw, all);
  EXPECT_EQ(a.out.data, c.out.data);
  EXPECT_EQ(a.timing.batches.size(), 4u);
  EXPECT_EQ(c.timing.batches.size(), 1u);
  EXPECT_GT(a.timing.total(), c.timing.total());
  EXPECT_EQ(a.timing.total(), predict_mhsa(one).total());
  EXPECT_EQ(c.timing.total(), predict_mhsa(all).total());
}

TEST(Mhsa, TiledOutputProjectionIsInvariant) {
  Built b = build(small_config(), 5);
  const QMat8 x = input(b, 10);
  ModelConfig tiled = b.cfg;
  tiled.tile = {3, 5};
  const MhsaOutput a = mhsa(x, b.qm.layers[0], b.cfg), c = mhsa(x, b.qm.layers[0], tiled);
  EXPECT_EQ(a.out.data, c.out.data);
  EXPECT_EQ(c.timing.total(), predict_mhsa(tiled).total());
}

TEST(Mhsa, HeadOrderInvariance) {
  const Built b = build(small_config(), 6);
  const QMat8 x = input(b, 11);
  const MhsaOutput base = mhsa(x, b.qm.layers[0], b.cfg);
  std::vector<std::size_t> order{3, 1, 0, 2};
  const MhsaOutput perm = mhsa(x, b.qm.layers[0], b.cfg, nullptr, order);
  EXPECT_EQ(base.out.data, perm.out.data);
  EXPECT_THROW(mhsa(x, b.qm.layers[0], b.cfg, nullptr, std::vector<std::size_t>{0, 0, 1, 2}), UsageError);
}

TEST(Mhsa, MatchesJunctionOracle) {
  const Built b = build(small_config(), 7);
  const LayerWeights& lw = b.qm.layers[0];
  const ref::FloatLayer fl = dequantized_layer(lw, b.fm.layers[0]);
  const Eigen::Index dh = static_cast<Eigen::Index>(b.cfg.d_head());
  for (std::uint64_t s = 0; s < 8; ++s) {
    const QMat8 x = input(b, 60 + s);
    const ref::Mat xr = to_real(x);
    ref::Mat cat(xr.rows(), dh * static_cast<Eigen::Index>(lw.heads.size()));
    for (std::size_t h = 0; h < lw.heads.size(); ++h) {
      cat.middleCols(static_cast<Eigen::Index>(h) * dh, dh) =
          on_grid(junction_head(xr, fl.heads[h], lw.heads[h], lw.attn_shift), lw.cat_scale.value());
    }
    const ref::Mat want = ref::add_bias(cat * fl.wo, fl.bo);
    const MhsaOutput o = mhsa(x, lw, b.cfg);
    EXPECT_LE(max_abs_diff(to_real(o.out), want), 0.05) << s;
    EXPECT_GE(cosine(to_real(o.out), ref::mhsa(xr, fl, lw.attn_shift)), 0.99) << s;
  }
}

TEST(Ffn, ZeroInputZeroBias) {
  const Built b = build(small_config(), 8, true);
  const FfnOutput o = ffn(QMat8(b.cfg.m, b.cfg.d, b.qm.layers[0].ln1_out.scale), b.qm.layers[0], b.cfg);
  for (const auto v : o.out.data) EXPECT_EQ(v, 0);
}

TEST(Ffn, MatchesJunctionOracle) {
  const Built b = build(small_config(), 9);
  const LayerWeights& lw = b.qm.layers[0];
  const ref::FloatLayer fl = dequantized_layer(lw, b.fm.layers[0]);
  const double s_g = lw.gelu_out.scale.value();
  const double w2_col = fl.w2.cwiseAbs().colwise().sum().maxCoeff();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int s = 0; s < 8; ++s) {
    ref::Mat h(b.cfg.m, b.cfg.d);
    for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = nd(rng);
    const QMat8 hq = quantize_input(h, lw.ln1_out.scale);
    const ref::Mat f1 = ref::add_bias(to_real(hq) * fl.w1, fl.b1);
    const ref::Mat want = ref::add_bias(on_grid(f1.unaryExpr(&ref::gelu), s_g) * fl.w2, fl.b2);
    // GELU kernel error at these pre-activations, plus one LSB of the GELU
    // junction, spread through a column of W2.
    double kernel_err = 0.0;
    for (Eigen::Index i = 0; i < f1.size(); ++i) {
      const double x = f1.data()[i];
      kernel_err = std::max(kernel_err, 0.5 * std::fabs(x) * std::max(fits().erf.max_abs_err, 1.0 - fits().erf.coeffs.c));
    }
    const double tol = (kernel_err + s_g) * w2_col;
    const FfnOutput o = ffn(hq, lw, b.cfg);
    EXPECT_LE(max_abs_diff(to_real(o.out), want), tol) << s;
    EXPECT_LE(max_abs_diff(to_real(o.out), want), 0.05) << s;
  }
}

TEST(Ffn, ScalarPassthroughTracksGelu) {
  ModelConfig cfg;
  cfg.d = 1;
  cfg.k_heads = 1;
  cfg.m = 1;
  cfg.d_ff = 1;
  cfg.n_layers = 1;
  ref::FloatModel fm = ref::make_toy_model(cfg, 1);
  ref::FloatLayer& l = fm.layers[0];
  l.w1.setConstant(1.0);
  l.w2.setConstant(1.0);
  l.b1.setZero();
  l.b2.setZero();
  std::vector<ref::Mat> xs;
  for (double v : {-3.0, 3.0}) xs.push_back(ref::Mat::Constant(1, 1, v));
  const ref::CalibrationSet cal = ref::calibrate(fm, xs, cfg);
  const QuantModel qm = quantize_model(fm, cal, fits(), cfg);
  const LayerWeights& lw = qm.layers[0];
  for (int q = -127; q <= 127; ++q) {
    const QMat8 h(1, 1, {static_cast<std::int8_t>(q)}, lw.ln1_out.scale);
    const double x = q * lw.ln1_out.scale.value();
    const FfnOutput o = ffn(h, lw, cfg);
    // erf fit error on the clip interval, erf plateau beyond it, and three requantization LSBs
    const double tol = 0.5 * std::fabs(x) * std::max(fits().erf.max_abs_err, 1.0 - fits().erf.coeffs.c) +
                       3 * lw.gelu_out.scale.value();
    EXPECT_NEAR(to_real(o.out)(0, 0), ref::gelu(x), tol) << q;
  }
}

TEST(EncoderLayer, CompositionOfSubOps) {
  const Built b = build(small_config(), 10);
  const LayerWeights& lw = b.qm.layers[0];
  const QMat8 x = input(b, 12);
  const LayerOutput got = encoder_layer(x, lw, b.cfg);

  const MhsaOutput a = mhsa(x, lw, b.cfg);
  const NormOutput h = residual_layernorm(x, a.out, lw.res1, lw.ln1, lw.ln1_out, b.cfg);
  const FfnOutput f = ffn(h.out, lw, b.cfg);
  const NormOutput y = residual_layernorm(h.out, f.out, lw.res2, lw.ln2, lw.out, b.cfg);
  EXPECT_EQ(got.out.data, y.out.data);
  EXPECT_EQ(got.out.scale, lw.out.scale);
  const std::uint64_t sum = a.timing.total() + h.timing.total() + f.timing.total() + y.timing.total();
  EXPECT_EQ(got.timing.total(), sum + LayerTiming::kBlocks * static_cast<std::uint64_t>(b.cfg.control_overhead));
}

TEST(EncoderLayer, RejectsWrongInputScale) {
  const Built b = build(small_config(), 10);
  QMat8 x = input(b, 12);
  x.scale = Scale(x.scale.value() * 2);
  EXPECT_THROW(encoder_layer(x, b.qm.layers[0], b.cfg), UsageError);
}

TEST(EncoderLayer, ResidualJunctionScaleSoundness) {
  // Dequantized residual sums agree with exact real arithmetic on the same
  // integers to within one output LSB.
  const Built b = build(small_config(), 11);
  const LayerWeights& lw = b.qm.layers[0];
  for (std::uint64_t s = 0; s < 4; ++s) {
    const QMat8 x = input(b, 70 + s);
    const MhsaOutput a = mhsa(x, lw, b.cfg);
    const QMat32 sum = rescale_add(widen(x), a.out, lw.res1.scale, lw.res1.shift);
    for (std::size_t i = 0; i < sum.data.size(); ++i) {
      const long double shadow = static_cast<long double>(x.data[i]) * x.scale.value() +
                                 static_cast<long double>(a.out.data[i]) * a.out.scale.value();
      ASSERT_LE(std::fabs(static_cast<long double>(sum.data[i]) * sum.scale.value() - shadow),
                1.0L * sum.scale.value());
    }
  }
}

TEST(EncoderLayer, ProjectionJunctionScaleSoundness) {
  const Built b = build(small_config(), 12);
  const HeadWeights& h = b.qm.layers[0].heads[1];
  const QMat8 x = input(b, 80);
  const QMat8 q8 = requantize(matmul(x, h.wq, h.bq).out, h.q.scale, h.q.shift);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < h.wq.cols; ++j) {
      long double acc = 0;
      for (std::size_t p = 0; p < x.cols; ++p) acc += static_cast<long double>(x.at(i, p)) * h.wq.at(p, j);
      acc = acc * x.scale.value() * h.wq.scale.value() + static_cast<long double>(h.bq.values[j]) * x.scale.value() * h.wq.scale.value();
      const long double want = std::clamp<long double>(std::nearbyint(acc / h.q.scale.value()), -128, 127);
      ASSERT_LE(std::fabs(q8.at(i, j) - want), 1.0L);
    }
  }
}

TEST(Encoder, TwoLayersTrackFloat) {
  ModelConfig cfg = small_config();
  cfg.n_layers = 2;
  const Built b = build(cfg, 13);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const ref::Mat x = ref::make_samples(cfg, 1, 90 + s).front();
    const EncoderOutput o = run_encoder(b.qm, quantize_input(x, b.qm.input_scale));
    const ref::Mat f = ref::encoder(x, b.fm, cfg.attention_shift());
    const ref::Mat q = to_real(o.out);
    EXPECT_GE(q.cwiseProduct(f).sum() / (q.norm() * f.norm()), 0.98) << s;
    EXPECT_EQ(o.layer_outputs.size(), 2u);
    EXPECT_EQ(o.timings.size(), 2u);
  }
}

TEST(Encoder, ModelDimScaleModeRuns) {
  ModelConfig cfg = small_config();
  cfg.scale_mode = ScaleMode::model_dim;
  EXPECT_EQ(cfg.attention_shift(), 4);
  const Built b = build(cfg, 14);
  EXPECT_EQ(b.qm.layers[0].attn_shift, 4);
  const ref::Mat x = ref::make_samples(cfg, 1, 3).front();
  const EncoderOutput o = run_encoder(b.qm, quantize_input(x, b.qm.input_scale));
  const ref::Mat f = ref::encoder(x, b.fm, cfg.attention_shift());
  const ref::Mat q = to_real(o.out);
  EXPECT_GE(q.cwiseProduct(f).sum() / (q.norm() * f.norm()), 0.98);
}
