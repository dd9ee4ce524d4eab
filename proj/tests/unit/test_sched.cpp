// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <string>

#include "qtx/refmodel.hpp"
#include "qtx/sched.hpp"

using namespace qtx;

namespace {

QuantModel toy_model(const ModelConfig& cfg, std::uint64_t seed) {
  const ref::FloatModel fm = ref::make_toy_model(cfg, seed);
  const auto xs = ref::make_samples(cfg, 16, seed + 1);
  return quantize_model(fm, ref::calibrate(fm, xs, cfg), ref::fit_all(), cfg);
}

}  // namespace

TEST(Schedule, ZeroLayers) {
  FsmTrace t;
  const CycleReport r = schedule(ModelConfig::toy(), 0, &t);
  EXPECT_EQ(r.total_cycles, 0u);
  EXPECT_DOUBLE_EQ(r.latency_ms(), 0.0);
  EXPECT_TRUE(t.events.empty());
}

TEST(Schedule, ClockAndLatency) {
  const ModelConfig cfg = ModelConfig::roberta_base();
  const CycleReport r = schedule(cfg, cfg.n_layers);
  EXPECT_NEAR(r.clock_mhz(), 142.857, 1e-3);
  EXPECT_DOUBLE_EQ(r.latency_ms(), static_cast<double>(r.total_cycles) * 7.0 * 1e-6);
  EXPECT_EQ(r.worst_case_sqrt_iters, kWorstCaseSqrtIters);
  std::uint64_t sum = 0;
  for (const BlockCycles& b : r.blocks) sum += b.cycles;
  EXPECT_EQ(sum, r.total_cycles);
  EXPECT_EQ(r.blocks.size(), 4 * cfg.n_layers);
}

TEST(Schedule, PureFunctionOfConfig) {
  const ModelConfig cfg = ModelConfig::roberta_base();
  FsmTrace a, b;
  EXPECT_EQ(schedule(cfg, 3, &a).total_cycles, schedule(cfg, 3, &b).total_cycles);
  EXPECT_EQ(a.to_text(), b.to_text());
}

TEST(Schedule, DoublingSequenceLengthOnFixedArray) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.tile = {16, 16};
  const HeadTiming a = predict_head(cfg);
  cfg.m *= 2;
  const HeadTiming b = predict_head(cfg);
  EXPECT_GE(b.qk, 2 * a.qk);
  EXPECT_GE(b.qk + b.softmax + b.pv, 2 * (a.qk + a.softmax + a.pv) - 2);
}

TEST(Schedule, SequenceLengthMonotoneOnOperandSizedArrays) {
  ModelConfig cfg = ModelConfig::toy();
  std::uint64_t prev = 0;
  for (std::size_t m : {4, 8, 16, 32, 64}) {
    cfg.m = m;
    const std::uint64_t t = predict_mhsa(cfg).total();
    EXPECT_GT(t, prev);
    prev = t;
  }
}

TEST(Schedule, BlockFormulas) {
  const ModelConfig cfg = ModelConfig::toy();
  const LayerTiming t = predict_layer(cfg);
  EXPECT_EQ(t.ln1.total(), cfg.d + 2 + kWorstCaseSqrtIters);
  EXPECT_EQ(t.mhsa.batches.front().softmax, cfg.m + 2);
  EXPECT_EQ(t.ffn.mm1, cfg.d + cfg.d_ff);
  EXPECT_EQ(t.ffn.mm2, cfg.d_ff + cfg.d);
}

TEST(Schedule, TraceIsWellFormed) {
  FsmTrace t;
  schedule(ModelConfig::roberta_base(), 2, &t);
  EXPECT_EQ(check_trace(t), "");
  const std::string text = t.to_text();
  EXPECT_NE(text.find("0 L0.MHSA Start\n"), std::string::npos);
  EXPECT_NE(text.find("L1.LN2 Done"), std::string::npos);
  EXPECT_NE(text.find("state=B0.SOFTMAX"), std::string::npos);
}

TEST(TraceCheck, DetectsViolations) {
  FsmTrace t;
  t.events = {{0, "A", Signal::valid, {}}};
  EXPECT_NE(check_trace(t), "");
  t.events = {{0, "A", Signal::start, {}}, {1, "B", Signal::start, {}}};
  EXPECT_NE(check_trace(t), "");
  t.events = {{0, "A", Signal::start, {}}, {2, "A", Signal::valid, {}}};
  EXPECT_NE(check_trace(t), "");  // never Done
  t.events = {{0, "A", Signal::start, {}}, {2, "A", Signal::valid, {}}, {2, "A", Signal::done, {}}};
  EXPECT_NE(check_trace(t), "");  // not strictly increasing
  t.events = {{0, "A", Signal::start, {}}, {1, "A", Signal::done, {}}};
  EXPECT_NE(check_trace(t), "");  // Done before Valid
  t.events = {{0, "A", Signal::start, {}}, {1, "A", Signal::valid, {}}, {3, "A", Signal::done, {}},
              {3, "B", Signal::start, {}}, {4, "B", Signal::valid, {}}, {5, "B", Signal::done, {}}};
  EXPECT_EQ(check_trace(t), "");
}

TEST(RunWithTrace, MatchesBlocksAndBoundedBySchedule) {
  const ModelConfig cfg = ModelConfig::toy();
  const QuantModel qm = toy_model(cfg, 1);
  const ref::Mat x = ref::make_samples(cfg, 1, 42).front();
  const QMat8 xq = quantize_input(x, qm.input_scale);

  const TracedRun r = run_with_trace(qm, xq);
  EXPECT_EQ(r.output.out.data, run_encoder(qm, xq).out.data);
  EXPECT_EQ(check_trace(r.trace), "");
  EXPECT_TRUE(r.report.measured);

  const CycleReport worst = schedule(cfg, cfg.n_layers);
  EXPECT_LE(r.report.total_cycles, worst.total_cycles);
  std::uint64_t slack = 0;
  for (const LayerTiming& t : r.report.layers) {
    EXPECT_LE(t.ln1.sqrt_iterations, kWorstCaseSqrtIters);
    EXPECT_LE(t.ln2.sqrt_iterations, kWorstCaseSqrtIters);
    slack += 2 * kWorstCaseSqrtIters - t.ln1.sqrt_iterations - t.ln2.sqrt_iterations;
  }
  EXPECT_EQ(worst.total_cycles - r.report.total_cycles, slack);
}

TEST(RunWithTrace, OnlySqrtIterationsDependOnData) {
  const ModelConfig cfg = ModelConfig::toy();
  const QuantModel qm = toy_model(cfg, 2);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const QMat8 xq = quantize_input(ref::make_samples(cfg, 1, s).front(), qm.input_scale);
    const TracedRun r = run_with_trace(qm, xq);
    std::vector<LayerTiming> fixed = r.report.layers;
    for (LayerTiming& t : fixed) {
      t.ln1.sqrt_iterations = kWorstCaseSqrtIters;
      t.ln2.sqrt_iterations = kWorstCaseSqrtIters;
    }
    EXPECT_EQ(assemble(cfg, fixed, false).total_cycles, schedule(cfg, cfg.n_layers).total_cycles);
  }
}

TEST(Sweep, BracketsTarget) {
  ModelConfig cfg = ModelConfig::roberta_base();
  const Sweep s = sweep_latency(cfg, {1, 2, 3, 4, 6, 12}, {TileShape{}}, 1.83);
  ASSERT_EQ(s.points.size(), 6u);
  for (std::size_t i = 1; i < s.points.size(); ++i) EXPECT_LT(s.points[i].latency_ms, s.points[i - 1].latency_ms);
  ASSERT_TRUE(s.below.has_value());
  ASSERT_TRUE(s.above.has_value());
  EXPECT_LE(s.below->latency_ms, 1.83);
  EXPECT_GE(s.above->latency_ms, 1.83);
}
