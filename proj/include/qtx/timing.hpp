// SPDX-License-Identifier: Apache-2.0
//
// Cycle accounting shared by the numerical blocks (which measure) and the
// scheduler (which predicts from shapes alone).
#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "qtx/config.hpp"
#include "qtx/intkernels.hpp"
#include "qtx/macarray.hpp"

namespace qtx {

/// Softmax (max / exp / normalize) and LayerNorm (mean / variance+sqrt / output).
inline constexpr int kSoftmaxStages = 3;
inline constexpr int kLayerNormStages = 3;

/// One column per cycle after the pipeline fills.
inline std::uint64_t pipeline_cycles(std::size_t columns, int stages) {
  return static_cast<std::uint64_t>(columns) + static_cast<std::uint64_t>(stages - 1);
}

struct HeadTiming {
  std::uint64_t qkv = 0;  // the three projection arrays run side by side
  std::uint64_t qk = 0;
  std::uint64_t softmax = 0;
  std::uint64_t pv = 0;
  std::uint64_t total() const { return qkv + qk + softmax + pv; }
  friend bool operator==(const HeadTiming&, const HeadTiming&) = default;
};

struct MhsaTiming {
  std::vector<HeadTiming> batches;  // one entry per head batch
  std::uint64_t wo = 0;
  std::uint64_t total() const {
    std::uint64_t t = wo;
    for (const auto& b : batches) t += b.total();
    return t;
  }
};

struct LnTiming {
  std::uint64_t pipeline = 0;
  int sqrt_iterations = 0;
  std::uint64_t total() const { return pipeline + static_cast<std::uint64_t>(sqrt_iterations); }
};

struct FfnTiming {
  std::uint64_t mm1 = 0;  // GELU and requantization are combinational on the readout path
  std::uint64_t mm2 = 0;
  std::uint64_t total() const { return mm1 + mm2; }
};

struct LayerTiming {
  MhsaTiming mhsa;
  LnTiming ln1;
  FfnTiming ffn;
  LnTiming ln2;
  int control_overhead = 0;  // per block transaction

  static constexpr int kBlocks = 4;
  std::uint64_t total() const {
    return mhsa.total() + ln1.total() + ffn.total() + ln2.total() +
           static_cast<std::uint64_t>(kBlocks * control_overhead);
  }
};

// Closed-form per-block cycle counts from shapes.

inline HeadTiming predict_head(const ModelConfig& c) {
  const std::size_t dh = c.d_head();
  return {matmul_cycles(c.m, c.d, dh, c.tile), matmul_cycles(c.m, dh, c.m, c.tile),
          pipeline_cycles(c.m, kSoftmaxStages), matmul_cycles(c.m, c.m, dh, c.tile)};
}

inline MhsaTiming predict_mhsa(const ModelConfig& c) {
  MhsaTiming t;
  t.batches.assign(c.head_batches(), predict_head(c));
  t.wo = matmul_cycles(c.m, c.d, c.d, c.tile);
  return t;
}

inline LnTiming predict_layernorm(const ModelConfig& c, int sqrt_iterations = kWorstCaseSqrtIters) {
  return {pipeline_cycles(c.d, kLayerNormStages), sqrt_iterations};
}

inline FfnTiming predict_ffn(const ModelConfig& c) {
  return {matmul_cycles(c.m, c.d, c.d_ff, c.tile), matmul_cycles(c.m, c.d_ff, c.d, c.tile)};
}

inline LayerTiming predict_layer(const ModelConfig& c) {
  return {predict_mhsa(c), predict_layernorm(c), predict_ffn(c), predict_layernorm(c),
          c.control_overhead};
}

}  // namespace qtx
