// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "qtx/errors.hpp"
#include "qtx/macarray.hpp"

namespace qtx {

/// How the attention Scale unit divides Q*K^T before Softmax.
enum class ScaleMode {
  sqrt_dh_shift,  // >> round(log2(sqrt(d_h)))
  model_dim,      // >> round(log2(d))
};

inline const char* to_string(ScaleMode m) {
  return m == ScaleMode::sqrt_dh_shift ? "sqrt-dh-shift" : "model-dim";
}

inline ScaleMode parse_scale_mode(const std::string& s) {
  if (s == "sqrt-dh-shift") return ScaleMode::sqrt_dh_shift;
  if (s == "model-dim") return ScaleMode::model_dim;
  throw UsageError("unknown scale mode '" + s + "' (expected sqrt-dh-shift or model-dim)");
}

struct ModelConfig {
  std::size_t d = 64;
  std::size_t k_heads = 4;
  std::size_t m = 16;  // sequence length
  std::size_t d_ff = 256;
  std::size_t n_layers = 2;
  double clock_period_ns = 7.0;
  std::size_t heads_parallel = 0;  // 0: all heads at once
  TileShape tile{};                // {0, 0}: one array as large as each operand
  ScaleMode scale_mode = ScaleMode::sqrt_dh_shift;
  int control_overhead = 1;  // cycles per FSM Start handshake

  std::size_t d_head() const { return d / k_heads; }
  std::size_t heads_per_batch() const {
    return heads_parallel == 0 ? k_heads : std::min(heads_parallel, k_heads);
  }
  std::size_t head_batches() const { return ceil_div(k_heads, heads_per_batch()); }

  int attention_shift() const {
    const double target = scale_mode == ScaleMode::sqrt_dh_shift
                              ? 0.5 * std::log2(static_cast<double>(d_head()))
                              : std::log2(static_cast<double>(d));
    return static_cast<int>(std::lround(target));
  }

  void validate() const {
    if (d == 0 || k_heads == 0 || m == 0 || d_ff == 0) {
      throw UsageError("model dimensions must all be >= 1");
    }
    if (d % k_heads != 0) {
      throw UsageError("d=" + std::to_string(d) + " is not divisible by k_heads=" +
                       std::to_string(k_heads));
    }
    if (!(clock_period_ns > 0.0)) throw UsageError("clock period must be positive");
    if (control_overhead < 0) throw UsageError("control overhead must be >= 0");
  }

  static ModelConfig toy() { return {}; }

  static ModelConfig roberta_base() {
    ModelConfig c;
    c.d = 768;
    c.k_heads = 12;
    c.m = 256;
    c.d_ff = 3072;
    c.n_layers = 12;
    c.clock_period_ns = 7.0;
    return c;
  }
};

}  // namespace qtx
