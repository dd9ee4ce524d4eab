// SPDX-License-Identifier: Apache-2.0
//
// Cycle-level model of the MatMul block: an n_rows x n_cols grid of MAC cells.
// Each accumulate step consumes one column of A (one value per array row) and
// one row of B (one value per array column) and costs one cycle; the result
// is read out one column per cycle through the output multiplexer, with the
// per-column bias injected on the way out.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qtx/errors.hpp"
#include "qtx/quantcore.hpp"

namespace qtx {

/// Per-output-column bias, stored at its own scale and aligned to the
/// accumulator scale by a dyadic multiply at readout.
struct Bias {
  std::vector<std::int32_t> values;
  DyadicScale align{1, 0};
};

enum class MacPhase { idle, accumulating, readout };

class MacArray {
 public:
  MacArray(std::size_t n_rows, std::size_t n_cols) : n_rows_(n_rows), n_cols_(n_cols) {
    if (n_rows == 0 || n_cols == 0) throw UsageError("MacArray dimensions must be >= 1");
    acc_.assign(n_rows * n_cols, 0);
  }

  /// Clears the accumulators and declares the inner dimension of the next product.
  void begin(std::size_t inner_dim, std::optional<Bias> bias = std::nullopt) {
    if (bias && bias->values.size() != n_cols_) {
      throw UsageError("MacArray bias length " + std::to_string(bias->values.size()) +
                       " != columns " + std::to_string(n_cols_));
    }
    std::fill(acc_.begin(), acc_.end(), 0);
    bias_ = std::move(bias);
    inner_dim_ = inner_dim;
    steps_ = 0;
    phase_ = MacPhase::idle;
  }

  void step_accumulate(std::span<const std::int8_t> row_in, std::span<const std::int8_t> col_in) {
    if (phase_ == MacPhase::readout) throw UsageError("step_accumulate during readout");
    if (row_in.size() != n_rows_ || col_in.size() != n_cols_) {
      throw UsageError("step_accumulate: expected " + std::to_string(n_rows_) + " row and " +
                       std::to_string(n_cols_) + " column inputs");
    }
    if (steps_ >= inner_dim_) throw UsageError("step_accumulate beyond declared inner dimension");
    for (std::size_t i = 0; i < n_rows_; ++i) {
      const std::int32_t a = row_in[i];
      std::int32_t* acc_row = acc_.data() + i * n_cols_;
      for (std::size_t j = 0; j < n_cols_; ++j) {
        acc_row[j] = saturate_i32(std::int64_t{acc_row[j]} + a * col_in[j], &saturations_);
      }
    }
    ++steps_;
    ++cycles_;
    phase_ = MacPhase::accumulating;
  }

  /// Non-destructive read of accumulator column j (+ aligned bias_j).
  std::vector<std::int32_t> read_column(std::size_t j, bool with_bias) {
    if (steps_ != inner_dim_) {
      throw UsageError("read_column before accumulation complete (" + std::to_string(steps_) +
                       "/" + std::to_string(inner_dim_) + " steps)");
    }
    if (j >= n_cols_) throw UsageError("read_column: column " + std::to_string(j) + " out of range");
    const std::int32_t b =
        with_bias && bias_ ? dyadic_apply(bias_->values[j], bias_->align) : 0;
    std::vector<std::int32_t> col(n_rows_);
    for (std::size_t i = 0; i < n_rows_; ++i) {
      col[i] = saturate_i32(std::int64_t{acc_[i * n_cols_ + j]} + b, &saturations_);
    }
    ++cycles_;
    phase_ = MacPhase::readout;
    return col;
  }

  std::size_t rows() const noexcept { return n_rows_; }
  std::size_t cols() const noexcept { return n_cols_; }
  MacPhase phase() const noexcept { return phase_; }
  std::uint64_t cycles() const noexcept { return cycles_; }
  std::uint64_t saturation_events() const noexcept { return saturations_; }
  std::int32_t accumulator(std::size_t i, std::size_t j) const { return acc_.at(i * n_cols_ + j); }

 private:
  std::size_t n_rows_;
  std::size_t n_cols_;
  std::vector<std::int32_t> acc_;
  std::optional<Bias> bias_;
  std::size_t inner_dim_ = 0;
  std::size_t steps_ = 0;
  MacPhase phase_ = MacPhase::idle;
  std::uint64_t cycles_ = 0;
  std::uint64_t saturations_ = 0;
};

/// Physical array size; 0 in either dimension means "as large as the operand".
struct TileShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Closed-form cycle count of the tiled product: per tile, k accumulate steps
/// plus one readout per tile column.
inline std::uint64_t matmul_cycles(std::size_t m, std::size_t k, std::size_t n, TileShape tile) {
  const std::size_t tr = tile.rows ? std::min(tile.rows, m) : m;
  const std::size_t tc = tile.cols ? std::min(tile.cols, n) : n;
  return static_cast<std::uint64_t>(ceil_div(m, tr)) * (ceil_div(n, tc) * k + n);
}

struct MatmulResult {
  QMat32 out;
  std::uint64_t cycles = 0;
  std::uint64_t saturations = 0;
};

/// A (m x k) * B (k x n) on a tile-sized MacArray, reusing it across output tiles.
/// `bias` (length n) is at the bias's own scale, aligned by `bias->align`.
inline MatmulResult matmul(const QMat8& a, const QMat8& b, const std::optional<Bias>& bias = std::nullopt,
                           TileShape tile = {}) {
  if (a.cols != b.rows) {
    throw UsageError("matmul inner dimension mismatch: " + std::to_string(a.cols) + " vs " +
                     std::to_string(b.rows));
  }
  if (bias && bias->values.size() != b.cols) throw UsageError("matmul bias length mismatch");
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  const std::size_t tr = tile.rows ? std::min(tile.rows, m) : m;
  const std::size_t tc = tile.cols ? std::min(tile.cols, n) : n;
  if (m == 0 || n == 0 || tr == 0 || tc == 0) throw UsageError("matmul: empty operand");

  MatmulResult res{QMat32(m, n, a.scale * b.scale), 0, 0};
  std::vector<std::int8_t> row_in(tr), col_in(tc);
  for (std::size_t i0 = 0; i0 < m; i0 += tr) {
    const std::size_t rows = std::min(tr, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += tc) {
      const std::size_t cols = std::min(tc, n - j0);
      MacArray arr(rows, cols);
      std::optional<Bias> tile_bias;
      if (bias) {
        tile_bias = Bias{{bias->values.begin() + static_cast<std::ptrdiff_t>(j0),
                          bias->values.begin() + static_cast<std::ptrdiff_t>(j0 + cols)},
                         bias->align};
      }
      arr.begin(k, std::move(tile_bias));
      row_in.resize(rows);
      col_in.resize(cols);
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < rows; ++i) row_in[i] = a.at(i0 + i, p);
        for (std::size_t j = 0; j < cols; ++j) col_in[j] = b.at(p, j0 + j);
        arr.step_accumulate(row_in, col_in);
      }
      for (std::size_t j = 0; j < cols; ++j) {
        const auto col = arr.read_column(j, bias.has_value());
        for (std::size_t i = 0; i < rows; ++i) res.out.at(i0 + i, j0 + j) = col[i];
      }
      res.cycles += arr.cycles();
      res.saturations += arr.saturation_events();
    }
  }
  return res;
}

/// Transpose helper for feeding K^T into the array.
inline QMat8 transpose(const QMat8& x) {
  QMat8 t(x.cols, x.rows, x.scale);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) t.at(j, i) = x.at(i, j);
  return t;
}

}  // namespace qtx
