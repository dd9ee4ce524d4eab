// SPDX-License-Identifier: Apache-2.0
//
// Scaling-factor bookkeeping for the integer datapath.
//
// Every tensor travelling between blocks is an integer matrix plus a real
// scale, value = integer * scale. Scales never enter the datapath: at
// configuration time each ratio of scales is turned into a dyadic number
// b / 2^c, and the datapath only multiplies by b and shifts right by c.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qtx/errors.hpp"

namespace qtx {

inline constexpr int kDefaultDyadicShift = 16;
inline constexpr int kMaxDyadicShift = 31;

/// Positive, finite real scaling factor. Configuration-time only.
class Scale {
 public:
  Scale() = default;
  explicit Scale(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw ConfigError("scale must be positive and finite, got " + std::to_string(value));
    }
  }
  double value() const noexcept { return value_; }
  friend bool operator==(Scale, Scale) = default;

 private:
  double value_ = 1.0;
};

inline Scale operator*(Scale a, Scale b) { return Scale(a.value() * b.value()); }
inline Scale operator/(Scale a, Scale b) { return Scale(a.value() / b.value()); }

/// The rational b / 2^c.
struct DyadicScale {
  std::int32_t b = 1;
  int c = 0;

  double value() const noexcept { return std::ldexp(static_cast<double>(b), -c); }
  friend bool operator==(const DyadicScale&, const DyadicScale&) = default;
};

/// Saturation event counters. Saturation is the defined behaviour of every
/// clamp in the datapath; counting it is how debug runs make overflow visible.
struct SaturationStats {
  std::uint64_t dyadic = 0;       // dyadic_apply result left int32
  std::uint64_t int8_clamp = 0;   // requantize clamped to [-128, 127]
  std::uint64_t accumulator = 0;  // MAC accumulator or residual add left int32
  std::uint64_t kernel = 0;       // nonlinear-kernel output clamped

  std::uint64_t total() const noexcept { return dyadic + int8_clamp + accumulator + kernel; }
  SaturationStats& operator+=(const SaturationStats& o) noexcept {
    dyadic += o.dyadic;
    int8_clamp += o.int8_clamp;
    accumulator += o.accumulator;
    kernel += o.kernel;
    return *this;
  }
};

inline std::int32_t saturate_i32(std::int64_t v, std::uint64_t* events = nullptr) noexcept {
  constexpr std::int64_t lo = std::numeric_limits<std::int32_t>::min();
  constexpr std::int64_t hi = std::numeric_limits<std::int32_t>::max();
  if (v < lo || v > hi) {
    if (events) ++*events;
    return static_cast<std::int32_t>(v < lo ? lo : hi);
  }
  return static_cast<std::int32_t>(v);
}

inline std::int8_t saturate_i8(std::int64_t v, std::uint64_t* events = nullptr) noexcept {
  if (v < -128 || v > 127) {
    if (events) ++*events;
    return static_cast<std::int8_t>(v < -128 ? -128 : 127);
  }
  return static_cast<std::int8_t>(v);
}

/// Dense row-major integer matrix with a scaling factor.
template <typename T>
struct QMat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;
  Scale scale;

  QMat() = default;
  QMat(std::size_t r, std::size_t c, Scale s) : rows(r), cols(c), data(r * c, T{0}), scale(s) {}
  QMat(std::size_t r, std::size_t c, std::vector<T> values, Scale s)
      : rows(r), cols(c), data(std::move(values)), scale(s) {
    if (data.size() != r * c) {
      throw UsageError("matrix data size " + std::to_string(data.size()) + " != " +
                       std::to_string(r) + "x" + std::to_string(c));
    }
  }

  T& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  T at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double dequant(std::size_t i, std::size_t j) const {
    return static_cast<double>(at(i, j)) * scale.value();
  }
};

using QMat8 = QMat<std::int8_t>;
using QMat32 = QMat<std::int32_t>;

/// Fits ratio ~= b / 2^c with b = round(ratio * 2^c).
/// `where` names the layer/junction in the overflow message.
inline DyadicScale dyadic_fit(double ratio, int c = kDefaultDyadicShift,
                              std::string_view where = {}) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) {
    throw ConfigError("dyadic ratio must be positive and finite" +
                      (where.empty() ? std::string() : " at " + std::string(where)));
  }
  if (c < 0 || c > kMaxDyadicShift) {
    throw ConfigError("dyadic shift " + std::to_string(c) + " outside [0, 31]");
  }
  const double b = std::nearbyint(std::ldexp(ratio, c));
  if (b >= 2147483648.0) {
    throw ConfigError("dyadic numerator overflows int32 (ratio " + std::to_string(ratio) +
                      ", c=" + std::to_string(c) + ")" +
                      (where.empty() ? std::string() : " at " + std::string(where)));
  }
  return {static_cast<std::int32_t>(b), c};
}

/// Signed variant used for affine coefficients (LayerNorm gamma), which unlike
/// scales may be zero or negative.
inline DyadicScale dyadic_coeff(double value, int c = kDefaultDyadicShift) {
  if (!std::isfinite(value) || c < 0 || c > kMaxDyadicShift) {
    throw ConfigError("invalid dyadic coefficient");
  }
  const double b = std::nearbyint(std::ldexp(value, c));
  if (std::fabs(b) >= 2147483648.0) {
    throw ConfigError("dyadic coefficient overflows int32: " + std::to_string(value));
  }
  return {static_cast<std::int32_t>(b), c};
}

/// Largest useful precision for a ratio: starts at the default shift, raises
/// it while the numerator has fewer than 15 significant bits, lowers it while
/// the numerator would overflow.
inline int choose_dyadic_shift(double ratio, int preferred = kDefaultDyadicShift) {
  int c = preferred;
  while (c > 0 && std::ldexp(ratio, c) >= 2147483647.5) --c;
  while (c < kMaxDyadicShift && std::ldexp(ratio, c) < 16384.0) ++c;
  return c;
}

/// round(q * b / 2^c): (q*b + 2^(c-1)) >> c in 64 bits, saturated to int32.
inline std::int32_t dyadic_apply(std::int32_t q, DyadicScale d,
                                 SaturationStats* stats = nullptr) noexcept {
  std::int64_t prod = static_cast<std::int64_t>(q) * d.b;
  if (d.c > 0) prod = (prod + (std::int64_t{1} << (d.c - 1))) >> d.c;
  return saturate_i32(prod, stats ? &stats->dyadic : nullptr);
}

/// Arithmetic right shift with round-to-nearest; shift 0 is the identity.
inline std::int64_t round_shift(std::int64_t v, int shift) noexcept {
  if (shift <= 0) return v;
  return (v + (std::int64_t{1} << (shift - 1))) >> shift;
}

/// INT32 -> INT8 at a new scale.
inline QMat8 requantize(const QMat32& x, Scale target, int c = kDefaultDyadicShift,
                        SaturationStats* stats = nullptr) {
  const DyadicScale ratio = dyadic_fit(x.scale.value() / target.value(), c, "requantize");
  QMat8 out(x.rows, x.cols, target);
  std::uint64_t* clamp_events = stats ? &stats->int8_clamp : nullptr;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    out.data[i] = saturate_i8(dyadic_apply(x.data[i], ratio, stats), clamp_events);
  }
  return out;
}

/// INT32 -> INT32 at a new scale (single-operand dyadic rescale).
inline QMat32 rescale(const QMat32& x, Scale target, int c = kDefaultDyadicShift,
                      SaturationStats* stats = nullptr) {
  const DyadicScale ratio = dyadic_fit(x.scale.value() / target.value(), c, "rescale");
  QMat32 out(x.rows, x.cols, target);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = dyadic_apply(x.data[i], ratio, stats);
  return out;
}

/// Residual connection: aligns both addends to `out_scale`, then adds with saturation.
inline QMat32 rescale_add(const QMat32& x, const QMat32& y, Scale out_scale,
                          int c = kDefaultDyadicShift, SaturationStats* stats = nullptr) {
  if (x.rows != y.rows || x.cols != y.cols) {
    throw UsageError("rescale_add shape mismatch: " + std::to_string(x.rows) + "x" +
                     std::to_string(x.cols) + " vs " + std::to_string(y.rows) + "x" +
                     std::to_string(y.cols));
  }
  const DyadicScale rx = dyadic_fit(x.scale.value() / out_scale.value(), c, "residual lhs");
  const DyadicScale ry = dyadic_fit(y.scale.value() / out_scale.value(), c, "residual rhs");
  QMat32 out(x.rows, x.cols, out_scale);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const std::int64_t sum = std::int64_t{dyadic_apply(x.data[i], rx, stats)} +
                             dyadic_apply(y.data[i], ry, stats);
    out.data[i] = saturate_i32(sum, stats ? &stats->accumulator : nullptr);
  }
  return out;
}

inline QMat32 widen(const QMat8& x) {
  QMat32 out(x.rows, x.cols, x.scale);
  std::copy(x.data.begin(), x.data.end(), out.data.begin());
  return out;
}

/// Symmetric per-tensor quantization of real values at a given scale.
inline QMat8 quantize(std::span<const double> values, std::size_t rows, std::size_t cols,
                      Scale scale, SaturationStats* stats = nullptr) {
  if (values.size() != rows * cols) throw UsageError("quantize: size mismatch");
  QMat8 out(rows, cols, scale);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double q = std::nearbyint(values[i] / scale.value());
    out.data[i] = saturate_i8(static_cast<std::int64_t>(std::clamp(q, -1e12, 1e12)),
                              stats ? &stats->int8_clamp : nullptr);
  }
  return out;
}

/// Real value -> int32 at a given scale, saturating.
inline std::int32_t quantize_i32(double value, Scale scale) {
  const double q = std::nearbyint(value / scale.value());
  return saturate_i32(static_cast<std::int64_t>(std::clamp(q, -4e18, 4e18)));
}

template <typename T>
std::vector<double> dequantize(const QMat<T>& m) {
  std::vector<double> out(m.data.size());
  for (std::size_t i = 0; i < m.data.size(); ++i) out[i] = static_cast<double>(m.data[i]) * m.scale.value();
  return out;
}

}  // namespace qtx
