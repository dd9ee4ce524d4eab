// SPDX-License-Identifier: Apache-2.0
//
// Integer-only nonlinear kernels: second-order polynomial evaluation,
// exponential, Softmax, erf, GELU, integer square root and LayerNorm.
//
// All real-valued constants are folded into integers when the *Consts structs
// are built; the kernels themselves only add, multiply, shift and divide.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "qtx/errors.hpp"
#include "qtx/quantcore.hpp"

namespace qtx {

/// a(x + b)^2 + c, valid for x in [lo, hi].
struct PolyCoeffs {
  double a = 1.0;
  double b = 0.0;
  double c = 0.0;
  double lo = -1.0;
  double hi = 1.0;

  double operator()(double x) const noexcept { return a * (x + b) * (x + b) + c; }
  void validate() const {
    if (a == 0.0 || !std::isfinite(a) || !std::isfinite(b) || !std::isfinite(c)) {
      throw ConfigError("polynomial coefficient a must be finite and nonzero");
    }
    if (!(lo < hi)) throw ConfigError("polynomial interval must satisfy lo < hi");
  }
};

/// Integer value with the scale it is expressed in.
struct ScaledInt {
  std::int32_t q = 0;
  Scale scale;
};

namespace detail {

inline constexpr double kInt32Limit = 2147483647.0;

inline std::int32_t checked_floor(double v, const char* what) {
  const double f = std::floor(v);
  if (!std::isfinite(f) || f > kInt32Limit || f < -kInt32Limit - 1.0) {
    throw ConfigError(std::string(what) + " does not fit int32 (" + std::to_string(v) + ")");
  }
  return static_cast<std::int32_t>(f);
}

inline std::int64_t floor_div(std::int64_t num, std::int64_t den) noexcept {
  std::int64_t q = num / den;
  if ((num % den != 0) && ((num < 0) != (den < 0))) --q;
  return q;
}

}  // namespace detail

/// Integer constants of a(x+b)^2+c at input scale S. For a < 0 the sign is
/// carried separately so the output scale |a|*S^2 stays positive.
struct Poly2Consts {
  std::int32_t qb = 0;  // floor(b / S)
  std::int32_t qc = 0;  // floor(c / (a S^2))
  int sign = 1;         // sign(a)
  Scale in_scale;
  Scale out_scale;      // |a| S^2

  static Poly2Consts make(Scale s, const PolyCoeffs& k) {
    k.validate();
    Poly2Consts p;
    p.in_scale = s;
    p.qb = detail::checked_floor(k.b / s.value(), "polynomial constant floor(b/S)");
    p.qc = detail::checked_floor(k.c / (k.a * s.value() * s.value()),
                                 "polynomial constant floor(c/(a S^2))");
    p.sign = k.a > 0 ? 1 : -1;
    p.out_scale = Scale(std::fabs(k.a) * s.value() * s.value());
    return p;
  }

  std::int32_t eval(std::int32_t q) const {
    const std::int64_t t = std::int64_t{q} + qb;
    const std::int64_t v = sign * (t * t + qc);
    if (v > std::numeric_limits<std::int32_t>::max() || v < std::numeric_limits<std::int32_t>::min()) {
      throw KernelError("polynomial intermediate overflows int32 for input q=" + std::to_string(q));
    }
    return static_cast<std::int32_t>(v);
  }
};

/// q_out = (q + floor(b/S))^2 + floor(c/(a S^2)) at scale a*S^2.
inline ScaledInt i_poly2(std::int32_t q, Scale s, const PolyCoeffs& k) {
  const Poly2Consts p = Poly2Consts::make(s, k);
  return {p.eval(q), p.out_scale};
}

// ---------------------------------------------------------------------------
// Exponential and Softmax
// ---------------------------------------------------------------------------

/// Inputs below this real value short-circuit to zero.
inline constexpr double kExpUnderflow = -30.0;

struct ExpConsts {
  std::int32_t q1 = 0;  // floor(b / S_pe)
  std::int32_t q2 = 0;  // floor(c / (a S_pe^2))
  std::int32_t q3 = 1;  // floor(ln2 / S_e)
  std::int32_t q4 = -1; // floor(-1 / q3); kept for completeness, unused
  std::int32_t q_floor = std::numeric_limits<std::int32_t>::min();
  Scale s_e;            // input scale
  Scale s_pe;           // polynomial input scale (== s_e)
  Scale s_out;          // a S_pe^2
  PolyCoeffs fit;

  static ExpConsts make(Scale s_e, const PolyCoeffs& fit) {
    fit.validate();
    ExpConsts k;
    k.fit = fit;
    k.s_e = s_e;
    k.s_pe = s_e;
    const Poly2Consts p = Poly2Consts::make(s_e, fit);
    if (p.sign < 0) throw ConfigError("exponential fit must have a > 0");
    k.q1 = p.qb;
    k.q2 = p.qc;
    k.q3 = detail::checked_floor(std::numbers::ln2 / s_e.value(), "exp constant q3");
    if (k.q3 < 1) {
      throw ConfigError("exp input scale " + std::to_string(s_e.value()) + " exceeds ln2 (q3 < 1)");
    }
    k.q4 = static_cast<std::int32_t>(detail::floor_div(-1, k.q3));
    k.s_out = p.out_scale;
    const double qf = std::ceil(kExpUnderflow / s_e.value());
    k.q_floor = qf < -detail::kInt32Limit ? std::numeric_limits<std::int32_t>::min()
                                          : static_cast<std::int32_t>(qf);
    // The remainder q_p lies in (-q3, 0]; the polynomial must fit int32 there.
    const double t_max = std::max(std::fabs(double(k.q1)), std::fabs(double(k.q1) - k.q3 + 1));
    if (t_max * t_max + std::fabs(double(k.q2)) > detail::kInt32Limit) {
      throw ConfigError("exp polynomial overflows int32 at input scale " +
                        std::to_string(s_e.value()));
    }
    return k;
  }
};

/// e^(q S_e) for q <= 0 via q = q_p - z*q3, e^x = poly(q_p) >> z.
inline ScaledInt i_exp(std::int32_t q, const ExpConsts& k) {
  if (q > 0) throw UsageError("i_exp input must be <= 0, got " + std::to_string(q));
  if (q < k.q_floor) return {0, k.s_out};
  const std::int64_t z = (-std::int64_t{q}) / k.q3;
  if (z >= 31) return {0, k.s_out};
  const auto qp = static_cast<std::int32_t>(q + z * k.q3);
  const std::int64_t t = std::int64_t{qp} + k.q1;
  const std::int64_t ql = t * t + k.q2;
  return {static_cast<std::int32_t>(ql >> z), k.s_out};
}

/// Row Softmax: max subtraction, integer exp, one integer division per element.
/// Output is clamped to a signed `out_bits`-wide integer at `out_scale`.
inline std::vector<std::int32_t> i_softmax(std::span<const std::int32_t> row, Scale s,
                                           const ExpConsts& k, Scale out_scale,
                                           int out_bits = 32,
                                           SaturationStats* stats = nullptr) {
  if (row.empty()) throw UsageError("i_softmax: empty row");
  if (std::fabs(s.value() / k.s_e.value() - 1.0) > 1e-12) {
    throw UsageError("i_softmax: row scale does not match exp constants");
  }
  if (out_bits < 2 || out_bits > 32) throw UsageError("i_softmax: out_bits must be in [2, 32]");
  const std::int32_t m = *std::max_element(row.begin(), row.end());
  std::vector<std::int64_t> e(row.size());
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    const std::int64_t diff = std::int64_t{row[i]} - m;
    e[i] = diff < std::numeric_limits<std::int32_t>::min()
               ? 0
               : i_exp(static_cast<std::int32_t>(diff), k).q;
    sum += e[i];
  }
  const auto r = static_cast<std::int64_t>(std::llround(1.0 / out_scale.value()));
  const std::int64_t hi = (std::int64_t{1} << (out_bits - 1)) - 1;
  std::vector<std::int32_t> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    std::int64_t v = (e[i] * r) / sum;
    if (v > hi) {
      if (stats) ++stats->kernel;
      v = hi;
    }
    out[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// erf and GELU
// ---------------------------------------------------------------------------

/// Constants for GELU at input scale S. The 1/sqrt(2) of the erf argument is
/// folded into the erf scale S' = S / sqrt(2), so the same integer q feeds erf.
struct GeluConsts {
  double q5 = 0.0;      // -b / S' (real)
  std::int32_t clip = 0;  // floor(-b / S')
  std::int32_t q6 = 0;  // floor(b / S')
  std::int32_t q7 = 0;  // floor(c / (a S'^2))
  std::int32_t q8 = 1;  // floor(1 / S_erf)
  int erf_sign = -1;    // sign(a)
  int out_shift = 0;    // rounding right shift on the GELU product
  Scale s;              // GELU input scale
  Scale s_erf_in;       // S'
  Scale s_erf;          // |a| S'^2
  Scale s_out;          // S * S_erf / 2 * 2^out_shift
  PolyCoeffs fit;

  /// out_shift < 0 selects bit_width(q8) - 1, which keeps the output at
  /// roughly the input resolution and inside int32.
  static GeluConsts make(Scale s, const PolyCoeffs& erf_fit, int out_shift = -1) {
    erf_fit.validate();
    if (!(erf_fit.b < 0.0)) throw ConfigError("erf fit must have its vertex at -b > 0");
    GeluConsts k;
    k.fit = erf_fit;
    k.s = s;
    k.s_erf_in = Scale(s.value() / std::numbers::sqrt2);
    const double sp = k.s_erf_in.value();
    k.q5 = -erf_fit.b / sp;
    k.clip = detail::checked_floor(k.q5, "erf clip bound");
    const Poly2Consts p = Poly2Consts::make(k.s_erf_in, erf_fit);
    k.q6 = p.qb;
    k.q7 = p.qc;
    k.erf_sign = p.sign;
    k.s_erf = p.out_scale;
    k.q8 = detail::checked_floor(1.0 / k.s_erf.value(), "gelu constant q8");
    if (k.q8 < 1) throw ConfigError("erf output scale too coarse (q8 < 1)");
    const double t_max = std::max(std::fabs(double(k.q6)), std::fabs(double(k.clip) + k.q6));
    const double erf_max = t_max * t_max + std::fabs(double(k.q7));
    if (erf_max + k.q8 > detail::kInt32Limit) {
      throw ConfigError("erf polynomial overflows int32 at GELU input scale " +
                        std::to_string(s.value()));
    }
    k.out_shift = out_shift >= 0 ? out_shift
                                 : std::max(0, static_cast<int>(std::bit_width(
                                                   static_cast<std::uint32_t>(k.q8))) - 1);
    k.s_out = Scale(s.value() * k.s_erf.value() / 2.0 * std::ldexp(1.0, k.out_shift));
    return k;
  }
};

/// Odd, clipped polynomial erf at scale S' = S / sqrt(2).
inline ScaledInt i_erf(std::int32_t q, const GeluConsts& k) {
  const std::int64_t mag = std::min<std::int64_t>(q < 0 ? -std::int64_t{q} : q, k.clip);
  const std::int64_t t = mag + k.q6;
  const std::int64_t poly = k.erf_sign * (t * t + k.q7);
  const std::int64_t v = q > 0 ? poly : (q < 0 ? -poly : 0);
  return {static_cast<std::int32_t>(v), k.s_erf};
}

/// x * (1 + erf(x / sqrt 2)) / 2.
inline ScaledInt i_gelu(std::int32_t q, Scale s, const GeluConsts& k,
                        SaturationStats* stats = nullptr) {
  if (std::fabs(s.value() / k.s.value() - 1.0) > 1e-12) {
    throw UsageError("i_gelu: input scale does not match GELU constants");
  }
  const std::int64_t gate = std::int64_t{i_erf(q, k).q} + k.q8;
  std::int64_t prod = 0;
  if (__builtin_mul_overflow(std::int64_t{q}, gate, &prod)) {
    throw KernelError("i_gelu: 64-bit product overflow for q=" + std::to_string(q));
  }
  const std::int64_t v = round_shift(prod, k.out_shift);
  if (v > std::numeric_limits<std::int32_t>::max() || v < std::numeric_limits<std::int32_t>::min()) {
    if (stats) ++stats->kernel;
    throw KernelError("i_gelu: output overflows int32 for q=" + std::to_string(q));
  }
  return {static_cast<std::int32_t>(v), k.s_out};
}

// ---------------------------------------------------------------------------
// Square root and LayerNorm
// ---------------------------------------------------------------------------

/// Maximum i_sqrt iteration count over every n in [0, 2^24]; the cycle model
/// charges this for each LayerNorm square root. Verified exhaustively by the
/// acceptance suite.
inline constexpr int kWorstCaseSqrtIters = 5;

struct SqrtResult {
  std::int64_t root = 0;
  int iterations = 0;
};

/// floor(sqrt(n)) by Newton iteration from x0 = 2^ceil(bits(n)/2), stopping
/// as soon as the next iterate does not decrease.
inline SqrtResult i_sqrt(std::int64_t n) {
  if (n < 0) throw UsageError("i_sqrt: negative input " + std::to_string(n));
  if (n == 0) return {0, 0};
  const auto bits = static_cast<int>(std::bit_width(static_cast<std::uint64_t>(n)));
  std::int64_t x = std::int64_t{1} << ((bits + 1) / 2);
  int iters = 0;
  for (;;) {
    const std::int64_t next = (x + n / x) >> 1;
    ++iters;
    if (next >= x) break;
    x = next;
  }
  if (x * x > n) --x;
  return {x, iters};
}

/// LayerNorm constants: gamma as dyadic multipliers, beta as integers at out_scale.
struct LnConsts {
  std::size_t d = 0;
  std::vector<DyadicScale> gamma;
  std::vector<std::int32_t> beta;
  Scale out_scale;

  static LnConsts make(std::span<const double> gamma, std::span<const double> beta,
                       Scale out_scale, int c = kDefaultDyadicShift) {
    if (gamma.empty() || gamma.size() != beta.size()) {
      throw ConfigError("LayerNorm gamma/beta must be non-empty and equal length");
    }
    LnConsts k;
    k.d = gamma.size();
    k.out_scale = out_scale;
    for (std::size_t i = 0; i < k.d; ++i) {
      k.gamma.push_back(dyadic_coeff(gamma[i], c));
      k.beta.push_back(quantize_i32(beta[i], out_scale));
    }
    return k;
  }
};

struct LayerNormResult {
  std::vector<std::int32_t> out;
  int sqrt_iterations = 0;
};

inline LayerNormResult i_layernorm(std::span<const std::int32_t> row, Scale /*s*/,
                                   const LnConsts& k, SaturationStats* stats = nullptr) {
  if (row.size() != k.d) {
    throw UsageError("i_layernorm: row length " + std::to_string(row.size()) + " != d " +
                     std::to_string(k.d));
  }
  const auto d = static_cast<std::int64_t>(k.d);
  std::int64_t sum = 0;
  for (const std::int32_t v : row) sum += v;
  const std::int64_t mu = detail::floor_div(sum, d);
  std::int64_t sq = 0;
  for (const std::int32_t v : row) sq += (v - mu) * (v - mu);
  const std::int64_t var = sq / d;
  const SqrtResult sd = i_sqrt(var);
  const auto r = static_cast<std::int64_t>(std::llround(1.0 / k.out_scale.value()));

  LayerNormResult res;
  res.sqrt_iterations = sd.iterations;
  res.out.resize(k.d);
  for (std::size_t i = 0; i < k.d; ++i) {
    const std::int64_t norm = sd.root > 0 ? ((row[i] - mu) * r) / sd.root : 0;
    const std::int32_t scaled =
        dyadic_apply(saturate_i32(norm, stats ? &stats->kernel : nullptr), k.gamma[i], stats);
    res.out[i] = saturate_i32(std::int64_t{scaled} + k.beta[i], stats ? &stats->accumulator : nullptr);
  }
  return res;
}

// Row-wise drivers over matrices. Rows are independent.

inline QMat32 softmax_rows(const QMat32& x, const ExpConsts& k, Scale out_scale,
                           int out_bits = 32, SaturationStats* stats = nullptr) {
  QMat32 out(x.rows, x.cols, out_scale);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto r = i_softmax(x.row(i), x.scale, k, out_scale, out_bits, stats);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

inline QMat32 gelu_map(const QMat32& x, const GeluConsts& k, SaturationStats* stats = nullptr) {
  QMat32 out(x.rows, x.cols, k.s_out);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = i_gelu(x.data[i], x.scale, k, stats).q;
  return out;
}

struct LayerNormRows {
  QMat32 out;
  int max_sqrt_iterations = 0;  // rows run concurrently; the block waits for the slowest
};

inline LayerNormRows layernorm_rows(const QMat32& x, const LnConsts& k,
                                    SaturationStats* stats = nullptr) {
  LayerNormRows res{QMat32(x.rows, x.cols, k.out_scale), 0};
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = i_layernorm(x.row(i), x.scale, k, stats);
    std::copy(r.out.begin(), r.out.end(), res.out.row(i).begin());
    res.max_sqrt_iterations = std::max(res.max_sqrt_iterations, r.sqrt_iterations);
  }
  return res;
}

}  // namespace qtx
