// SPDX-License-Identifier: Apache-2.0
//
// Control-unit model. Blocks run one after another (MHSA, LN, FFN, LN per
// layer); each block transaction is a Start handshake, a run of internal
// states, a Valid when the first output column leaves the block, and a Done.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qtx/config.hpp"
#include "qtx/errors.hpp"
#include "qtx/timing.hpp"
#include "qtx/xblocks.hpp"

namespace qtx {

enum class Signal { start, state, valid, done };

inline const char* to_string(Signal s) {
  switch (s) {
    case Signal::start: return "Start";
    case Signal::state: return "state";
    case Signal::valid: return "Valid";
    case Signal::done: return "Done";
  }
  return "?";
}

struct TraceEvent {
  std::uint64_t cycle = 0;
  std::string block;  // L{layer}.{MHSA|LN1|FFN|LN2}
  Signal signal = Signal::state;
  std::string state;  // only for Signal::state
};

struct FsmTrace {
  std::vector<TraceEvent> events;

  /// One event per line: "<cycle> <block> <Start|Valid|Done|state=NAME>".
  std::string to_text() const {
    std::ostringstream os;
    for (const TraceEvent& e : events) {
      os << e.cycle << ' ' << e.block << ' ';
      if (e.signal == Signal::state) {
        os << "state=" << e.state;
      } else {
        os << to_string(e.signal);
      }
      os << '\n';
    }
    return os.str();
  }
};

struct BlockCycles {
  std::size_t layer = 0;
  std::string block;
  std::uint64_t cycles = 0;  // including the block's control overhead
};

struct CycleReport {
  std::vector<BlockCycles> blocks;
  std::vector<LayerTiming> layers;
  std::uint64_t total_cycles = 0;
  double clock_period_ns = 0.0;
  int worst_case_sqrt_iters = kWorstCaseSqrtIters;
  bool measured = false;  // sqrt iterations taken from a data run

  double clock_mhz() const { return 1000.0 / clock_period_ns; }
  double latency_ms() const { return static_cast<double>(total_cycles) * clock_period_ns * 1e-6; }

  /// Sum of one block kind over all layers.
  std::uint64_t block_total(const std::string& kind) const {
    std::uint64_t t = 0;
    for (const BlockCycles& b : blocks) t += b.block == kind ? b.cycles : 0;
    return t;
  }
};

namespace detail {

inline std::string block_name(std::size_t layer, const char* kind) {
  return "L" + std::to_string(layer) + "." + kind;
}

struct Emitter {
  FsmTrace* trace;
  std::uint64_t now = 0;

  void emit(std::uint64_t cycle, const std::string& block, Signal s, std::string state = {}) {
    if (trace) trace->events.push_back({cycle, block, s, std::move(state)});
  }

  /// Start handshake, then the state segments back to back. `valid_at` is an
  /// offset from the first segment.
  void transaction(const std::string& block, int overhead,
                   const std::vector<std::pair<std::string, std::uint64_t>>& segments,
                   std::uint64_t valid_at) {
    emit(now, block, Signal::start);
    const std::uint64_t body = now + static_cast<std::uint64_t>(overhead);
    std::uint64_t t = body;
    bool valid_emitted = false;
    for (const auto& [name, len] : segments) {
      if (!valid_emitted && body + valid_at < t) {
        emit(body + valid_at, block, Signal::valid);
        valid_emitted = true;
      }
      emit(t, block, Signal::state, name);
      t += len;
    }
    if (!valid_emitted) emit(body + valid_at, block, Signal::valid);
    emit(t, block, Signal::done);
    now = t;
  }
};

}  // namespace detail

/// Builds the report and trace from per-layer timings (predicted or measured).
inline CycleReport assemble(const ModelConfig& cfg, const std::vector<LayerTiming>& layers,
                            bool measured, FsmTrace* trace = nullptr) {
  CycleReport rep;
  rep.layers = layers;
  rep.clock_period_ns = cfg.clock_period_ns;
  rep.measured = measured;
  detail::Emitter em{trace};
  const int oh = cfg.control_overhead;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerTiming& t = layers[l];

    std::vector<std::pair<std::string, std::uint64_t>> seg;
    for (std::size_t b = 0; b < t.mhsa.batches.size(); ++b) {
      const HeadTiming& h = t.mhsa.batches[b];
      const std::string p = "B" + std::to_string(b) + ".";
      seg.push_back({p + "QKV", h.qkv});
      seg.push_back({p + "QK", h.qk});
      seg.push_back({p + "SOFTMAX", h.softmax});
      seg.push_back({p + "PV", h.pv});
    }
    seg.push_back({"WO", t.mhsa.wo});
    const std::uint64_t wo_start = t.mhsa.total() - t.mhsa.wo;
    em.transaction(detail::block_name(l, "MHSA"), oh, seg, wo_start + cfg.d);
    rep.blocks.push_back({l, "MHSA", t.mhsa.total() + static_cast<std::uint64_t>(oh)});

    auto ln = [&](const LnTiming& n, const char* kind) {
      em.transaction(detail::block_name(l, kind), oh,
                     {{"MEAN", 1}, {"VAR_SQRT", 1 + static_cast<std::uint64_t>(n.sqrt_iterations)},
                      {"OUTPUT", n.pipeline - 2}},
                     n.total() - cfg.d);
      rep.blocks.push_back({l, kind, n.total() + static_cast<std::uint64_t>(oh)});
    };
    ln(t.ln1, "LN1");

    em.transaction(detail::block_name(l, "FFN"), oh, {{"MM1", t.ffn.mm1}, {"MM2", t.ffn.mm2}},
                   t.ffn.mm1 + cfg.d_ff);
    rep.blocks.push_back({l, "FFN", t.ffn.total() + static_cast<std::uint64_t>(oh)});

    ln(t.ln2, "LN2");
    rep.total_cycles += t.total();
  }
  return rep;
}

/// Shape-only cycle model with worst-case square-root iterations.
inline CycleReport schedule(const ModelConfig& cfg, std::size_t n_layers, FsmTrace* trace = nullptr) {
  cfg.validate();
  return assemble(cfg, std::vector<LayerTiming>(n_layers, predict_layer(cfg)), false, trace);
}

struct TracedRun {
  EncoderOutput output;
  CycleReport report;
  FsmTrace trace;
  SaturationStats saturation;
};

/// Integer inference with cycle accounting from the data run.
inline TracedRun run_with_trace(const QuantModel& model, const QMat8& x) {
  TracedRun r;
  r.output = run_encoder(model, x, &r.saturation);
  r.report = assemble(model.config, r.output.timings, true, &r.trace);
  return r;
}

// ---------------------------------------------------------------------------
// Trace checks
// ---------------------------------------------------------------------------

/// Empty string if the trace is well formed, else the first violation.
/// Per block: Start, then Valid, then Done, in strictly increasing cycles,
/// every state inside [Start, Done]. Globally: a block only sees Start
/// after every earlier transaction is Done.
inline std::string check_trace(const FsmTrace& trace) {
  struct Open {
    std::uint64_t start = 0, last = 0;
    bool valid = false;
  };
  std::map<std::string, Open> open;
  std::map<std::string, std::uint64_t> last_done;
  for (const TraceEvent& e : trace.events) {
    auto it = open.find(e.block);
    switch (e.signal) {
      case Signal::start:
        if (it != open.end()) return "Start of " + e.block + " while it is not Done";
        if (!open.empty()) return "Start of " + e.block + " while " + open.begin()->first + " is not Done";
        if (auto d = last_done.find(e.block); d != last_done.end() && e.cycle <= d->second) {
          return "cycles of " + e.block + " do not increase";
        }
        open[e.block] = {e.cycle, e.cycle, false};
        break;
      case Signal::state:
        if (it == open.end()) return "state outside a transaction of " + e.block;
        if (e.cycle < it->second.last) return "state of " + e.block + " goes back in time";
        break;
      case Signal::valid:
        if (it == open.end()) return "Valid without Start on " + e.block;
        if (it->second.valid) return "second Valid on " + e.block;
        if (e.cycle <= it->second.start) return "Valid not after Start on " + e.block;
        it->second.valid = true;
        it->second.last = e.cycle;
        break;
      case Signal::done:
        if (it == open.end()) return "Done without Start on " + e.block;
        if (!it->second.valid) return "Done before Valid on " + e.block;
        if (e.cycle <= it->second.last) return "Done not after Valid on " + e.block;
        last_done[e.block] = e.cycle;
        open.erase(it);
        break;
    }
  }
  if (!open.empty()) return "unmatched Start on " + open.begin()->first;
  return {};
}

// ---------------------------------------------------------------------------
// Latency sweep over parallelism settings
// ---------------------------------------------------------------------------

struct SweepPoint {
  std::size_t heads_parallel = 0;
  TileShape tile;
  std::uint64_t total_cycles = 0;
  double latency_ms = 0.0;
};

struct Sweep {
  std::vector<SweepPoint> points;
  std::optional<SweepPoint> below;  // closest latency <= target
  std::optional<SweepPoint> above;  // closest latency >= target
};

/// Evaluates every (heads_parallel, tile) pair; heads_parallel values that do
/// not change the batch count are kept, since the caller chose them.
inline Sweep sweep_latency(ModelConfig cfg, const std::vector<std::size_t>& heads_parallel,
                           const std::vector<TileShape>& tiles, double target_ms) {
  Sweep s;
  for (const std::size_t hp : heads_parallel) {
    for (const TileShape& t : tiles) {
      cfg.heads_parallel = hp;
      cfg.tile = t;
      const CycleReport r = schedule(cfg, cfg.n_layers);
      SweepPoint p{hp, t, r.total_cycles, r.latency_ms()};
      s.points.push_back(p);
      if (p.latency_ms <= target_ms && (!s.below || p.latency_ms > s.below->latency_ms)) s.below = p;
      if (p.latency_ms >= target_ms && (!s.above || p.latency_ms < s.above->latency_ms)) s.above = p;
    }
  }
  return s;
}

}  // namespace qtx
