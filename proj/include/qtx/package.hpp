// SPDX-License-Identifier: Apache-2.0
//
// On-disk model package: manifest.json (dims, junction scales, dyadic
// precisions, kernel constants, tensor index) next to raw little-endian
// blobs under blobs/. Every blob is listed with its shape and crc32.
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qtx/config.hpp"
#include "qtx/errors.hpp"
#include "qtx/refmodel.hpp"
#include "qtx/xblocks.hpp"

namespace qtx {

using json = nlohmann::json;

inline constexpr int kPackageVersion = 1;

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline std::string crc32_hex(const void* data, std::size_t n) {
  const auto crc = ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n));
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc;
  return os.str();
}

/// Shape-qualified crc32 of an integer matrix.
template <typename T>
std::string digest(const QMat<T>& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols) + ":" +
         crc32_hex(m.data.data(), m.data.size() * sizeof(T));
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

inline json to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"k_heads", c.k_heads},
          {"m", c.m},
          {"d_ff", c.d_ff},
          {"n_layers", c.n_layers},
          {"clock_period_ns", c.clock_period_ns},
          {"heads_parallel", c.heads_parallel},
          {"tile", {c.tile.rows, c.tile.cols}},
          {"scale_mode", to_string(c.scale_mode)},
          {"control_overhead", c.control_overhead}};
}

/// Missing keys keep the toy defaults.
inline ModelConfig config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.d = j.value("d", c.d);
    c.k_heads = j.value("k_heads", c.k_heads);
    c.m = j.value("m", c.m);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.clock_period_ns = j.value("clock_period_ns", c.clock_period_ns);
    c.heads_parallel = j.value("heads_parallel", c.heads_parallel);
    if (j.contains("tile")) {
      c.tile.rows = j.at("tile").at(0).get<std::size_t>();
      c.tile.cols = j.at("tile").at(1).get<std::size_t>();
    }
    if (j.contains("scale_mode")) c.scale_mode = parse_scale_mode(j.at("scale_mode").get<std::string>());
    c.control_overhead = j.value("control_overhead", c.control_overhead);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_bytes(const std::filesystem::path& p, const void* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw FormatError("write failed: " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) { write_bytes(p, s.data(), s.size()); }

/// Preset name ("toy", "roberta-base") or path to a JSON config file.
inline ModelConfig load_config(const std::string& source) {
  if (source == "toy") return ModelConfig::toy();
  if (source == "roberta-base") return ModelConfig::roberta_base();
  json j;
  try {
    j = json::parse(read_text(source));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + source + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Package
// ---------------------------------------------------------------------------

struct CalibrationInfo {
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  ref::CalibrationOptions options;
  std::map<std::string, double> max_abs;  // per junction
};

struct Package {
  ModelConfig config;
  std::uint64_t seed = 0;  // toy weight seed
  ref::FitSet fits;
  ref::FloatModel float_model;
  std::optional<CalibrationInfo> calibration;
  std::optional<QuantModel> quant;  // present once calibrated
};

namespace detail {

/// Collects blobs while the manifest is built; reads them back with checks.
class BlobStore {
 public:
  explicit BlobStore(std::filesystem::path root) : root_(std::move(root)) {}

  template <typename T>
  json put(const std::string& name, const std::vector<T>& v, std::vector<std::size_t> shape,
           const char* dtype) {
    const std::string file = "blobs/" + name + ".bin";
    const std::size_t n = v.size() * sizeof(T);
    pending_.emplace_back(file, std::string(reinterpret_cast<const char*>(v.data()), n));
    return {{"file", file}, {"dtype", dtype}, {"shape", shape}, {"crc32", crc32_hex(v.data(), n)}};
  }

  template <typename T>
  std::vector<T> get(const json& entry, const char* dtype) const {
    if (entry.at("dtype").get<std::string>() != dtype) {
      throw FormatError("blob " + entry.at("file").get<std::string>() + " has dtype " +
                        entry.at("dtype").get<std::string>() + ", expected " + dtype);
    }
    std::size_t count = 1;
    for (const auto& s : entry.at("shape")) count *= s.get<std::size_t>();
    const std::string bytes = read_text(root_ / entry.at("file").get<std::string>());
    if (bytes.size() != count * sizeof(T)) {
      throw FormatError("blob " + entry.at("file").get<std::string>() + " has " +
                        std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(count * sizeof(T)));
    }
    if (crc32_hex(bytes.data(), bytes.size()) != entry.at("crc32").get<std::string>()) {
      throw FormatError("checksum mismatch in " + entry.at("file").get<std::string>());
    }
    std::vector<T> v(count);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
  }

  void flush() const {
    std::filesystem::create_directories(root_ / "blobs");
    for (const auto& [file, bytes] : pending_) write_bytes(root_ / file, bytes.data(), bytes.size());
  }

 private:
  std::filesystem::path root_;
  std::vector<std::pair<std::string, std::string>> pending_;
};

inline json poly_json(const PolyCoeffs& k) {
  return {{"a", k.a}, {"b", k.b}, {"c", k.c}, {"lo", k.lo}, {"hi", k.hi}};
}
inline PolyCoeffs poly_from(const json& j) {
  return {j.at("a").get<double>(), j.at("b").get<double>(), j.at("c").get<double>(),
          j.at("lo").get<double>(), j.at("hi").get<double>()};
}
inline json fit_json(const ref::FitResult& f) {
  return {{"coeffs", poly_json(f.coeffs)}, {"max_abs_err", f.max_abs_err}, {"rms_err", f.rms_err}};
}
inline ref::FitResult fit_from(const json& j) {
  return {poly_from(j.at("coeffs")), j.at("max_abs_err").get<double>(), j.at("rms_err").get<double>()};
}

inline Scale scale_from(const json& j) { return Scale(j.get<double>()); }
inline json dyadic_json(DyadicScale d) { return {d.b, d.c}; }
inline DyadicScale dyadic_from(const json& j) { return {j.at(0).get<std::int32_t>(), j.at(1).get<int>()}; }
inline json junction_json(const Junction& j) { return {{"scale", j.scale.value()}, {"shift", j.shift}}; }
inline Junction junction_from(const json& j) { return {scale_from(j.at("scale")), j.at("shift").get<int>()}; }

inline json put_mat(BlobStore& bs, const std::string& name, const QMat8& m) {
  json e = bs.put(name, m.data, {m.rows, m.cols}, "i8");
  e["scale"] = m.scale.value();
  return e;
}
inline QMat8 get_mat(const BlobStore& bs, const json& e) {
  auto data = bs.get<std::int8_t>(e, "i8");
  return QMat8(e.at("shape").at(0).get<std::size_t>(), e.at("shape").at(1).get<std::size_t>(),
               std::move(data), scale_from(e.at("scale")));
}

inline json put_bias(BlobStore& bs, const std::string& name, const Bias& b) {
  json e = bs.put(name, b.values, {b.values.size()}, "i32");
  e["align"] = dyadic_json(b.align);
  return e;
}
inline Bias get_bias(const BlobStore& bs, const json& e) {
  return {bs.get<std::int32_t>(e, "i32"), dyadic_from(e.at("align"))};
}

inline json put_fmat(BlobStore& bs, const std::string& name, const ref::Mat& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
  return bs.put(name, v, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, "f32");
}
inline ref::Mat get_fmat(const BlobStore& bs, const json& e) {
  const auto v = bs.get<float>(e, "f32");
  ref::Mat m(e.at("shape").at(0).get<Eigen::Index>(), e.at("shape").at(1).get<Eigen::Index>());
  for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = v[i];
  return m;
}
inline json put_fvec(BlobStore& bs, const std::string& name, const ref::RowVec& r) {
  std::vector<float> v(static_cast<std::size_t>(r.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(r(static_cast<Eigen::Index>(i)));
  return bs.put(name, v, {v.size()}, "f32");
}
inline ref::RowVec get_fvec(const BlobStore& bs, const json& e) {
  const auto v = bs.get<float>(e, "f32");
  ref::RowVec r(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) r(static_cast<Eigen::Index>(i)) = v[i];
  return r;
}

inline json exp_json(const ExpConsts& k) {
  return {{"q1", k.q1}, {"q2", k.q2}, {"q3", k.q3}, {"q4", k.q4}, {"q_floor", k.q_floor},
          {"s_e", k.s_e.value()}, {"s_pe", k.s_pe.value()}, {"s_out", k.s_out.value()},
          {"fit", poly_json(k.fit)}};
}
inline ExpConsts exp_from(const json& j) {
  ExpConsts k;
  k.q1 = j.at("q1").get<std::int32_t>();
  k.q2 = j.at("q2").get<std::int32_t>();
  k.q3 = j.at("q3").get<std::int32_t>();
  k.q4 = j.at("q4").get<std::int32_t>();
  k.q_floor = j.at("q_floor").get<std::int32_t>();
  k.s_e = scale_from(j.at("s_e"));
  k.s_pe = scale_from(j.at("s_pe"));
  k.s_out = scale_from(j.at("s_out"));
  k.fit = poly_from(j.at("fit"));
  return k;
}

inline json gelu_json(const GeluConsts& k) {
  return {{"q5", k.q5}, {"clip", k.clip}, {"q6", k.q6}, {"q7", k.q7}, {"q8", k.q8},
          {"erf_sign", k.erf_sign}, {"out_shift", k.out_shift}, {"s", k.s.value()},
          {"s_erf_in", k.s_erf_in.value()}, {"s_erf", k.s_erf.value()},
          {"s_out", k.s_out.value()}, {"fit", poly_json(k.fit)}};
}
inline GeluConsts gelu_from(const json& j) {
  GeluConsts k;
  k.q5 = j.at("q5").get<double>();
  k.clip = j.at("clip").get<std::int32_t>();
  k.q6 = j.at("q6").get<std::int32_t>();
  k.q7 = j.at("q7").get<std::int32_t>();
  k.q8 = j.at("q8").get<std::int32_t>();
  k.erf_sign = j.at("erf_sign").get<int>();
  k.out_shift = j.at("out_shift").get<int>();
  k.s = scale_from(j.at("s"));
  k.s_erf_in = scale_from(j.at("s_erf_in"));
  k.s_erf = scale_from(j.at("s_erf"));
  k.s_out = scale_from(j.at("s_out"));
  k.fit = poly_from(j.at("fit"));
  return k;
}

inline json put_ln(BlobStore& bs, const std::string& name, const LnConsts& k) {
  std::vector<std::int32_t> gb, gc;
  for (const DyadicScale& g : k.gamma) {
    gb.push_back(g.b);
    gc.push_back(g.c);
  }
  return {{"d", k.d},
          {"out_scale", k.out_scale.value()},
          {"gamma_b", bs.put(name + ".gamma_b", gb, {k.d}, "i32")},
          {"gamma_c", bs.put(name + ".gamma_c", gc, {k.d}, "i32")},
          {"beta", bs.put(name + ".beta", k.beta, {k.d}, "i32")}};
}
inline LnConsts get_ln(const BlobStore& bs, const json& j) {
  LnConsts k;
  k.d = j.at("d").get<std::size_t>();
  k.out_scale = scale_from(j.at("out_scale"));
  const auto gb = bs.get<std::int32_t>(j.at("gamma_b"), "i32");
  const auto gc = bs.get<std::int32_t>(j.at("gamma_c"), "i32");
  k.beta = bs.get<std::int32_t>(j.at("beta"), "i32");
  if (gb.size() != k.d || gc.size() != k.d || k.beta.size() != k.d) {
    throw FormatError("LayerNorm constants do not match d");
  }
  for (std::size_t i = 0; i < k.d; ++i) k.gamma.push_back({gb[i], static_cast<int>(gc[i])});
  return k;
}

inline json float_layer_json(BlobStore& bs, const std::string& p, const ref::FloatLayer& w) {
  json heads = json::array();
  for (std::size_t h = 0; h < w.heads.size(); ++h) {
    const std::string hp = p + "h" + std::to_string(h) + ".";
    const ref::FloatHead& f = w.heads[h];
    heads.push_back({{"wq", put_fmat(bs, hp + "wq", f.wq)}, {"wk", put_fmat(bs, hp + "wk", f.wk)},
                     {"wv", put_fmat(bs, hp + "wv", f.wv)}, {"bq", put_fvec(bs, hp + "bq", f.bq)},
                     {"bk", put_fvec(bs, hp + "bk", f.bk)}, {"bv", put_fvec(bs, hp + "bv", f.bv)}});
  }
  return {{"heads", heads},
          {"wo", put_fmat(bs, p + "wo", w.wo)}, {"bo", put_fvec(bs, p + "bo", w.bo)},
          {"w1", put_fmat(bs, p + "w1", w.w1)}, {"b1", put_fvec(bs, p + "b1", w.b1)},
          {"w2", put_fmat(bs, p + "w2", w.w2)}, {"b2", put_fvec(bs, p + "b2", w.b2)},
          {"ln1_gamma", put_fvec(bs, p + "ln1_gamma", w.ln1_gamma)},
          {"ln1_beta", put_fvec(bs, p + "ln1_beta", w.ln1_beta)},
          {"ln2_gamma", put_fvec(bs, p + "ln2_gamma", w.ln2_gamma)},
          {"ln2_beta", put_fvec(bs, p + "ln2_beta", w.ln2_beta)}};
}

inline ref::FloatLayer float_layer_from(const BlobStore& bs, const json& j) {
  ref::FloatLayer w;
  for (const json& h : j.at("heads")) {
    w.heads.push_back({get_fmat(bs, h.at("wq")), get_fmat(bs, h.at("wk")), get_fmat(bs, h.at("wv")),
                       get_fvec(bs, h.at("bq")), get_fvec(bs, h.at("bk")), get_fvec(bs, h.at("bv"))});
  }
  w.wo = get_fmat(bs, j.at("wo"));
  w.bo = get_fvec(bs, j.at("bo"));
  w.w1 = get_fmat(bs, j.at("w1"));
  w.b1 = get_fvec(bs, j.at("b1"));
  w.w2 = get_fmat(bs, j.at("w2"));
  w.b2 = get_fvec(bs, j.at("b2"));
  w.ln1_gamma = get_fvec(bs, j.at("ln1_gamma"));
  w.ln1_beta = get_fvec(bs, j.at("ln1_beta"));
  w.ln2_gamma = get_fvec(bs, j.at("ln2_gamma"));
  w.ln2_beta = get_fvec(bs, j.at("ln2_beta"));
  return w;
}

inline json int_layer_json(BlobStore& bs, const std::string& p, const LayerWeights& lw) {
  json heads = json::array();
  for (std::size_t h = 0; h < lw.heads.size(); ++h) {
    const std::string hp = p + "h" + std::to_string(h) + ".";
    const HeadWeights& w = lw.heads[h];
    heads.push_back({{"wq", put_mat(bs, hp + "wq", w.wq)}, {"wk", put_mat(bs, hp + "wk", w.wk)},
                     {"wv", put_mat(bs, hp + "wv", w.wv)}, {"bq", put_bias(bs, hp + "bq", w.bq)},
                     {"bk", put_bias(bs, hp + "bk", w.bk)}, {"bv", put_bias(bs, hp + "bv", w.bv)},
                     {"q", junction_json(w.q)}, {"k", junction_json(w.k)}, {"v", junction_json(w.v)},
                     {"cat", junction_json(w.cat)}, {"score_shift", w.score_shift},
                     {"exp", exp_json(w.exp)}});
  }
  return {{"in_scale", lw.in_scale.value()},
          {"attn_shift", lw.attn_shift},
          {"heads", heads},
          {"prob", junction_json(lw.prob)},
          {"cat_scale", lw.cat_scale.value()},
          {"wo", put_mat(bs, p + "wo", lw.wo)},
          {"bo", put_bias(bs, p + "bo", lw.bo)},
          {"res1", junction_json(lw.res1)},
          {"ln1", put_ln(bs, p + "ln1", lw.ln1)},
          {"ln1_out", junction_json(lw.ln1_out)},
          {"w1", put_mat(bs, p + "w1", lw.w1)},
          {"b1", put_bias(bs, p + "b1", lw.b1)},
          {"gelu_coarsen", lw.gelu_coarsen},
          {"gelu", gelu_json(lw.gelu)},
          {"gelu_out", junction_json(lw.gelu_out)},
          {"w2", put_mat(bs, p + "w2", lw.w2)},
          {"b2", put_bias(bs, p + "b2", lw.b2)},
          {"res2", junction_json(lw.res2)},
          {"ln2", put_ln(bs, p + "ln2", lw.ln2)},
          {"out", junction_json(lw.out)}};
}

inline LayerWeights int_layer_from(const BlobStore& bs, const json& j) {
  LayerWeights lw;
  lw.in_scale = scale_from(j.at("in_scale"));
  lw.attn_shift = j.at("attn_shift").get<int>();
  for (const json& h : j.at("heads")) {
    HeadWeights w;
    w.wq = get_mat(bs, h.at("wq"));
    w.wk = get_mat(bs, h.at("wk"));
    w.wv = get_mat(bs, h.at("wv"));
    w.bq = get_bias(bs, h.at("bq"));
    w.bk = get_bias(bs, h.at("bk"));
    w.bv = get_bias(bs, h.at("bv"));
    w.q = junction_from(h.at("q"));
    w.k = junction_from(h.at("k"));
    w.v = junction_from(h.at("v"));
    w.cat = junction_from(h.at("cat"));
    w.score_shift = h.at("score_shift").get<int>();
    w.exp = exp_from(h.at("exp"));
    lw.heads.push_back(std::move(w));
  }
  lw.prob = junction_from(j.at("prob"));
  lw.cat_scale = scale_from(j.at("cat_scale"));
  lw.wo = get_mat(bs, j.at("wo"));
  lw.bo = get_bias(bs, j.at("bo"));
  lw.res1 = junction_from(j.at("res1"));
  lw.ln1 = get_ln(bs, j.at("ln1"));
  lw.ln1_out = junction_from(j.at("ln1_out"));
  lw.w1 = get_mat(bs, j.at("w1"));
  lw.b1 = get_bias(bs, j.at("b1"));
  lw.gelu_coarsen = j.at("gelu_coarsen").get<int>();
  lw.gelu = gelu_from(j.at("gelu"));
  lw.gelu_out = junction_from(j.at("gelu_out"));
  lw.w2 = get_mat(bs, j.at("w2"));
  lw.b2 = get_bias(bs, j.at("b2"));
  lw.res2 = junction_from(j.at("res2"));
  lw.ln2 = get_ln(bs, j.at("ln2"));
  lw.out = junction_from(j.at("out"));
  return lw;
}

}  // namespace detail

/// Writes manifest.json and blobs/ under `dir` (created if needed).
inline void save_package(const Package& pkg, const std::filesystem::path& dir) {
  detail::BlobStore bs(dir);
  json m;
  m["format_version"] = kPackageVersion;
  m["config"] = to_json(pkg.config);
  m["seed"] = pkg.seed;
  m["fits"] = {{"exp", detail::fit_json(pkg.fits.exp)}, {"erf", detail::fit_json(pkg.fits.erf)}};
  json fl = json::array();
  for (std::size_t l = 0; l < pkg.float_model.layers.size(); ++l) {
    fl.push_back(detail::float_layer_json(bs, "float." + ref::layer_prefix(l), pkg.float_model.layers[l]));
  }
  m["float_layers"] = fl;
  if (pkg.calibration) {
    const CalibrationInfo& c = *pkg.calibration;
    m["calibration"] = {{"samples", c.samples},
                        {"seed", c.seed},
                        {"percentile", c.options.percentile},
                        {"percentile_value", c.options.percentile_value},
                        {"min_scale", c.options.min_scale},
                        {"max_abs", c.max_abs}};
  }
  if (pkg.quant) {
    json il = json::array();
    for (std::size_t l = 0; l < pkg.quant->layers.size(); ++l) {
      il.push_back(detail::int_layer_json(bs, "int." + ref::layer_prefix(l), pkg.quant->layers[l]));
    }
    m["integer"] = {{"input_scale", pkg.quant->input_scale.value()}, {"layers", il}};
  }
  std::filesystem::create_directories(dir);
  bs.flush();
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline Package load_package(const std::filesystem::path& dir) {
  const std::filesystem::path manifest = dir / "manifest.json";
  if (!std::filesystem::exists(manifest)) throw FormatError("no manifest.json in " + dir.string());
  try {
    const json m = json::parse(read_text(manifest));
    if (m.at("format_version").get<int>() != kPackageVersion) {
      throw FormatError("unsupported package version " + m.at("format_version").dump());
    }
    detail::BlobStore bs(dir);
    Package pkg;
    pkg.config = config_from_json(m.at("config"));
    pkg.seed = m.at("seed").get<std::uint64_t>();
    pkg.fits = {detail::fit_from(m.at("fits").at("exp")), detail::fit_from(m.at("fits").at("erf"))};
    for (const json& l : m.at("float_layers")) pkg.float_model.layers.push_back(detail::float_layer_from(bs, l));
    if (m.contains("calibration")) {
      const json& c = m.at("calibration");
      CalibrationInfo info;
      info.samples = c.at("samples").get<std::size_t>();
      info.seed = c.at("seed").get<std::uint64_t>();
      info.options.percentile = c.at("percentile").get<bool>();
      info.options.percentile_value = c.at("percentile_value").get<double>();
      info.options.min_scale = c.at("min_scale").get<double>();
      info.max_abs = c.at("max_abs").get<std::map<std::string, double>>();
      pkg.calibration = std::move(info);
    }
    if (m.contains("integer")) {
      QuantModel q;
      q.config = pkg.config;
      q.fits = pkg.fits;
      q.input_scale = detail::scale_from(m.at("integer").at("input_scale"));
      for (const json& l : m.at("integer").at("layers")) q.layers.push_back(detail::int_layer_from(bs, l));
      pkg.quant = std::move(q);
    }
    return pkg;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + manifest.string() + ": " + e.what());
  }
}

}  // namespace qtx
