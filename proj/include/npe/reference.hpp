#pragma once

// One BERT encoder evaluated two ways: a long-double reference and the
// fixed-point pipeline (MMU matmuls + table-based nonlinearities), with
// per-stage taps and error metrics between them.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <vector>

#include "npe/io.hpp"
#include "npe/mmu.hpp"
#include "npe/nonlinear.hpp"
#include "npe/workload.hpp"

namespace npe {

struct EncoderWeights {
  ModelConfig cfg;
  std::uint64_t seed = 0;
  std::vector<RealMatrix> wq, wk, wv;  // per head, H x H/A
  RealMatrix wo;                       // H x H
  RealMatrix w1;                       // H x ff
  std::vector<double> b1;              // ff
  RealMatrix w2;                       // ff x H
  std::vector<double> b2;              // H
  LayerNormParams ln_a, ln_b;

  void validate() const {
    cfg.validate();
    const std::size_t h = static_cast<std::size_t>(cfg.H), d = static_cast<std::size_t>(cfg.head_dim()),
                      f = static_cast<std::size_t>(cfg.ff_dim), a = static_cast<std::size_t>(cfg.A);
    auto shape = [](const RealMatrix& m, std::size_t r, std::size_t c, const char* what) {
      if (m.rows() != r || m.cols() != c) throw ShapeError(std::string("weights: ") + what + " has wrong shape");
    };
    if (wq.size() != a || wk.size() != a || wv.size() != a) throw ShapeError("weights: one Q/K/V matrix per head");
    for (std::size_t i = 0; i < a; ++i) {
      shape(wq[i], h, d, "W_Q");
      shape(wk[i], h, d, "W_K");
      shape(wv[i], h, d, "W_V");
    }
    shape(wo, h, h, "W_O");
    shape(w1, h, f, "W_1");
    shape(w2, f, h, "W_2");
    if (b1.size() != f || b2.size() != h) throw ShapeError("weights: bias length");
    ln_a.validate(h);
    ln_b.validate(h);
  }
};

inline EncoderWeights random_weights(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.02) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto mat = [&](std::size_t r, std::size_t c) {
    RealMatrix m(r, c);
    for (auto& v : m.data()) v = scale * nd(rng);
    return m;
  };
  auto vec = [&](std::size_t n, double mean) {
    std::vector<double> v(n);
    for (auto& x : v) x = mean + scale * nd(rng);
    return v;
  };
  const std::size_t h = static_cast<std::size_t>(cfg.H), d = static_cast<std::size_t>(cfg.head_dim()),
                    f = static_cast<std::size_t>(cfg.ff_dim);
  EncoderWeights w;
  w.cfg = cfg;
  w.seed = seed;
  for (int i = 0; i < cfg.A; ++i) {
    w.wq.push_back(mat(h, d));
    w.wk.push_back(mat(h, d));
    w.wv.push_back(mat(h, d));
  }
  w.wo = mat(h, h);
  w.w1 = mat(h, f);
  w.b1 = vec(f, 0.0);
  w.w2 = mat(f, h);
  w.b2 = vec(h, 0.0);
  w.ln_a = {vec(h, 1.0), vec(h, 0.0)};
  w.ln_b = {vec(h, 1.0), vec(h, 0.0)};
  return w;
}

inline RealMatrix random_input(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> nd(0.0, 1.0);
  RealMatrix x(static_cast<std::size_t>(cfg.seq_len), static_cast<std::size_t>(cfg.H));
  for (auto& v : x.data()) v = nd(rng);
  return x;
}

// Named intermediate results, all as real matrices.
using StageTaps = std::map<std::string, RealMatrix>;

struct ForwardOptions {
  MmuConfig mmu{};
  const NonlinearTables* tables = nullptr;  // defaults to the shipped tables
  AttentionScale scale{};
  StageTaps* taps = nullptr;
};

namespace detail {

inline RealMatrix matmul_ref(const RealMatrix& a, const RealMatrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  RealMatrix out(a.rows(), b.cols());
  // Double accumulation: over K <= 3072 terms of O(1) magnitude the rounding
  // error is ~1e-13, far below anything the fixed-point path can resolve.
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double x = a(i, k);
      const double* brow = &b.data()[k * b.cols()];
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += x * brow[j];
    }
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = acc[j];
  }
  return out;
}

inline RealMatrix transpose(const RealMatrix& a) {
  RealMatrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline FixedMatrix quantize_matrix(const RealMatrix& m, const Format& f) {
  FixedMatrix q(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) q.data()[i] = quantize(m.data()[i], f);
  return q;
}

inline RealMatrix dequantize_matrix(const FixedMatrix& m) {
  RealMatrix r(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) r.data()[i] = m.data()[i].to_double();
  return r;
}

inline FixedMatrix requantize_matrix(const FixedMatrix& m, const Format& f) {
  FixedMatrix r(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) r.data()[i] = requantize(m.data()[i], f);
  return r;
}

// Operand formats fed to the MMU for each precision.
struct OperandFormats {
  Format act, prob, weight;
};

inline OperandFormats operand_formats(Precision p) {
  if (p == Precision::int8) return {Format{8, 4}, Format{8, 7}, Format{8, 7}};
  return {fmt::act, fmt::prob, Format{16, 15}};
}

inline std::vector<double> row_copy(const RealMatrix& m, std::size_t r) {
  auto s = m.row(r);
  return {s.begin(), s.end()};
}

}  // namespace detail

inline RealMatrix encoder_forward_reference(const RealMatrix& x, const EncoderWeights& w, const ForwardOptions& o = {}) {
  using detail::matmul_ref;
  const ModelConfig& c = w.cfg;
  const std::size_t s = x.rows(), h = static_cast<std::size_t>(c.H), d = static_cast<std::size_t>(c.head_dim());
  RealMatrix z(s, h);
  for (int i = 0; i < c.A; ++i) {
    const RealMatrix q = matmul_ref(x, w.wq[static_cast<std::size_t>(i)]);
    const RealMatrix k = matmul_ref(x, w.wk[static_cast<std::size_t>(i)]);
    const RealMatrix v = matmul_ref(x, w.wv[static_cast<std::size_t>(i)]);
    const RealMatrix scores = apply_attention_scale(matmul_ref(q, detail::transpose(k)), o.scale, Mode::reference);
    RealMatrix p(s, s);
    for (std::size_t r = 0; r < s; ++r) {
      const auto row = softmax_reference(scores.row(r));
      std::copy(row.begin(), row.end(), p.row(r).begin());
    }
    const RealMatrix zi = matmul_ref(p, v);
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t j = 0; j < d; ++j) z(r, static_cast<std::size_t>(i) * d + j) = zi(r, j);
    if (o.taps && i == 0) {
      (*o.taps)["head0_scores"] = scores;
      (*o.taps)["head0_probs"] = p;
    }
  }
  const RealMatrix x1 = matmul_ref(z, w.wo);
  RealMatrix x2(s, h);
  for (std::size_t r = 0; r < s; ++r) {
    std::vector<double> in(h);
    for (std::size_t j = 0; j < h; ++j) in[j] = x(r, j) + x1(r, j);
    const auto y = layernorm_reference(in, w.ln_a);
    std::copy(y.begin(), y.end(), x2.row(r).begin());
  }
  RealMatrix x3 = matmul_ref(x2, w.w1);
  for (std::size_t r = 0; r < s; ++r) {
    auto row = x3.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<double>(gelu_erf(static_cast<long double>(row[j]) + w.b1[j]));
  }
  const RealMatrix x4 = matmul_ref(x3, w.w2);
  RealMatrix out(s, h);
  for (std::size_t r = 0; r < s; ++r) {
    std::vector<double> in(h);
    for (std::size_t j = 0; j < h; ++j) in[j] = x2(r, j) + x4(r, j) + w.b2[j];
    const auto y = layernorm_reference(in, w.ln_b);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  if (o.taps) {
    (*o.taps)["attention"] = z;
    (*o.taps)["x1"] = x1;
    (*o.taps)["x2"] = x2;
    (*o.taps)["x3"] = x3;
    (*o.taps)["x4"] = x4;
    (*o.taps)["output"] = out;
  }
  return out;
}

inline RealMatrix encoder_forward_fixed(const RealMatrix& x, const EncoderWeights& w, const ForwardOptions& o = {}) {
  using detail::dequantize_matrix;
  using detail::quantize_matrix;
  using detail::requantize_matrix;
  const NonlinearTables& t = o.tables ? *o.tables : default_tables();
  const ModelConfig& c = w.cfg;
  const MmuConfig& mmu = o.mmu;
  const auto of = detail::operand_formats(mmu.precision);
  const std::size_t s = x.rows(), h = static_cast<std::size_t>(c.H), d = static_cast<std::size_t>(c.head_dim());
  auto mm = [&](const FixedMatrix& a, const FixedMatrix& b) { return mmu_matmul(a, b, mmu).c; };
  auto operand = [&](const FixedMatrix& m, const Format& f) { return m.data().front().fmt == f ? m : requantize_matrix(m, f); };

  const FixedMatrix xq = quantize_matrix(x, fmt::act);
  const FixedMatrix xin = operand(xq, of.act);
  FixedMatrix z(s, h);
  for (int i = 0; i < c.A; ++i) {
    const auto hi = static_cast<std::size_t>(i);
    const FixedMatrix q = mm(xin, quantize_matrix(w.wq[hi], of.weight));
    const FixedMatrix k = mm(xin, quantize_matrix(w.wk[hi], of.weight));
    const FixedMatrix v = mm(xin, quantize_matrix(w.wv[hi], of.weight));
    const FixedMatrix scores = apply_attention_scale(mm(operand(q, of.act), operand(detail::transpose(k), of.act)), o.scale);
    FixedMatrix p(s, s);
    for (std::size_t r = 0; r < s; ++r) {
      const auto row = softmax_fixed(scores.row(r), t);
      std::copy(row.begin(), row.end(), p.row(r).begin());
    }
    const FixedMatrix zi = mm(operand(p, of.prob), operand(v, of.act));
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t j = 0; j < d; ++j) z(r, hi * d + j) = zi(r, j);
    if (o.taps && i == 0) {
      (*o.taps)["head0_scores"] = dequantize_matrix(scores);
      (*o.taps)["head0_probs"] = dequantize_matrix(p);
    }
  }
  const FixedMatrix x1 = mm(operand(z, of.act), quantize_matrix(w.wo, of.weight));
  const FixedLayerNormParams lna = FixedLayerNormParams::from(w.ln_a), lnb = FixedLayerNormParams::from(w.ln_b);
  FixedMatrix x2(s, h);
  for (std::size_t r = 0; r < s; ++r) {
    FixedVector in(h);
    for (std::size_t j = 0; j < h; ++j) in[j] = fx_add(xq(r, j), x1(r, j), fmt::act);
    const auto y = layernorm_fixed(in, lna, t);
    std::copy(y.begin(), y.end(), x2.row(r).begin());
  }
  const FixedVector b1 = quantize_all(w.b1, fmt::act), b2 = quantize_all(w.b2, fmt::act);
  FixedMatrix x3 = mm(operand(x2, of.act), quantize_matrix(w.w1, of.weight));
  for (std::size_t r = 0; r < s; ++r) {
    auto row = x3.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = eval_cpwl(fx_add(row[j], b1[j], fmt::act), t.gelu);
  }
  const FixedMatrix x4 = mm(operand(x3, of.act), quantize_matrix(w.w2, of.weight));
  FixedMatrix out(s, h);
  for (std::size_t r = 0; r < s; ++r) {
    FixedVector in(h);
    for (std::size_t j = 0; j < h; ++j) in[j] = fx_add(x2(r, j), fx_add(x4(r, j), b2[j], fmt::act), fmt::act);
    const auto y = layernorm_fixed(in, lnb, t);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  const RealMatrix result = dequantize_matrix(out);
  if (o.taps) {
    (*o.taps)["attention"] = dequantize_matrix(z);
    (*o.taps)["x1"] = dequantize_matrix(x1);
    (*o.taps)["x2"] = dequantize_matrix(x2);
    (*o.taps)["x3"] = dequantize_matrix(x3);
    (*o.taps)["x4"] = dequantize_matrix(x4);
    (*o.taps)["output"] = result;
  }
  return result;
}

inline RealMatrix encoder_forward(const RealMatrix& x, const EncoderWeights& w, Mode mode, const ForwardOptions& o = {}) {
  w.validate();
  if (x.cols() != static_cast<std::size_t>(w.cfg.H) || x.rows() == 0 || x.rows() > 512)
    throw ShapeError("encoder_forward: input must be seq_len x H with 1 <= seq_len <= 512");
  return mode == Mode::reference ? encoder_forward_reference(x, w, o) : encoder_forward_fixed(x, w, o);
}

// ---- error metrics ---------------------------------------------------------------

inline constexpr double kRelativeFloor = 1e-6;

struct ErrorStats {
  double max_abs = 0;
  double mean_abs = 0;
  double max_rel = 0;
  std::size_t argmax_row = 0, argmax_col = 0;
};

struct ErrorMetrics : ErrorStats {
  std::map<std::string, ErrorStats> per_stage;
};

// b is the reference for the relative error.
inline ErrorStats error_stats(const RealMatrix& a, const RealMatrix& b) {
  require_same_shape(a, b, "compare");
  ErrorStats e;
  long double sum = 0;
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const double d = std::fabs(a(r, c) - b(r, c));
      sum += d;
      if (d > e.max_abs) {
        e.max_abs = d;
        e.argmax_row = r;
        e.argmax_col = c;
      }
      e.max_rel = std::max(e.max_rel, d / std::max(std::fabs(b(r, c)), kRelativeFloor));
    }
  if (a.size() > 0) e.mean_abs = static_cast<double>(sum / static_cast<long double>(a.size()));
  return e;
}

inline ErrorMetrics compare(const RealMatrix& a, const RealMatrix& b) {
  ErrorMetrics m;
  static_cast<ErrorStats&>(m) = error_stats(a, b);
  return m;
}

inline ErrorMetrics compare_stages(const StageTaps& fixed, const StageTaps& ref) {
  ErrorMetrics m;
  for (const auto& [name, mat] : ref) {
    auto it = fixed.find(name);
    if (it == fixed.end()) throw std::invalid_argument("compare_stages: missing tap " + name);
    m.per_stage[name] = error_stats(it->second, mat);
  }
  static_cast<ErrorStats&>(m) = m.per_stage.at("output");
  return m;
}

// ---- weight container ----------------------------------------------------------------
// "NPEW" magic, u32 little-endian header length, JSON header, then float64
// little-endian tensor data in header order.

namespace detail {

inline std::vector<std::pair<std::string, RealMatrix>> weight_tensors(const EncoderWeights& w) {
  std::vector<std::pair<std::string, RealMatrix>> t;
  for (std::size_t i = 0; i < w.wq.size(); ++i) {
    t.emplace_back("wq" + std::to_string(i), w.wq[i]);
    t.emplace_back("wk" + std::to_string(i), w.wk[i]);
    t.emplace_back("wv" + std::to_string(i), w.wv[i]);
  }
  auto rowvec = [](const std::vector<double>& v) {
    RealMatrix m(1, v.size());
    m.data() = v;
    return m;
  };
  t.emplace_back("wo", w.wo);
  t.emplace_back("w1", w.w1);
  t.emplace_back("b1", rowvec(w.b1));
  t.emplace_back("w2", w.w2);
  t.emplace_back("b2", rowvec(w.b2));
  t.emplace_back("ln_a_gamma", rowvec(w.ln_a.gamma));
  t.emplace_back("ln_a_beta", rowvec(w.ln_a.beta));
  t.emplace_back("ln_b_gamma", rowvec(w.ln_b.gamma));
  t.emplace_back("ln_b_beta", rowvec(w.ln_b.beta));
  return t;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])} << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_weights(const EncoderWeights& w) {
  w.validate();
  nlohmann::ordered_json h;
  h["format"] = "npe-weights";
  h["version"] = 1;
  h["seed"] = w.seed;
  h["model"] = {{"L", w.cfg.L}, {"A", w.cfg.A}, {"H", w.cfg.H}, {"seq_len", w.cfg.seq_len}, {"ff_dim", w.cfg.ff_dim}};
  h["dtype"] = "float64le";
  h["tensors"] = nlohmann::ordered_json::array();
  const auto tensors = detail::weight_tensors(w);
  std::size_t offset = 0;
  for (const auto& [name, m] : tensors) {
    h["tensors"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += m.size();
  }
  const std::string header = h.dump();
  std::string out = "NPEW";
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += header;
  for (const auto& [name, m] : tensors)
    for (double v : m.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline EncoderWeights deserialize_weights(const std::string& blob) {
  auto fail = [](const std::string& why) { return std::runtime_error("weights: " + why); };
  if (blob.size() < 8 || blob.compare(0, 4, "NPEW") != 0) throw fail("bad magic");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t{static_cast<unsigned char>(blob[4 + static_cast<std::size_t>(i)])} << (8 * i);
  if (blob.size() < 8 + static_cast<std::size_t>(len)) throw fail("truncated header");
  const auto h = nlohmann::json::parse(blob.substr(8, len));
  if (h.at("format") != "npe-weights" || h.at("version") != 1 || h.at("dtype") != "float64le")
    throw fail("unsupported header");
  EncoderWeights w;
  const auto& m = h.at("model");
  w.cfg = {m.at("L").get<int>(), m.at("A").get<int>(), m.at("H").get<int>(), m.at("seq_len").get<int>(),
           m.at("ff_dim").get<int>()};
  w.cfg.validate();
  w.seed = h.at("seed").get<std::uint64_t>();
  const std::size_t data = 8 + len;
  std::map<std::string, RealMatrix> t;
  for (const auto& e : h.at("tensors")) {
    const auto rows = e.at("shape").at(0).get<std::size_t>(), cols = e.at("shape").at(1).get<std::size_t>();
    const auto off = e.at("offset").get<std::size_t>();
    if (data + (off + rows * cols) * 8 > blob.size()) throw fail("truncated tensor data");
    RealMatrix mat(rows, cols);
    for (std::size_t i = 0; i < mat.size(); ++i)
      mat.data()[i] = std::bit_cast<double>(detail::get_u64(blob, data + (off + i) * 8));
    t[e.at("name").get<std::string>()] = std::move(mat);
  }
  auto take = [&](const std::string& name) {
    auto it = t.find(name);
    if (it == t.end()) throw fail("missing tensor " + name);
    return it->second;
  };
  for (int i = 0; i < w.cfg.A; ++i) {
    w.wq.push_back(take("wq" + std::to_string(i)));
    w.wk.push_back(take("wk" + std::to_string(i)));
    w.wv.push_back(take("wv" + std::to_string(i)));
  }
  w.wo = take("wo");
  w.w1 = take("w1");
  w.b1 = take("b1").data();
  w.w2 = take("w2");
  w.b2 = take("b2").data();
  w.ln_a = {take("ln_a_gamma").data(), take("ln_a_beta").data()};
  w.ln_b = {take("ln_b_gamma").data(), take("ln_b_beta").data()};
  w.validate();
  return w;
}

inline void save_weights(const std::filesystem::path& p, const EncoderWeights& w) {
  write_file_atomic(p, serialize_weights(w));
}
inline EncoderWeights load_weights(const std::filesystem::path& p) { return deserialize_weights(read_file(p)); }

}  // namespace npe
