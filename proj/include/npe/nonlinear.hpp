#pragma once

// Softmax, layer normalization and GELU in two forms: a long-double reference
// and a fixed-point path built only from table evaluation plus add, sub, mul,
// shift, compare, min/max and reductions.

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "npe/fixed_point.hpp"
#include "npe/matrix.hpp"
#include "npe/pwl.hpp"

namespace npe {

enum class Mode { reference, fixed_point };

// Formats used at each stage of the fixed-point kernels.
namespace fmt {
inline constexpr Format act{16, 11};        // activations in and out of the NVU
inline constexpr Format prob{16, 15};       // softmax probabilities
inline constexpr Format exp_out{16, 15};    // e^(x - max)
inline constexpr Format exp_sum{32, 15};    // exact sum of exp_out words
inline constexpr Format unit32{32, 30};     // [1,2) recip input, reciprocal/rsqrt outputs
inline constexpr Format ln_acc{32, 11};     // exact row sum of activations
inline constexpr Format ln_dev{32, 26};     // mean, x - mean, normalized x
inline constexpr Format ln_sq{64, 40};      // squared deviations and variance
inline constexpr Format rsqrt_in{32, 29};   // variance normalized into [1,4)
inline constexpr Format inv_k{64, 62};      // 1/K; wide so the mean of a constant row is exact
}  // namespace fmt

struct TableBudgets {
  std::size_t exp = 16;
  std::size_t recip = 16;
  std::size_t rsqrt = 16;
  std::size_t gelu = 16;
  friend bool operator==(const TableBudgets&, const TableBudgets&) = default;
};

struct NonlinearTables {
  PwlTable exp;    // e^x on [-16, 0]
  PwlTable recip;  // 1/x on [1, 2), piecewise quadratic
  PwlTable rsqrt;  // 1/sqrt(x) on [1, 4)
  PwlTable gelu;   // GELU on [-8, 8], 0 below and x above
};

inline long double gelu_erf(long double x) { return 0.5L * x * (1.0L + std::erf(x / std::numbers::sqrt2_v<long double>)); }

inline long double gelu_tanh(long double x) {
  const long double c = std::sqrt(2.0L / std::numbers::pi_v<long double>);
  return 0.5L * x * (1.0L + std::tanh(c * (x + 0.044715L * x * x * x)));
}

// Function, default interval and number formats behind each table. GELU pins
// a knot at 0 so GELU(0) is exactly 0, and continues past +-8 along its
// asymptotes 0 and x.
struct FunctionSpec {
  RealFn f;
  double lo, hi;
  SegmentOptions opts;
};

inline const std::map<std::string, FunctionSpec>& function_specs() {
  static const std::map<std::string, FunctionSpec> specs = [] {
    auto opts = [](Format in, Format out, RangePolicy p) {
      SegmentOptions o;
      o.input_fmt = in;
      o.output_fmt = out;
      o.range_policy = p;
      return o;
    };
    std::map<std::string, FunctionSpec> m;
    m["exp"] = {[](double x) { return std::exp(x); }, -16, 0, opts(fmt::act, fmt::exp_out, RangePolicy::clamp)};
    // Quadratic: one lookup per row, and probabilities then sum to 1 within an ULP per element.
    SegmentOptions r = opts(fmt::unit32, fmt::unit32, RangePolicy::clamp);
    r.degree = 2;
    m["recip"] = {[](double x) { return 1.0 / x; }, 1, 2, r};
    m["rsqrt"] = {[](double x) { return 1.0 / std::sqrt(x); }, 1, 4,
                  opts(fmt::rsqrt_in, fmt::unit32, RangePolicy::clamp)};
    SegmentOptions g = opts(fmt::act, fmt::act, RangePolicy::linear_tails);
    g.tail_slopes = {0, 1};
    g.fixed_knots = {0.0};
    m["gelu"] = {[](double x) { return static_cast<double>(gelu_erf(x)); }, -8, 8, g};
    m["tanh"] = {[](double x) { return std::tanh(x); }, -8, 8, opts(fmt::act, fmt::act, RangePolicy::clamp)};
    m["identity"] = {[](double x) { return x; }, -8, 8, opts(fmt::act, fmt::act, RangePolicy::clamp)};
    return m;
  }();
  return specs;
}

inline PwlTable build_table(const std::string& name, std::size_t segments) {
  const FunctionSpec& s = function_specs().at(name);
  SegmentOptions o = s.opts;
  o.max_segments = segments;
  return segment_function(s.f, s.lo, s.hi, o);
}

inline NonlinearTables build_tables(const TableBudgets& b) {
  return {build_table("exp", b.exp), build_table("recip", b.recip), build_table("rsqrt", b.rsqrt),
          build_table("gelu", b.gelu)};
}

inline const NonlinearTables& default_tables() {
  static const NonlinearTables tables = build_tables(TableBudgets{});
  return tables;
}

// ---- fixed-point kernels ---------------------------------------------------

using FixedVector = std::vector<FixedWord>;

inline FixedVector quantize_all(std::span<const double> x, const Format& f) {
  FixedVector out;
  out.reserve(x.size());
  for (double v : x) out.push_back(quantize(v, f));
  return out;
}

inline std::vector<double> dequantize_all(std::span<const FixedWord> x) {
  std::vector<double> out;
  out.reserve(x.size());
  for (const auto& w : x) out.push_back(w.to_double());
  return out;
}

// A positive value v rewritten as mantissa * 2^exponent with the mantissa
// looked up in a table over a normalized range.
struct ScaledValue {
  FixedWord mantissa;
  int exponent = 0;
};

// 1/s = recip(s * 2^-e) * 2^-e with s * 2^-e in [1,2).
inline ScaledValue reciprocal_scale(const FixedWord& sum, const NonlinearTables& t) {
  const int e = fx_log2_floor(sum);
  const FixedWord normalized = fx_shift(sum, -e, fmt::unit32);
  return {eval_cpwl(normalized, t.recip), -e};
}

// 1/sqrt(v) = rsqrt(v * 2^-2h) * 2^-h with v * 2^-2h in [1,4), h = floor(log2(v) / 2).
inline ScaledValue rsqrt_scale(const FixedWord& v, const NonlinearTables& t) {
  const int e = fx_log2_floor(v);
  const int half = e >> 1;
  const FixedWord normalized = fx_shift(v, -2 * half, fmt::rsqrt_in);
  return {eval_cpwl(normalized, t.rsqrt), -half};
}

inline FixedVector softmax_fixed(std::span<const FixedWord> x, const NonlinearTables& t = default_tables()) {
  if (x.empty()) throw std::invalid_argument("softmax: empty vector");
  FixedWord m = x[0];
  for (std::size_t i = 1; i < x.size(); ++i) m = fx_max(m, x[i]);
  oplog::record(Op::reduce);

  FixedVector e;
  e.reserve(x.size());
  FixedWord sum{0, fmt::exp_sum};
  for (const auto& xi : x) {
    e.push_back(eval_cpwl(fx_sub(xi, m, fmt::act), t.exp));
    sum = fx_add(sum, e.back(), fmt::exp_sum);
  }
  oplog::record(Op::reduce);

  const ScaledValue scale = reciprocal_scale(sum, t);
  FixedVector out;
  out.reserve(x.size());
  for (const auto& ei : e) out.push_back(fx_mul_shift(ei, scale.mantissa, scale.exponent, fmt::prob));
  return out;
}

struct LayerNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  double epsilon = std::ldexp(1.0, -20);

  static LayerNormParams identity(std::size_t k) { return {std::vector<double>(k, 1.0), std::vector<double>(k, 0.0)}; }
  void validate(std::size_t k) const {
    if (gamma.size() != k || beta.size() != k) throw ShapeError("layernorm: gamma/beta length must equal row length");
    if (!(epsilon > 0)) throw std::invalid_argument("layernorm: epsilon must be positive");
  }
};

struct FixedLayerNormParams {
  FixedVector gamma;
  FixedVector beta;
  FixedWord epsilon;
  FixedWord inv_k;  // 1/K, a setup-time constant

  static FixedLayerNormParams from(const LayerNormParams& p) {
    const std::size_t k = p.gamma.size();
    p.validate(k);
    return {quantize_all(p.gamma, fmt::act), quantize_all(p.beta, fmt::act), quantize(p.epsilon, fmt::ln_sq),
            quantize(1.0 / static_cast<double>(k), fmt::inv_k)};
  }
};

inline FixedVector layernorm_fixed(std::span<const FixedWord> x, const FixedLayerNormParams& p,
                                   const NonlinearTables& t = default_tables()) {
  const std::size_t k = x.size();
  if (k == 0 || p.gamma.size() != k || p.beta.size() != k) throw ShapeError("layernorm: row length mismatch");

  FixedWord acc{0, fmt::ln_acc};
  for (const auto& xi : x) acc = fx_add(acc, xi, fmt::ln_acc);
  oplog::record(Op::reduce);
  const FixedWord mean = fx_mul(acc, p.inv_k, fmt::ln_dev);

  FixedVector dev;
  dev.reserve(k);
  FixedWord sq_acc{0, fmt::ln_sq};
  for (const auto& xi : x) {
    dev.push_back(fx_sub(xi, mean, fmt::ln_dev));
    sq_acc = fx_add(sq_acc, fx_mul(dev.back(), dev.back(), fmt::ln_sq), fmt::ln_sq);
  }
  oplog::record(Op::reduce);
  const FixedWord var = fx_add(fx_mul(sq_acc, p.inv_k, fmt::ln_sq), p.epsilon, fmt::ln_sq);
  const ScaledValue rs = rsqrt_scale(var, t);

  FixedVector out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const FixedWord xhat = fx_mul_shift(dev[i], rs.mantissa, rs.exponent, fmt::ln_dev);
    out.push_back(fx_mac(xhat, p.gamma[i], p.beta[i], fmt::act));
  }
  return out;
}

inline FixedVector gelu_fixed(std::span<const FixedWord> x, const NonlinearTables& t = default_tables()) {
  FixedVector out;
  out.reserve(x.size());
  for (const auto& xi : x) out.push_back(eval_cpwl(xi, t.gelu));
  return out;
}

// ---- reference kernels -----------------------------------------------------

inline std::vector<double> softmax_reference(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("softmax: empty vector");
  long double m = x[0];
  for (double v : x) m = std::max<long double>(m, v);
  std::vector<long double> e(x.size());
  long double sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += (e[i] = std::exp(static_cast<long double>(x[i]) - m));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
  return out;
}

inline std::vector<double> layernorm_reference(std::span<const double> x, const LayerNormParams& p) {
  p.validate(x.size());
  if (x.empty()) throw ShapeError("layernorm: empty row");
  const auto k = static_cast<long double>(x.size());
  long double mean = 0;
  for (double v : x) mean += v;
  mean /= k;
  long double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= k;
  const long double inv = 1.0L / std::sqrt(var + static_cast<long double>(p.epsilon));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<double>((x[i] - mean) * inv * p.gamma[i] + p.beta[i]);
  return out;
}

inline std::vector<double> gelu_reference(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(gelu_erf(x[i]));
  return out;
}

// ---- mode-dispatching entry points ----------------------------------------

inline std::vector<double> softmax_row(std::span<const double> x, Mode mode, const NonlinearTables& t = default_tables()) {
  if (mode == Mode::reference) return softmax_reference(x);
  return dequantize_all(softmax_fixed(quantize_all(x, fmt::act), t));
}

inline std::vector<double> layernorm_row(std::span<const double> x, const LayerNormParams& p, Mode mode,
                                         const NonlinearTables& t = default_tables()) {
  p.validate(x.size());
  if (mode == Mode::reference) return layernorm_reference(x, p);
  return dequantize_all(layernorm_fixed(quantize_all(x, fmt::act), FixedLayerNormParams::from(p), t));
}

inline std::vector<double> gelu(std::span<const double> x, Mode mode, const NonlinearTables& t = default_tables()) {
  if (mode == Mode::reference) return gelu_reference(x);
  return dequantize_all(gelu_fixed(quantize_all(x, fmt::act), t));
}

struct AttentionScale {
  double k = 8.0;
};

// Elementwise x / k as a multiply by the precomputed reciprocal.
inline Matrix<FixedWord> apply_attention_scale(const Matrix<FixedWord>& x, AttentionScale s, const Format& out_fmt = fmt::act) {
  if (!(s.k > 0)) throw std::invalid_argument("attention scale: k must be positive");
  const FixedWord recip = quantize(1.0 / s.k, Format{32, 24});
  Matrix<FixedWord> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = fx_mul(x.data()[i], recip, out_fmt);
  return out;
}

inline RealMatrix apply_attention_scale(const RealMatrix& x, AttentionScale s, Mode mode) {
  if (!(s.k > 0)) throw std::invalid_argument("attention scale: k must be positive");
  RealMatrix out(x.rows(), x.cols());
  if (mode == Mode::reference) {
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] / s.k;
    return out;
  }
  Matrix<FixedWord> q(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) q.data()[i] = quantize(x.data()[i], fmt::act);
  const auto r = apply_attention_scale(q, s);
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = r.data()[i].to_double();
  return out;
}

}  // namespace npe
