#pragma once

// Independent oracles for the tests. Nothing here calls the library's
// arithmetic: big integers, exact rationals and 50-digit floats only.

#include <array>
#include <boost/math/special_functions/erf.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace oracle {

using boost::multiprecision::cpp_int;
using real50 = boost::multiprecision::cpp_bin_float_50;

inline cpp_int floor_div(const cpp_int& a, const cpp_int& b) {
  cpp_int q = a / b;  // truncates toward zero
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// round(num / den) with ties to even; den > 0.
inline cpp_int div_rne(const cpp_int& num, const cpp_int& den) {
  cpp_int q = floor_div(num, den);
  const cpp_int rem2 = 2 * (num - q * den);
  if (rem2 > den || (rem2 == den && (q & 1) != 0)) ++q;
  return q;
}

inline cpp_int pow2(int e) { return cpp_int(1) << e; }

inline std::int64_t saturate(const cpp_int& v, int bits) {
  const cpp_int hi = pow2(bits - 1) - 1, lo = -pow2(bits - 1);
  if (v > hi) return static_cast<std::int64_t>(hi);
  if (v < lo) return static_cast<std::int64_t>(lo);
  return static_cast<std::int64_t>(v);
}

// Value with `from_frac` fraction bits re-expressed with `to_frac` bits, RNE, saturated.
inline std::int64_t rescale(const cpp_int& v, int from_frac, int to_frac, int to_bits) {
  const cpp_int r = to_frac >= from_frac ? cpp_int(v << (to_frac - from_frac)) : div_rne(v, pow2(from_frac - to_frac));
  return saturate(r, to_bits);
}

// Segment address by descending linear scan: first i from the top with x >= x_i.
inline std::size_t segment_scan(std::int64_t x, const std::vector<std::int64_t>& knots) {
  const std::size_t n = knots.size() - 1;
  for (std::size_t i = n + 1; i-- > 0;)
    if (x >= knots[i]) return std::min(i, n - 1);
  return 0;
}

// Continuous piecewise-linear value (1-d)v(x_{i-1}) + d v(x_i) as an exact
// rational num/den, in output raw units. Out-of-range inputs clamp to the end
// values, extend the end segments, or follow integer tail slopes
// (out_shift = output minus input fraction bits).
struct Exact {
  cpp_int num, den;
};

enum class Ends { clamp, extend, tails };

inline Exact cpwl_exact(std::int64_t x, const std::vector<std::int64_t>& k, const std::vector<std::int64_t>& v,
                        Ends ends, std::array<int, 2> slopes = {0, 0}, int out_shift = 0) {
  const std::size_t n = k.size() - 1;
  const bool clamp = ends == Ends::clamp;
  if (clamp && x <= k.front()) return {v.front(), 1};
  if (clamp && x >= k.back()) return {v.back(), 1};
  if (ends == Ends::tails && (x < k.front() || x >= k.back())) {
    const bool low = x < k.front();
    const cpp_int dx = cpp_int(x) - (low ? k.front() : k.back());
    const cpp_int base = low ? v.front() : v.back();
    const int s = slopes[low ? 0 : 1];
    if (out_shift >= 0) return {base + s * (dx << out_shift), 1};
    const cpp_int den = pow2(-out_shift);
    return {base * den + s * dx, den};
  }
  std::size_t i = segment_scan(x, k);
  if (!clamp && x >= k.back()) i = n - 1;
  const cpp_int w = k[i + 1] - k[i];
  const cpp_int dx = cpp_int(x) - k[i];
  // v_i + dx/w * (v_{i+1} - v_i)
  return {cpp_int(v[i]) * w + dx * (cpp_int(v[i + 1]) - v[i]), w};
}

// Quadratic segment through both end values with curvature c:
// v_i + d (dv - c) + d^2 c, d = dx / w. Inputs inside the knot span only.
inline Exact cpwq_exact(std::int64_t x, const std::vector<std::int64_t>& k, const std::vector<std::int64_t>& v,
                        const std::vector<std::int64_t>& c) {
  const std::size_t i = segment_scan(x, k);
  const cpp_int w = k[i + 1] - k[i];
  const cpp_int dx = cpp_int(x) - k[i];
  const cpp_int dv = cpp_int(v[i + 1]) - v[i];
  return {cpp_int(v[i]) * w * w + dx * w * (dv - c[i]) + dx * dx * c[i], w * w};
}

// Boost's long double erf: an implementation independent of the library's std::erf, fast enough for dense sweeps.
inline long double gelu_ld(long double x) {
  return x / 2 * (1 + boost::math::erf(x / std::sqrt(2.0L)));
}

inline real50 gelu(const real50& x) { return x / 2 * (1 + boost::math::erf(x / boost::multiprecision::sqrt(real50(2)))); }

inline nlohmann::json load_json(const std::filesystem::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

}  // namespace oracle
