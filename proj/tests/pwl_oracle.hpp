#pragma once

// Exhaustive comparison of the table evaluator against the linear-scan /
// exact-rational oracle (linear or quadratic segments). Inputs: every 16-bit word for 16-bit input formats;
// for wider formats, 65536 evenly spaced words across and around the knot
// span plus every knot and its neighbours.

#include <algorithm>
#include <string>
#include <vector>

#include "npe/pwl.hpp"
#include "oracles.hpp"

namespace oracle {

struct PwlAudit {
  std::size_t inputs = 0;
  std::size_t segment_mismatches = 0;
  std::size_t value_mismatches = 0;
  std::string first_failure;
  bool ok() const { return segment_mismatches == 0 && value_mismatches == 0; }
};

inline std::vector<std::int64_t> audit_inputs(const npe::PwlTable& t) {
  std::vector<std::int64_t> xs;
  const auto& f = t.input_fmt;
  if (f.total_bits <= 16) {
    for (std::int64_t x = f.min_raw(); x <= f.max_raw(); ++x) xs.push_back(x);
    return xs;
  }
  const std::int64_t span = t.knots_raw.back() - t.knots_raw.front();
  const std::int64_t lo = std::max(f.min_raw(), t.knots_raw.front() - span / 8);
  const std::int64_t hi = std::min(f.max_raw(), t.knots_raw.back() + span / 8);
  for (std::int64_t i = 0; i < 65536; ++i) xs.push_back(lo + static_cast<std::int64_t>((static_cast<npe::i128>(hi - lo) * i) / 65535));
  for (auto k : t.knots_raw)
    for (std::int64_t d : {-1, 0, 1})
      if (k + d >= f.min_raw() && k + d <= f.max_raw()) xs.push_back(k + d);
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  return xs;
}

// Evaluator error allowed against the exact rational value, in output ULPs:
// half an ULP of final rounding plus the 2^-24 resolution of the segment
// fraction times the segment rise.
inline PwlAudit audit_table(const npe::PwlTable& t) {
  PwlAudit a;
  const bool clamp = t.range_policy == npe::RangePolicy::clamp;
  const int out_bits = t.output_fmt.total_bits;
  for (std::int64_t x : audit_inputs(t)) {
    ++a.inputs;
    const std::size_t want_seg = segment_scan(x, t.knots_raw);
    if (npe::find_segment_raw(x, t) != want_seg) {
      if (a.first_failure.empty()) a.first_failure = "segment at raw " + std::to_string(x);
      ++a.segment_mismatches;
    }
    const Ends ends = clamp ? Ends::clamp : t.range_policy == npe::RangePolicy::linear_tails ? Ends::tails : Ends::extend;
    const bool inside = x >= t.knots_raw.front() && x < t.knots_raw.back();
    const Exact e = t.degree == 2 && inside
                        ? cpwq_exact(x, t.knots_raw, t.values_raw, t.quad_raw)
                        : cpwl_exact(x, t.knots_raw, t.values_raw, ends, t.tail_slopes,
                                     t.output_fmt.frac_bits - t.input_fmt.frac_bits);
    const std::int64_t got = npe::eval_raw_unlogged(x, t);
    // Saturated region: the exact value clamps to the format as well.
    const cpp_int lo = -pow2(out_bits - 1), hi = pow2(out_bits - 1) - 1;
    cpp_int num = e.num;
    if (num > hi * e.den) num = hi * e.den;
    if (num < lo * e.den) num = lo * e.den;
    std::size_t seg = std::min(want_seg, t.segments() - 1);
    const bool outside = x < t.knots_raw.front() || x >= t.knots_raw.back();
    if ((clamp && (x <= t.knots_raw.front() || outside)) || (ends == Ends::tails && outside))
      seg = t.segments();  // no interpolation: only the final rounding
    const cpp_int rise = seg < t.segments() ? abs(cpp_int(t.values_raw[seg + 1]) - t.values_raw[seg]) : cpp_int(0);
    const cpp_int curve = seg < t.segments() && t.degree == 2 ? abs(cpp_int(t.quad_raw[seg])) : cpp_int(0);
    // Linear: |got - num/den| <= 1/2 + rise * 2^-23. Quadratic adds one more
    // rounding (the inner term) and the weight error on the curvature:
    // <= 1 + (rise + 3 curve) * 2^-23. Scaled by den * 2^24.
    const cpp_int lhs = abs(cpp_int(got) * e.den - num) * pow2(24);
    const cpp_int rhs = t.degree == 2 && seg < t.segments() ? e.den * (pow2(24) + 2 * (rise + 3 * curve))
                                                            : e.den * (pow2(23) + 2 * rise);
    if (lhs > rhs) {
      if (a.first_failure.empty()) a.first_failure = "value at raw " + std::to_string(x) + ": got " + std::to_string(got);
      ++a.value_mismatches;
    }
  }
  return a;
}

}  // namespace oracle
