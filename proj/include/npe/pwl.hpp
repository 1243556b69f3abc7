#pragma once

// Non-uniform continuous piecewise-linear (optionally piecewise-quadratic)
// function tables: segmentation, segment-address lookup, fixed-point
// evaluation, error certification, and a bit-exact text file form.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npe/fixed_point.hpp"
#include "npe/io.hpp"

namespace npe {

// Outside the knots: hold the end values, continue the end segments, or
// continue along fixed integer slopes (asymptotes such as 0 and x).
enum class RangePolicy { clamp, extrapolate_last_segment, linear_tails };

inline std::string to_string(RangePolicy p) {
  switch (p) {
    case RangePolicy::clamp: return "clamp";
    case RangePolicy::extrapolate_last_segment: return "extrapolate_last_segment";
    case RangePolicy::linear_tails: return "linear_tails";
  }
  return "?";
}

class TableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InfeasibleBudget : public std::runtime_error {
 public:
  InfeasibleBudget(double achieved, std::size_t segments)
      : std::runtime_error("segmentation budget infeasible: achieved max error " + std::to_string(achieved) +
                           " with " + std::to_string(segments) + " segments"),
        achieved_error(achieved) {}
  double achieved_error;
};

// Fraction bits of the interpolation weight inside the evaluator.
inline constexpr int kDeltaFracBits = 24;

struct PwlTable {
  int degree = 1;
  Format input_fmt{16, 11};
  Format output_fmt{16, 11};
  std::vector<std::int64_t> knots_raw;
  std::vector<std::int64_t> values_raw;
  // round(2^recip_frac_bits / width) per segment, in input raw units.
  std::vector<std::int64_t> recip_width_raw;
  int recip_frac_bits = 40;
  // Degree-2 curvature coefficient per segment (output raw units).
  std::vector<std::int64_t> quad_raw;
  RangePolicy range_policy = RangePolicy::clamp;
  std::array<int, 2> tail_slopes{0, 0};  // below / above the knots, for linear_tails
  int prescale = 0;   // input multiplied by 2^prescale before lookup
  int postscale = 0;  // output multiplied by 2^postscale after evaluation

  std::size_t segments() const { return knots_raw.empty() ? 0 : knots_raw.size() - 1; }
  double lo() const { return FixedWord{knots_raw.front(), input_fmt}.to_double(); }
  double hi() const { return FixedWord{knots_raw.back(), input_fmt}.to_double(); }

  friend bool operator==(const PwlTable&, const PwlTable&) = default;
};

namespace detail {

inline int recip_bits_for(std::int64_t max_width) {
  const int bw = static_cast<int>(std::bit_width(static_cast<std::uint64_t>(std::max<std::int64_t>(max_width, 1))));
  return std::min(62, kDeltaFracBits + bw + 2);
}

inline std::int64_t recip_for(std::int64_t width, int recip_bits) {
  const i128 num = i128{1} << recip_bits;
  // round-half-even of num / width; width > 0
  i128 q = num / width;
  const i128 rem = num - q * width;
  if (2 * rem > width || (2 * rem == width && (q & 1) != 0)) ++q;
  return static_cast<std::int64_t>(q);
}

// Interpolate from anchor value v0 toward v0 + dv using offset dx (input raw)
// scaled by recip; c is the degree-2 coefficient (0 for linear).
inline i128 interpolate(std::int64_t dx, std::int64_t recip, int recip_bits, std::int64_t v0, std::int64_t dv,
                        std::int64_t c) {
  const i128 delta = fx::shift_right_rne(i128{dx} * recip, recip_bits - kDeltaFracBits);
  if (c == 0) return i128{v0} + fx::shift_right_rne(delta * dv, kDeltaFracBits);
  const i128 b = i128{dv} - c;
  const i128 inner = b + fx::shift_right_rne(delta * c, kDeltaFracBits);
  return i128{v0} + fx::shift_right_rne(delta * inner, kDeltaFracBits);
}

}  // namespace detail

inline void validate(const PwlTable& t) {
  if (t.degree != 1 && t.degree != 2) throw TableError("degree: must be 1 or 2");
  if (!t.input_fmt.valid()) throw TableError("input_fmt: invalid format");
  if (!t.output_fmt.valid()) throw TableError("output_fmt: invalid format");
  if (t.knots_raw.size() < 2) throw TableError("knots_raw: need at least two knots");
  if (t.values_raw.size() != t.knots_raw.size())
    throw TableError("values_raw: length " + std::to_string(t.values_raw.size()) + " does not match knots_raw length " +
                     std::to_string(t.knots_raw.size()));
  for (std::size_t i = 0; i < t.knots_raw.size(); ++i) {
    const auto k = t.knots_raw[i];
    if (k < t.input_fmt.min_raw() || k > t.input_fmt.max_raw())
      throw TableError("knots_raw[" + std::to_string(i) + "]: outside input_fmt");
    if (i > 0 && k <= t.knots_raw[i - 1])
      throw TableError("knots_raw[" + std::to_string(i) + "]: knots must be strictly increasing");
    const auto v = t.values_raw[i];
    if (v < t.output_fmt.min_raw() || v > t.output_fmt.max_raw())
      throw TableError("values_raw[" + std::to_string(i) + "]: outside output_fmt");
  }
  if (t.recip_width_raw.size() != t.segments())
    throw TableError("recip_width_raw: length must equal segment count");
  for (std::size_t i = 0; i < t.segments(); ++i) {
    if (t.recip_width_raw[i] != detail::recip_for(t.knots_raw[i + 1] - t.knots_raw[i], t.recip_frac_bits))
      throw TableError("recip_width_raw[" + std::to_string(i) + "]: inconsistent with knot widths");
  }
  if (t.degree == 2 && t.quad_raw.size() != t.segments())
    throw TableError("quad_raw: length must equal segment count for degree 2");
  if (t.degree == 1 && !t.quad_raw.empty()) throw TableError("quad_raw: must be empty for degree 1");
  if (t.recip_frac_bits < kDeltaFracBits || t.recip_frac_bits > 62) throw TableError("recip_frac_bits: out of range");
  if (t.range_policy != RangePolicy::linear_tails && t.tail_slopes != std::array<int, 2>{0, 0})
    throw TableError("tail_slopes: only meaningful for linear_tails");
  if (std::abs(t.tail_slopes[0]) > 16 || std::abs(t.tail_slopes[1]) > 16) throw TableError("tail_slopes: out of range");
  if (std::abs(t.prescale) > 32 || std::abs(t.postscale) > 32) throw TableError("prescale/postscale: out of range");
}

// Fill derived per-segment reciprocals for the current knots.
inline void finalize(PwlTable& t) {
  std::int64_t max_w = 1;
  for (std::size_t i = 0; i + 1 < t.knots_raw.size(); ++i) max_w = std::max(max_w, t.knots_raw[i + 1] - t.knots_raw[i]);
  t.recip_frac_bits = detail::recip_bits_for(max_w);
  t.recip_width_raw.clear();
  for (std::size_t i = 0; i + 1 < t.knots_raw.size(); ++i)
    t.recip_width_raw.push_back(detail::recip_for(t.knots_raw[i + 1] - t.knots_raw[i], t.recip_frac_bits));
}

// Segment address: largest i with knots[i] <= x, clamped into [0, N-1].
// Equivalent to a descending scan over the knots (a priority encoder in hardware).
inline std::size_t find_segment_raw(std::int64_t x_raw, const PwlTable& t) {
  oplog::record(Op::find_segment);
  const auto it = std::upper_bound(t.knots_raw.begin(), t.knots_raw.end(), x_raw);
  const auto idx = static_cast<std::ptrdiff_t>(it - t.knots_raw.begin()) - 1;
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(t.segments()) - 1));
}

inline std::size_t find_segment(const FixedWord& x, const PwlTable& t) {
  return find_segment_raw(fx::rescale(x.raw, x.fmt.frac_bits, t.input_fmt), t);
}

// Evaluates the table on an input already expressed in input_fmt raw units.
// Does not record anything: the caller decides what counts as one operation.
inline std::int64_t eval_raw_unlogged(std::int64_t x_raw, const PwlTable& t) {
  if (t.prescale != 0) x_raw = fx::rescale(x_raw, t.input_fmt.frac_bits - t.prescale, t.input_fmt);
  const std::size_t n = t.segments();
  const auto& k = t.knots_raw;
  const auto& v = t.values_raw;
  // Input offset re-expressed in output units, exact until the final saturate.
  auto tail = [&](std::int64_t dx, int slope) {
    const int d = t.output_fmt.frac_bits - t.input_fmt.frac_bits;
    const i128 off = d >= 0 ? fx::shift_left_sat(dx, d) : fx::shift_right_rne(dx, -d);
    return off * slope;
  };
  i128 y;
  if (x_raw < k.front()) {
    if (t.range_policy == RangePolicy::clamp) {
      y = v.front();
    } else if (t.range_policy == RangePolicy::linear_tails) {
      y = v.front() + tail(x_raw - k.front(), t.tail_slopes[0]);
    } else {
      y = detail::interpolate(x_raw - k.front(), t.recip_width_raw.front(), t.recip_frac_bits, v[0], v[1] - v[0], 0);
    }
  } else if (x_raw >= k.back()) {
    if (t.range_policy == RangePolicy::clamp) {
      y = v.back();
    } else if (t.range_policy == RangePolicy::linear_tails) {
      y = v.back() + tail(x_raw - k.back(), t.tail_slopes[1]);
    } else {
      y = detail::interpolate(x_raw - k.back(), t.recip_width_raw.back(), t.recip_frac_bits, v[n], v[n] - v[n - 1], 0);
    }
  } else {
    const auto it = std::upper_bound(k.begin(), k.end(), x_raw);
    const std::size_t i = static_cast<std::size_t>(it - k.begin()) - 1;
    const std::int64_t c = t.degree == 2 ? t.quad_raw[i] : 0;
    y = detail::interpolate(x_raw - k[i], t.recip_width_raw[i], t.recip_frac_bits, v[i], v[i + 1] - v[i], c);
  }
  if (t.postscale > 0) y = fx::shift_left_sat(y, t.postscale);
  if (t.postscale < 0) y = fx::shift_right_rne(y, -t.postscale);
  return fx::saturate(y, t.output_fmt);
}

// One pwl_eval primitive: segment lookup, weight, and interpolation.
inline FixedWord eval_cpwl(const FixedWord& x, const PwlTable& t) {
  oplog::record(Op::pwl_eval);
  const std::int64_t xr = x.fmt == t.input_fmt ? x.raw : fx::rescale(x.raw, x.fmt.frac_bits, t.input_fmt);
  return {eval_raw_unlogged(xr, t), t.output_fmt};
}

using RealFn = std::function<double(double)>;

struct ErrorReport {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  double argmax_point = 0.0;
  std::int64_t grid_points = 0;
};

// Max |eval - f| over a uniform grid across the table's interval plus every knot,
// using the evaluator's exact fixed-point semantics on representable inputs.
inline ErrorReport certify_error(const PwlTable& t, const RealFn& f, std::int64_t grid_points) {
  if (grid_points < 2) throw std::invalid_argument("certify_error: grid_points must be >= 2");
  validate(t);
  ErrorReport rep;
  rep.grid_points = grid_points;
  rep.argmax_point = t.lo();
  const std::int64_t lo = t.knots_raw.front();
  const std::int64_t hi = t.knots_raw.back();
  auto visit = [&](std::int64_t xr) {
    const double x = FixedWord{xr, t.input_fmt}.to_double();
    const double y = FixedWord{eval_raw_unlogged(xr, t), t.output_fmt}.to_double();
    const double fx_ = f(x);
    const double err = std::abs(y - fx_);
    if (err > rep.max_abs_error) {
      rep.max_abs_error = err;
      rep.argmax_point = x;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, err / std::max(std::abs(fx_), 1e-6));
  };
  const long double span = static_cast<long double>(hi - lo);
  for (std::int64_t g = 0; g < grid_points; ++g) {
    const long double pos = static_cast<long double>(lo) + span * g / (grid_points - 1);
    visit(static_cast<std::int64_t>(std::llround(pos)));
  }
  for (auto kr : t.knots_raw) visit(kr);
  return rep;
}

struct SegmentOptions {
  Format input_fmt{16, 11};
  Format output_fmt{16, 11};
  int degree = 1;
  RangePolicy range_policy = RangePolicy::clamp;
  std::array<int, 2> tail_slopes{0, 0};
  // Budget: stop at max_segments, or as soon as the error meets target.
  std::size_t max_segments = 16;
  std::optional<double> target_max_error;
  // Upper bound on error-evaluation samples per interval.
  std::int64_t max_grid = 1 << 17;
  bool local_search = true;
  // Knots placed before the greedy split and never moved, e.g. to make a
  // function exact at a point or linear over a tail.
  std::vector<double> fixed_knots;
};

namespace detail {

class Segmenter {
 public:
  Segmenter(const RealFn& f, std::int64_t lo, std::int64_t hi, const SegmentOptions& o) : f_(f), opt_(o) {
    const std::int64_t count = hi - lo + 1;
    const std::int64_t stride = std::max<std::int64_t>(1, (count + o.max_grid - 1) / o.max_grid);
    for (std::int64_t x = lo; x <= hi; x += stride) grid_.push_back(x);
    if (grid_.back() != hi) grid_.push_back(hi);
    fvals_.reserve(grid_.size());
    for (auto x : grid_) fvals_.push_back(f_(FixedWord{x, o.input_fmt}.to_double()));
    recip_bits_ = recip_bits_for(hi - lo);
  }

  std::int64_t value_at(std::int64_t xr) const {
    return quantize(f_(FixedWord{xr, opt_.input_fmt}.to_double()), opt_.output_fmt).raw;
  }

  std::int64_t quad_for(std::int64_t a, std::int64_t b) const {
    if (opt_.degree != 2) return 0;
    const double mid = 0.5 * (FixedWord{a, opt_.input_fmt}.to_double() + FixedWord{b, opt_.input_fmt}.to_double());
    const double va = FixedWord{value_at(a), opt_.output_fmt}.to_double();
    const double vb = FixedWord{value_at(b), opt_.output_fmt}.to_double();
    return quantize(2.0 * (va + vb) - 4.0 * f_(mid), opt_.output_fmt).raw;
  }

  struct SegErr {
    double err = 0.0;
    std::int64_t argmax = 0;
  };

  // Max error of the single segment [a, b] over grid points it contains.
  SegErr segment_error(std::int64_t a, std::int64_t b) const {
    const std::int64_t va = value_at(a);
    const std::int64_t vb = value_at(b);
    const std::int64_t r = recip_for(b - a, recip_bits_);
    const std::int64_t c = quad_for(a, b);
    SegErr out{0.0, a};
    auto first = std::lower_bound(grid_.begin(), grid_.end(), a);
    for (auto it = first; it != grid_.end() && *it <= b; ++it) {
      const i128 y = interpolate(*it - a, r, recip_bits_, va, vb - va, c);
      const double yd = FixedWord{fx::saturate(y, opt_.output_fmt), opt_.output_fmt}.to_double();
      const double e = std::abs(yd - fvals_[static_cast<std::size_t>(it - grid_.begin())]);
      if (e > out.err) out = {e, *it};
    }
    return out;
  }

  std::int64_t recip_bits() const { return recip_bits_; }

 private:
  const RealFn& f_;
  SegmentOptions opt_;
  std::vector<std::int64_t> grid_;
  std::vector<double> fvals_;
  int recip_bits_ = 40;
};

}  // namespace detail

inline PwlTable make_table(const RealFn& f, std::vector<std::int64_t> knots, const SegmentOptions& o) {
  PwlTable t;
  t.degree = o.degree;
  t.input_fmt = o.input_fmt;
  t.output_fmt = o.output_fmt;
  t.range_policy = o.range_policy;
  if (o.range_policy == RangePolicy::linear_tails) t.tail_slopes = o.tail_slopes;
  t.knots_raw = std::move(knots);
  for (auto k : t.knots_raw) t.values_raw.push_back(quantize(f(FixedWord{k, o.input_fmt}.to_double()), o.output_fmt).raw);
  finalize(t);
  if (o.degree == 2) {
    for (std::size_t i = 0; i < t.segments(); ++i) {
      const double a = FixedWord{t.knots_raw[i], o.input_fmt}.to_double();
      const double b = FixedWord{t.knots_raw[i + 1], o.input_fmt}.to_double();
      const double va = FixedWord{t.values_raw[i], o.output_fmt}.to_double();
      const double vb = FixedWord{t.values_raw[i + 1], o.output_fmt}.to_double();
      t.quad_raw.push_back(quantize(2.0 * (va + vb) - 4.0 * f(0.5 * (a + b)), o.output_fmt).raw);
    }
  }
  validate(t);
  return t;
}

inline std::pair<std::int64_t, std::int64_t> interval_raw(double lo, double hi, const Format& fmt) {
  if (!(lo < hi)) throw std::invalid_argument("segment_function: interval requires lo < hi");
  const std::int64_t a = quantize(lo, fmt).raw;
  const std::int64_t b = quantize(hi, fmt).raw;
  if (b <= a) throw std::invalid_argument("segment_function: interval collapses in input format");
  return {a, b};
}

// Greedy max-error bisection followed by one pass of local knot adjustment.
// Nodal values interpolate f; knots sit on the input format's raw grid.
inline PwlTable segment_function(const RealFn& f, double lo, double hi, const SegmentOptions& o) {
  require_valid(o.input_fmt);
  require_valid(o.output_fmt);
  if (o.max_segments == 0) throw std::invalid_argument("segment_function: max_segments must be positive");
  if (o.target_max_error && !(*o.target_max_error > 0)) throw std::invalid_argument("segment_function: target must be positive");
  const auto [a, b] = interval_raw(lo, hi, o.input_fmt);
  detail::Segmenter seg(f, a, b, o);

  std::vector<std::int64_t> knots{a, b};
  for (double k : o.fixed_knots) {
    const std::int64_t r = quantize(k, o.input_fmt).raw;
    if (r <= a || r >= b) throw std::invalid_argument("segment_function: fixed knot outside the open interval");
    knots.push_back(r);
  }
  std::sort(knots.begin(), knots.end());
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
  if (knots.size() - 1 > o.max_segments) throw std::invalid_argument("segment_function: fixed knots exceed the budget");
  const std::vector<std::int64_t> pinned(knots.begin() + 1, knots.end() - 1);
  std::vector<detail::Segmenter::SegErr> errs;
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) errs.push_back(seg.segment_error(knots[i], knots[i + 1]));
  auto worst = [&] {
    return std::max_element(errs.begin(), errs.end(), [](const auto& x, const auto& y) { return x.err < y.err; })->err;
  };
  auto meets = [&] { return o.target_max_error && worst() <= *o.target_max_error; };

  while (knots.size() - 1 < o.max_segments && !meets()) {
    // Largest error first; lowest index on ties.
    std::optional<std::size_t> pick;
    for (std::size_t i = 0; i < errs.size(); ++i) {
      if (knots[i + 1] - knots[i] < 2) continue;
      if (!pick || errs[i].err > errs[*pick].err) pick = i;
    }
    if (!pick || errs[*pick].err == 0.0) break;
    const std::size_t i = *pick;
    std::int64_t split = errs[i].argmax;
    if (split <= knots[i] || split >= knots[i + 1]) split = knots[i] + (knots[i + 1] - knots[i]) / 2;
    knots.insert(knots.begin() + static_cast<std::ptrdiff_t>(i) + 1, split);
    errs[i] = seg.segment_error(knots[i], split);
    errs.insert(errs.begin() + static_cast<std::ptrdiff_t>(i) + 1, seg.segment_error(split, knots[i + 2]));
  }

  if (o.local_search) {
    for (std::size_t j = 1; j + 1 < knots.size(); ++j) {
      if (std::binary_search(pinned.begin(), pinned.end(), knots[j])) continue;
      double cur = std::max(errs[j - 1].err, errs[j].err);
      for (std::int64_t step = (knots[j + 1] - knots[j - 1]) / 4; step >= 1; step /= 2) {
        for (int dir : {-1, 1}) {
          const std::int64_t cand = knots[j] + dir * step;
          if (cand <= knots[j - 1] || cand >= knots[j + 1]) continue;
          const auto left = seg.segment_error(knots[j - 1], cand);
          const auto right = seg.segment_error(cand, knots[j + 1]);
          const double e = std::max(left.err, right.err);
          if (e < cur) {
            cur = e;
            knots[j] = cand;
            errs[j - 1] = left;
            errs[j] = right;
          }
        }
      }
    }
  }

  if (o.target_max_error && !meets()) throw InfeasibleBudget(worst(), knots.size() - 1);
  return make_table(f, std::move(knots), o);
}

// Equal-width segmentation, used as the baseline the non-uniform tables beat.
inline PwlTable uniform_table(const RealFn& f, double lo, double hi, std::size_t segments, const SegmentOptions& o) {
  const auto [a, b] = interval_raw(lo, hi, o.input_fmt);
  if (segments == 0 || static_cast<std::int64_t>(segments) > b - a)
    throw std::invalid_argument("uniform_table: bad segment count");
  std::vector<std::int64_t> knots;
  for (std::size_t i = 0; i <= segments; ++i)
    knots.push_back(a + static_cast<std::int64_t>((static_cast<i128>(b - a) * i) / segments));
  return make_table(f, std::move(knots), o);
}

// ---- file form -------------------------------------------------------------

inline nlohmann::ordered_json to_json(const PwlTable& t) {
  nlohmann::ordered_json j;
  j["degree"] = t.degree;
  j["input_fmt"] = t.input_fmt.to_string();
  j["output_fmt"] = t.output_fmt.to_string();
  j["range_policy"] = to_string(t.range_policy);
  if (t.range_policy == RangePolicy::linear_tails) j["tail_slopes"] = t.tail_slopes;
  j["prescale"] = t.prescale;
  j["postscale"] = t.postscale;
  j["recip_frac_bits"] = t.recip_frac_bits;
  j["knots_raw"] = t.knots_raw;
  j["values_raw"] = t.values_raw;
  j["recip_width_raw"] = t.recip_width_raw;
  if (t.degree == 2) j["quad_raw"] = t.quad_raw;
  return j;
}

inline PwlTable table_from_json(const nlohmann::json& j) {
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!j.is_object() || !j.contains(name)) throw TableError(std::string(name) + ": missing field");
    return j.at(name);
  };
  auto ints = [&](const char* name) {
    const auto& a = field(name);
    if (!a.is_array()) throw TableError(std::string(name) + ": expected an array of integers");
    std::vector<std::int64_t> out;
    for (const auto& e : a) {
      if (!e.is_number_integer()) throw TableError(std::string(name) + ": expected an array of integers");
      out.push_back(e.get<std::int64_t>());
    }
    return out;
  };
  auto integer = [&](const char* name) {
    const auto& v = field(name);
    if (!v.is_number_integer()) throw TableError(std::string(name) + ": expected an integer");
    return v.get<int>();
  };
  auto fmt = [&](const char* name) {
    const auto& v = field(name);
    if (!v.is_string()) throw TableError(std::string(name) + ": expected a format string");
    try {
      return Format::parse(v.get<std::string>());
    } catch (const FormatError& e) {
      throw TableError(std::string(name) + ": " + e.what());
    }
  };
  PwlTable t;
  t.degree = integer("degree");
  t.input_fmt = fmt("input_fmt");
  t.output_fmt = fmt("output_fmt");
  const auto& policy = field("range_policy");
  if (policy == "clamp")
    t.range_policy = RangePolicy::clamp;
  else if (policy == "extrapolate_last_segment")
    t.range_policy = RangePolicy::extrapolate_last_segment;
  else if (policy == "linear_tails")
    t.range_policy = RangePolicy::linear_tails;
  else
    throw TableError("range_policy: unknown policy");
  if (t.range_policy == RangePolicy::linear_tails) {
    const auto slopes = ints("tail_slopes");
    if (slopes.size() != 2) throw TableError("tail_slopes: expected two slopes");
    for (int i = 0; i < 2; ++i) {
      if (std::abs(slopes[static_cast<std::size_t>(i)]) > 16) throw TableError("tail_slopes: out of range");
      t.tail_slopes[static_cast<std::size_t>(i)] = static_cast<int>(slopes[static_cast<std::size_t>(i)]);
    }
  }
  t.prescale = integer("prescale");
  t.postscale = integer("postscale");
  t.recip_frac_bits = integer("recip_frac_bits");
  t.knots_raw = ints("knots_raw");
  t.values_raw = ints("values_raw");
  t.recip_width_raw = ints("recip_width_raw");
  if (t.degree == 2) t.quad_raw = ints("quad_raw");
  validate(t);
  return t;
}

inline std::string write_table_string(const PwlTable& t) { return to_json(t).dump(2) + "\n"; }

inline PwlTable read_table_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw TableError(std::string("table file: ") + e.what());
  }
  return table_from_json(j);
}

inline void write_table(const PwlTable& t, const std::string& path) { write_file_atomic(path, write_table_string(t)); }

inline PwlTable read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return read_table_string(ss.str());
}

}  // namespace npe
