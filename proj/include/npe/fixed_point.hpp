#pragma once

// Parametric Q-format fixed point with round-to-nearest-even and saturation.
// All arithmetic runs on exact integers in a 128-bit intermediate; nothing in
// the committed numeric path depends on floating point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

#include "npe/op_log.hpp"

namespace npe {

__extension__ typedef __int128 i128;

class FormatError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values (reported to users as usage errors).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Format {
  int total_bits = 16;
  int frac_bits = 15;

  constexpr Format() = default;
  constexpr Format(int total, int frac) : total_bits(total), frac_bits(frac) {}

  constexpr bool valid() const {
    return (total_bits == 8 || total_bits == 16 || total_bits == 32 || total_bits == 64) &&
           frac_bits >= 0 && frac_bits < total_bits;
  }
  constexpr int int_bits() const { return total_bits - frac_bits; }
  constexpr std::int64_t max_raw() const {
    return total_bits == 64 ? std::numeric_limits<std::int64_t>::max()
                            : (std::int64_t{1} << (total_bits - 1)) - 1;
  }
  constexpr std::int64_t min_raw() const {
    return total_bits == 64 ? std::numeric_limits<std::int64_t>::min()
                            : -(std::int64_t{1} << (total_bits - 1));
  }
  double ulp() const { return std::ldexp(1.0, -frac_bits); }

  friend constexpr bool operator==(const Format&, const Format&) = default;

  // "Qi.f@b", e.g. "Q1.15@16".
  std::string to_string() const {
    return "Q" + std::to_string(int_bits()) + "." + std::to_string(frac_bits) + "@" +
           std::to_string(total_bits);
  }

  static Format parse(std::string_view s) {
    auto fail = [&] { return FormatError("malformed fixed-point format '" + std::string(s) + "'"); };
    if (s.size() < 6 || s[0] != 'Q') throw fail();
    const auto dot = s.find('.');
    const auto at = s.find('@');
    if (dot == std::string_view::npos || at == std::string_view::npos || dot > at) throw fail();
    auto to_int = [&](std::string_view part) {
      if (part.empty()) throw fail();
      int v = 0;
      for (char c : part) {
        if (c < '0' || c > '9') throw fail();
        v = v * 10 + (c - '0');
        if (v > 1000) throw fail();
      }
      return v;
    };
    const int i = to_int(s.substr(1, dot - 1));
    const int f = to_int(s.substr(dot + 1, at - dot - 1));
    const int b = to_int(s.substr(at + 1));
    Format fmt{b, f};
    if (i + f != b || !fmt.valid()) throw fail();
    return fmt;
  }
};

inline void require_valid(const Format& f) {
  if (!f.valid()) throw FormatError("invalid fixed-point format " + f.to_string());
}

struct FixedWord {
  std::int64_t raw = 0;
  Format fmt{};

  double to_double() const { return std::ldexp(static_cast<double>(raw), -fmt.frac_bits); }
  friend constexpr bool operator==(const FixedWord&, const FixedWord&) = default;
};

namespace fx {

inline std::int64_t saturate(i128 v, const Format& f) {
  if (v > f.max_raw()) return f.max_raw();
  if (v < f.min_raw()) return f.min_raw();
  return static_cast<std::int64_t>(v);
}

// Arithmetic right shift with round-to-nearest, ties to even.
inline i128 shift_right_rne(i128 v, int shift) {
  if (shift <= 0) return v;
  if (shift >= 126) return 0;
  const i128 q = v >> shift;  // floor
  const i128 rem = v - (q << shift);
  const i128 half = i128{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) return q + 1;
  return q;
}

inline i128 shift_left_sat(i128 v, int shift) {
  if (shift <= 0) return v;
  constexpr i128 limit = i128{1} << 100;
  if (v == 0) return 0;
  if (shift >= 100) return v > 0 ? limit : -limit;
  const i128 bound = limit >> shift;
  if (v >= bound) return limit;
  if (v <= -bound) return -limit;
  return v << shift;
}

// Rescale an exact integer with `from_frac` fractional bits into `to`.
inline std::int64_t rescale(i128 v, int from_frac, const Format& to) {
  const int d = to.frac_bits - from_frac;
  const i128 r = d >= 0 ? shift_left_sat(v, d) : shift_right_rne(v, -d);
  return saturate(r, to);
}

}  // namespace fx

inline FixedWord quantize(double value, const Format& fmt) {
  require_valid(fmt);
  if (std::isnan(value)) throw std::domain_error("quantize: NaN input");
  const double scaled = std::ldexp(value, fmt.frac_bits);
  // Compare in the floating domain before converting so huge values saturate.
  const double hi = std::ldexp(1.0, fmt.total_bits - 1);
  if (scaled >= hi) return {fmt.max_raw(), fmt};
  if (scaled < -hi) return {fmt.min_raw(), fmt};
  double r = std::nearbyint(scaled);  // default rounding mode is ties-to-even
  if (r >= hi) return {fmt.max_raw(), fmt};
  return {static_cast<std::int64_t>(r), fmt};
}

inline double dequantize(const FixedWord& w) { return w.to_double(); }

inline FixedWord requantize(const FixedWord& w, const Format& to) {
  require_valid(to);
  oplog::record(Op::shift);
  return {fx::rescale(w.raw, w.fmt.frac_bits, to), to};
}

enum class ArithOp { add, sub, mul, shift };

// add/sub align to the wider fraction exactly; mul keeps m+n fraction bits;
// shift treats b.raw as a signed left-shift amount (negative shifts right).
inline FixedWord fx_arith(ArithOp op, const FixedWord& a, const FixedWord& b, const Format& out) {
  require_valid(out);
  switch (op) {
    case ArithOp::add:
    case ArithOp::sub: {
      oplog::record(op == ArithOp::add ? Op::add : Op::sub);
      const int f = std::max(a.fmt.frac_bits, b.fmt.frac_bits);
      const i128 x = i128{a.raw} << (f - a.fmt.frac_bits);
      const i128 y = i128{b.raw} << (f - b.fmt.frac_bits);
      return {fx::rescale(op == ArithOp::add ? x + y : x - y, f, out), out};
    }
    case ArithOp::mul: {
      oplog::record(Op::mul);
      return {fx::rescale(i128{a.raw} * i128{b.raw}, a.fmt.frac_bits + b.fmt.frac_bits, out), out};
    }
    case ArithOp::shift: {
      oplog::record(Op::shift);
      const std::int64_t amount = b.raw;
      if (amount < -127 || amount > 127) throw std::out_of_range("fx_arith: shift amount out of range");
      return {fx::rescale(a.raw, a.fmt.frac_bits - static_cast<int>(amount), out), out};
    }
  }
  throw std::logic_error("fx_arith: unknown op");
}

inline FixedWord fx_add(const FixedWord& a, const FixedWord& b, const Format& out) {
  return fx_arith(ArithOp::add, a, b, out);
}
inline FixedWord fx_sub(const FixedWord& a, const FixedWord& b, const Format& out) {
  return fx_arith(ArithOp::sub, a, b, out);
}
inline FixedWord fx_mul(const FixedWord& a, const FixedWord& b, const Format& out) {
  return fx_arith(ArithOp::mul, a, b, out);
}
inline FixedWord fx_shift(const FixedWord& a, int amount, const Format& out) {
  return fx_arith(ArithOp::shift, a, FixedWord{amount, Format{8, 0}}, out);
}

inline FixedWord fx_max(const FixedWord& a, const FixedWord& b) {
  oplog::record(Op::minmax);
  const int f = std::max(a.fmt.frac_bits, b.fmt.frac_bits);
  return (i128{a.raw} << (f - a.fmt.frac_bits)) >= (i128{b.raw} << (f - b.fmt.frac_bits)) ? a : b;
}

// a*b*2^shift_left rounded once into `out` (multiplier with a post-shifter).
inline FixedWord fx_mul_shift(const FixedWord& a, const FixedWord& b, int shift_left, const Format& out) {
  require_valid(out);
  oplog::record(Op::mul);
  oplog::record(Op::shift);
  return {fx::rescale(i128{a.raw} * i128{b.raw}, a.fmt.frac_bits + b.fmt.frac_bits - shift_left, out), out};
}

// a*b + c rounded once into `out` (multiplier with a post-adder).
inline FixedWord fx_mac(const FixedWord& a, const FixedWord& b, const FixedWord& c, const Format& out) {
  require_valid(out);
  oplog::record(Op::mul);
  oplog::record(Op::add);
  const int fp = a.fmt.frac_bits + b.fmt.frac_bits;
  const int f = std::max(fp, c.fmt.frac_bits);
  const i128 p = (i128{a.raw} * i128{b.raw}) << (f - fp);
  return {fx::rescale(p + (i128{c.raw} << (f - c.fmt.frac_bits)), f, out), out};
}

// floor(log2(w)) for w > 0, found by a priority encoder over the raw bits.
inline int fx_log2_floor(const FixedWord& w) {
  oplog::record(Op::compare);
  if (w.raw <= 0) throw std::domain_error("fx_log2_floor: non-positive input");
  int msb = 63;
  while (((static_cast<std::uint64_t>(w.raw) >> msb) & 1u) == 0) --msb;
  return msb - w.fmt.frac_bits;
}

inline FixedWord fx_min(const FixedWord& a, const FixedWord& b) {
  oplog::record(Op::minmax);
  const int f = std::max(a.fmt.frac_bits, b.fmt.frac_bits);
  return (i128{a.raw} << (f - a.fmt.frac_bits)) <= (i128{b.raw} << (f - b.fmt.frac_bits)) ? a : b;
}

}  // namespace npe
