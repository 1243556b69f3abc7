#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "npe/fixed_point.hpp"
#include "npe/op_log.hpp"
#include "oracles.hpp"

using namespace npe;

namespace {
const Format q15{16, 15};
const Format q8_8{16, 8};
const Format q2_30{32, 30};
}  // namespace

TEST(Format, ParsesAndPrints) {
  EXPECT_EQ(Format::parse("Q1.15@16"), q15);
  EXPECT_EQ(Format::parse("Q8.24@32").frac_bits, 24);
  EXPECT_EQ(q2_30.to_string(), "Q2.30@32");
  EXPECT_THROW(Format::parse("Q1.14@16"), FormatError);
  EXPECT_THROW(Format::parse("Q1.15"), FormatError);
  EXPECT_THROW(Format::parse("Q4.8@12"), FormatError);
  EXPECT_THROW(quantize(1.0, Format{12, 4}), FormatError);
}

TEST(Quantize, ExactPowerOfTwo) { EXPECT_EQ(quantize(0.5, q15).raw, 0x4000); }

TEST(Quantize, SaturatesOutOfRange) {
  EXPECT_EQ(quantize(2.0, q15).raw, 0x7FFF);
  EXPECT_EQ(quantize(-2.0, q15).raw, -0x8000);
  EXPECT_EQ(quantize(1e300, q2_30).raw, q2_30.max_raw());
  EXPECT_THROW(quantize(NAN, q15), std::domain_error);
}

TEST(Quantize, PiWithinHalfUlp) {
  const double pi = std::numbers::pi;
  EXPECT_LE(std::abs(quantize(pi, q8_8).to_double() - pi), std::ldexp(1.0, -9));
}

// Rounding oracle: exact binary value of the double, rounded with big integers.
TEST(Quantize, MatchesRoundingOracleOnGrid) {
  for (const Format f : {q15, q8_8, Format{8, 4}, q2_30}) {
    for (int i = -20000; i <= 20000; ++i) {
      const double v = i * 0.000731 * std::ldexp(1.0, f.int_bits() - 1);
      int e = 0;
      const double m = std::frexp(v, &e);
      const auto mant = static_cast<std::int64_t>(std::ldexp(m, 53));  // v = mant * 2^(e-53)
      oracle::cpp_int exact = mant;
      const int frac = 53 - e;  // v = mant / 2^frac
      const std::int64_t want = oracle::rescale(exact, frac, f.frac_bits, f.total_bits);
      ASSERT_EQ(quantize(v, f).raw, want) << v << " in " << f.to_string();
      if (v < f.max_raw() * f.ulp() && v > f.min_raw() * f.ulp()) {
        ASSERT_LE(std::abs(quantize(v, f).to_double() - v), f.ulp() / 2);
      }
    }
  }
}

TEST(Arith, ExactProduct) {
  const auto h = quantize(0.5, q15);
  EXPECT_EQ(fx_mul(h, h, q15).to_double(), 0.25);
}

TEST(Arith, AddSaturates) {
  const FixedWord m{q15.max_raw(), q15};
  EXPECT_EQ(fx_add(m, m, q15).raw, q15.max_raw());
  const FixedWord lo{q15.min_raw(), q15};
  EXPECT_EQ(fx_add(lo, lo, q15).raw, q15.min_raw());
}

TEST(Arith, MulMatchesBigIntegerOracle) {
  std::mt19937_64 g(11);
  std::uniform_int_distribution<std::int64_t> d(-32768, 32767);
  for (int i = 0; i < 1000; ++i) {
    const FixedWord a{d(g), q15}, b{d(g), Format{16, 11}};
    const oracle::cpp_int p = oracle::cpp_int(a.raw) * b.raw;
    ASSERT_EQ(fx_mul(a, b, q2_30).raw, oracle::rescale(p, 26, 30, 32));
    ASSERT_EQ(fx_mul(a, b, q15).raw, oracle::rescale(p, 26, 15, 16));
  }
}

TEST(Arith, AddSubAlignFractions) {
  const FixedWord a = quantize(1.25, Format{16, 11});
  const FixedWord b = quantize(0.0625, q15);
  EXPECT_EQ(fx_add(a, b, Format{32, 20}).to_double(), 1.3125);
  EXPECT_EQ(fx_sub(a, b, Format{32, 20}).to_double(), 1.1875);
}

TEST(Arith, ShiftBothDirections) {
  const FixedWord a = quantize(0.75, q15);
  EXPECT_EQ(fx_shift(a, 2, Format{16, 11}).to_double(), 3.0);
  EXPECT_EQ(fx_shift(a, -2, q15).to_double(), 0.1875);
  EXPECT_EQ(fx_shift(a, 4, q15).raw, q15.max_raw());
}

TEST(Arith, MulShiftAndMacRoundOnce) {
  std::mt19937_64 g(5);
  std::uniform_int_distribution<std::int64_t> d(-32768, 32767);
  for (int i = 0; i < 500; ++i) {
    const FixedWord a{d(g), q15}, b{d(g), Format{16, 11}}, c{d(g), Format{16, 11}};
    const int s = static_cast<int>(i % 9) - 4;
    const oracle::cpp_int p = oracle::cpp_int(a.raw) * b.raw;
    ASSERT_EQ(fx_mul_shift(a, b, s, Format{32, 20}).raw, oracle::rescale(p, 26 - s, 20, 32));
    ASSERT_EQ(fx_mac(a, b, c, Format{16, 11}).raw, oracle::rescale(p + (oracle::cpp_int(c.raw) << 15), 26, 11, 16));
  }
}

TEST(Arith, MinMaxAndLog2) {
  const FixedWord a = quantize(0.5, q15), b = quantize(-3.0, Format{16, 11});
  EXPECT_EQ(fx_max(a, b), a);
  EXPECT_EQ(fx_min(a, b), b);
  EXPECT_EQ(fx_log2_floor(quantize(5.0, Format{32, 15})), 2);
  EXPECT_EQ(fx_log2_floor(quantize(0.3, q15)), -2);
  EXPECT_THROW(fx_log2_floor(FixedWord{0, q15}), std::domain_error);
}

TEST(Requantize, NarrowingSaturates) {
  EXPECT_EQ(requantize(quantize(1.0, q8_8), q15).raw, q15.max_raw());
}

TEST(Requantize, WideningRoundTripIsLossless) {
  for (std::int64_t r = -32768; r <= 32767; r += 7) {
    const FixedWord x{r, q15};
    ASSERT_EQ(requantize(requantize(x, q2_30), q15), x);
  }
}

TEST(Requantize, NarrowingMatchesRneOracle) {
  std::mt19937_64 g(3);
  std::uniform_int_distribution<std::int64_t> d(INT32_MIN, INT32_MAX);
  for (int i = 0; i < 5000; ++i) {
    const FixedWord x{d(g), q2_30};
    ASSERT_EQ(requantize(x, q15).raw, oracle::rescale(x.raw, 30, 15, 16));
    ASSERT_EQ(requantize(x, Format{16, 11}).raw, oracle::rescale(x.raw, 30, 11, 16));
  }
  // exact ties go to even
  EXPECT_EQ(requantize(FixedWord{0x4000, q2_30}, q15).raw, 0);
  EXPECT_EQ(requantize(FixedWord{0xC000, q2_30}, q15).raw, 2);
  EXPECT_EQ(requantize(FixedWord{-0x4000, q2_30}, q15).raw, 0);
}

TEST(OpLog, CountsOnlyInsideScope) {
  const auto a = quantize(0.5, q15);
  fx_add(a, a, q15);
  oplog::Scope s;
  fx_add(a, a, q15);
  fx_mul(a, a, q15);
  fx_mul_shift(a, a, 1, q15);
  EXPECT_EQ(s.counters()[Op::add], 1u);
  EXPECT_EQ(s.counters()[Op::mul], 2u);
  EXPECT_EQ(s.counters()[Op::shift], 1u);
  EXPECT_EQ(s.counters().forbidden(), 0u);
}
