#pragma once

// Matrix multiply unit: PE array of multiply-accumulate lanes with exact
// integer accumulation followed by one quantization step.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "npe/fixed_point.hpp"
#include "npe/matrix.hpp"
#include "npe/workload.hpp"

namespace npe {

enum class Precision { int8, int16 };

inline const char* to_string(Precision p) { return p == Precision::int8 ? "int8" : "int16"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "int8") return Precision::int8;
  if (s == "int16") return Precision::int16;
  throw ConfigError("unknown precision '" + s + "' (expected int8 or int16)");
}

struct MmuConfig {
  int pe_count = 128;
  int macs_per_pe = 16;
  Precision precision = Precision::int16;
  Format output_fmt{16, 11};
  friend bool operator==(const MmuConfig&, const MmuConfig&) = default;

  // Two 8-bit products share one DSP slice in 8-bit mode.
  std::uint64_t mults_per_cycle() const {
    return static_cast<std::uint64_t>(pe_count) * static_cast<std::uint64_t>(macs_per_pe) *
           (precision == Precision::int8 ? 2u : 1u);
  }
  int operand_bits() const { return precision == Precision::int8 ? 8 : 16; }

  void validate() const {
    if (pe_count < 1 || macs_per_pe < 1) throw ConfigError("mmu: pe_count and macs_per_pe must be positive");
    if (output_fmt.total_bits != 16 || !output_fmt.valid()) throw ConfigError("mmu: output_fmt must be a 16-bit format");
  }
};

using FixedMatrix = Matrix<FixedWord>;

inline constexpr int kAccumulatorBits = 32;

struct MmuResult {
  FixedMatrix c;
  std::uint64_t cycles = 0;
};

namespace detail {
inline void check_operands(const FixedMatrix& a, const FixedMatrix& b, const MmuConfig& cfg) {
  cfg.validate();
  if (a.cols() != b.rows())
    throw ShapeError("mmu_matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  if (a.size() == 0 || b.size() == 0) throw ShapeError("mmu_matmul: empty operand");
  const int bits = cfg.operand_bits();
  auto check = [&](const FixedMatrix& m, const char* which) {
    const Format f = m.data().front().fmt;
    if (f.total_bits != bits)
      throw FormatError(std::string("mmu_matmul: operand ") + which + " is " + f.to_string() + ", expected " +
                        std::to_string(bits) + "-bit words for " + to_string(cfg.precision));
    for (const auto& w : m.data())
      if (w.fmt != f) throw FormatError(std::string("mmu_matmul: operand ") + which + " mixes formats");
  };
  check(a, "A");
  check(b, "B");
}
}  // namespace detail

// Raw accumulator contents (frac bits = fa + fb), saturated to the accumulator width.
inline Matrix<std::int64_t> mmu_accumulate(const FixedMatrix& a, const FixedMatrix& b, const MmuConfig& cfg) {
  detail::check_operands(a, b, cfg);
  const Format acc{kAccumulatorBits, 0};
  const std::size_t n = a.rows(), m = b.cols(), kk = a.cols();
  // Operands fit in 16 bits and K is small enough that the int64 partial
  // sums are exact; saturation applies to the finished dot product.
  std::vector<std::int64_t> braw(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) braw[i] = b.data()[i].raw;
  Matrix<std::int64_t> out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    std::int64_t* row = &out.data()[i * m];
    for (std::size_t k = 0; k < kk; ++k) {
      const std::int64_t x = a(i, k).raw;
      if (x == 0) continue;
      const std::int64_t* brow = &braw[k * m];
      for (std::size_t j = 0; j < m; ++j) row[j] += x * brow[j];
    }
    for (std::size_t j = 0; j < m; ++j) row[j] = fx::saturate(row[j], acc);
  }
  return out;
}

inline MmuResult mmu_matmul(const FixedMatrix& a, const FixedMatrix& b, const MmuConfig& cfg) {
  const Matrix<std::int64_t> acc = mmu_accumulate(a, b, cfg);
  const int frac = a.data().front().fmt.frac_bits + b.data().front().fmt.frac_bits;
  MmuResult r{FixedMatrix(acc.rows(), acc.cols()), matmul_cycles(a.rows(), b.cols(), a.cols(), cfg.mults_per_cycle())};
  for (std::size_t i = 0; i < acc.size(); ++i)
    r.c.data()[i] = {fx::rescale(acc.data()[i], frac, cfg.output_fmt), cfg.output_fmt};
  return r;
}

// ---- 8-bit slot pairing -----------------------------------------------------

// One product A(i,k) * B(k,j).
struct Product {
  std::size_t i = 0, j = 0, k = 0;
  friend bool operator==(const Product&, const Product&) = default;
};

// Products issued together on one DSP slice; the second may be empty.
struct SlotPair {
  Product first;
  std::optional<Product> second;
};

using Tiling = std::vector<SlotPair>;

inline bool shares_operand(const Product& p, const Product& q) {
  const bool same_a = p.i == q.i && p.k == q.k;
  const bool same_b = p.k == q.k && p.j == q.j;
  return same_a || same_b;
}

// Default dataflow: adjacent output columns share the A operand; a leftover
// odd column pairs adjacent rows on the shared B operand.
inline Tiling default_tiling(std::size_t n, std::size_t m, std::size_t k) {
  Tiling t;
  t.reserve(n * k * ((m + 1) / 2));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j + 1 < m; j += 2)
      for (std::size_t kk = 0; kk < k; ++kk) t.push_back({{i, j, kk}, Product{i, j + 1, kk}});
  if (m % 2 == 1) {
    const std::size_t j = m - 1;
    for (std::size_t i = 0; i < n; i += 2)
      for (std::size_t kk = 0; kk < k; ++kk) {
        if (i + 1 < n)
          t.push_back({{i, j, kk}, Product{i + 1, j, kk}});
        else
          t.push_back({{i, j, kk}, std::nullopt});
      }
  }
  return t;
}

struct TilingCheck {
  bool ok = true;
  std::size_t tile = 0;  // offending slot index when !ok
  std::string message;
};

// Every slot pairs products sharing an operand, and the slots cover the
// N*M*K product set exactly once.
inline TilingCheck check_tiling(const Tiling& t, std::size_t n, std::size_t m, std::size_t k) {
  std::vector<bool> seen(n * m * k, false);
  auto mark = [&](const Product& p, std::size_t idx) -> std::optional<TilingCheck> {
    if (p.i >= n || p.j >= m || p.k >= k) return TilingCheck{false, idx, "product outside the matmul shape"};
    const std::size_t key = (p.i * m + p.j) * k + p.k;
    if (seen[key]) return TilingCheck{false, idx, "product issued twice"};
    seen[key] = true;
    return std::nullopt;
  };
  for (std::size_t idx = 0; idx < t.size(); ++idx) {
    const SlotPair& s = t[idx];
    if (auto bad = mark(s.first, idx)) return *bad;
    if (s.second) {
      if (auto bad = mark(*s.second, idx)) return *bad;
      if (!shares_operand(s.first, *s.second)) {
        const auto& p = s.first;
        const auto& q = *s.second;
        return {false, idx,
                "slot " + std::to_string(idx) + " pairs A(" + std::to_string(p.i) + "," + std::to_string(p.k) + ")*B(" +
                    std::to_string(p.k) + "," + std::to_string(p.j) + ") with A(" + std::to_string(q.i) + "," +
                    std::to_string(q.k) + ")*B(" + std::to_string(q.k) + "," + std::to_string(q.j) +
                    "): no common input"};
      }
    }
  }
  for (bool b : seen)
    if (!b) return {false, t.size(), "tiling leaves products uncovered"};
  return {};
}

inline TilingCheck shared_input_constraint_check(const FixedMatrix& a, const FixedMatrix& b, const MmuConfig& cfg,
                                                 const std::optional<Tiling>& tiling = std::nullopt) {
  if (cfg.precision != Precision::int8) throw ConfigError("shared_input_constraint_check: requires int8 precision");
  if (a.cols() != b.rows()) throw ShapeError("shared_input_constraint_check: inner dimensions differ");
  const std::size_t n = a.rows(), m = b.cols(), k = a.cols();
  return check_tiling(tiling ? *tiling : default_tiling(n, m, k), n, m, k);
}

}  // namespace npe
