#pragma once

// Per-thread primitive-operation counters. Fixed-point kernels record every
// primitive they invoke so the set of operation kinds can be audited.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace npe {

enum class Op : std::size_t {
  pwl_eval,
  find_segment,
  add,
  sub,
  mul,
  shift,
  compare,
  minmax,
  reduce,
  permute,
  // Primitives a unified-approach kernel must never touch.
  divide,
  exp,
  sqrt,
  transcendental,
  kCount
};

inline constexpr std::string_view op_name(Op op) {
  constexpr std::array<std::string_view, static_cast<std::size_t>(Op::kCount)> names = {
      "pwl_eval", "find_segment", "add",    "sub", "mul",  "shift",         "compare",
      "minmax",   "reduce",       "permute", "divide", "exp", "sqrt", "transcendental"};
  return names[static_cast<std::size_t>(op)];
}

inline constexpr bool is_forbidden(Op op) {
  return op == Op::divide || op == Op::exp || op == Op::sqrt || op == Op::transcendental;
}

namespace oplog {

struct Counters {
  std::array<std::uint64_t, static_cast<std::size_t>(Op::kCount)> n{};
  std::uint64_t operator[](Op op) const { return n[static_cast<std::size_t>(op)]; }
  std::uint64_t forbidden() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < n.size(); ++i)
      if (is_forbidden(static_cast<Op>(i))) s += n[i];
    return s;
  }
};

struct State {
  Counters counters;
  int depth = 0;
};

inline State& state() {
  thread_local State s;
  return s;
}

inline void record(Op op, std::uint64_t times = 1) {
  auto& s = state();
  if (s.depth > 0) s.counters.n[static_cast<std::size_t>(op)] += times;
}

// RAII capture: counts everything recorded on this thread while alive.
class Scope {
 public:
  Scope() {
    auto& s = state();
    if (s.depth++ == 0) s.counters = {};
  }
  ~Scope() { --state().depth; }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;
  const Counters& counters() const { return state().counters; }
};

}  // namespace oplog
}  // namespace npe
