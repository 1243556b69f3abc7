#pragma once

// Nonlinear vector unit: VLIW microprograms (1 LSU + 3 VCU + 1 SCU op per
// bundle) for softmax, layer normalization, GELU and vector add, executed
// functionally on fixed-point lanes with an in-order scoreboard for timing.
//
// Timing model
//   - One bundle issues per cycle at most; a bundle issues when every source
//     it reads from an earlier bundle is ready and, if it holds multiplier
//     work, when the multiplier array is free.
//   - Ops in a bundle execute in slot order and may consume results of
//     single-cycle ops (loads, adds, compares) earlier in the same bundle.
//   - The multiplier array has one 16x16 multiplier per 32 bits of VRWIDTH.
//     A lane product of a-bit by b-bit operands costs ceil(a/16)*ceil(b/16)
//     multiplier passes; pwl_eval costs two products per lane.
//   - Reductions take log2(lanes) + reduce_extra cycles. Back-to-back
//     accumulating reductions into one scalar forward inside the reduction
//     unit and do not wait for each other.
//   - A vector op reading a scalar pays a broadcast delay of log2(16-bit
//     lanes) cycles after the scalar is ready.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "npe/fixed_point.hpp"
#include "npe/nonlinear.hpp"
#include "npe/pwl.hpp"

namespace npe {

// Calibration constants of the pipeline model.
struct NvuTiming {
  int scu_mul_latency = 2;
  int scu_pwl_latency = 3;
  int reduce_extra = 1;
  bool broadcast_tree = true;
  friend bool operator==(const NvuTiming&, const NvuTiming&) = default;
};

struct NvuConfig {
  int vrwidth_bits = 1024;
  int vrf_registers = 32;
  int vcu_issue_slots = 3;
  int srf_registers = 32;
  NvuTiming timing{};
  friend bool operator==(const NvuConfig&, const NvuConfig&) = default;

  void validate() const {
    if (vrwidth_bits != 256 && vrwidth_bits != 512 && vrwidth_bits != 1024 && vrwidth_bits != 2048)
      throw ConfigError("nvu: vrwidth_bits must be 256, 512, 1024 or 2048");
    if (vrf_registers != 32) throw ConfigError("nvu: vrf_registers must be 32");
    if (vcu_issue_slots != 3) throw ConfigError("nvu: vcu_issue_slots must be 3");
    if (srf_registers < 16) throw ConfigError("nvu: srf_registers must be at least 16");
    if (timing.scu_mul_latency < 2 || timing.scu_pwl_latency < 2 || timing.reduce_extra < 1)
      throw ConfigError("nvu: timing latencies below the modeled minimum");
  }
  int lanes(int element_bits) const { return vrwidth_bits / element_bits; }
  int multipliers() const { return vrwidth_bits / 32; }
  // 16-bit lanes a row of n elements occupies. A row shorter than one register
  // taps the reduction and broadcast trees at that width instead of the full one.
  int tree_lanes(std::size_t n) const {
    return static_cast<int>(std::clamp<std::size_t>(std::bit_ceil(n), 2, static_cast<std::size_t>(lanes(16))));
  }
  int broadcast_delay(std::size_t n) const {
    return timing.broadcast_tree ? std::bit_width(unsigned(tree_lanes(n))) - 1 : 0;
  }
  int reduce_latency(int lanes_reduced) const {
    return std::bit_width(unsigned(lanes_reduced)) - 1 + timing.reduce_extra;
  }
};

enum class Kernel { softmax, layernorm, gelu, vector_add };

inline const char* to_string(Kernel k) {
  switch (k) {
    case Kernel::softmax: return "softmax";
    case Kernel::layernorm: return "layernorm";
    case Kernel::gelu: return "gelu";
    case Kernel::vector_add: return "vector_add";
  }
  return "?";
}

inline Kernel parse_kernel(const std::string& s) {
  for (Kernel k : {Kernel::softmax, Kernel::layernorm, Kernel::gelu, Kernel::vector_add})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unsupported kernel '" + s + "'");
}

enum class Opc { load, store, add, sub, max, mul, mul_shift, mac, dot, sum_reduce, max_reduce, pwl_eval, log2, shift, ishr };

inline const char* to_string(Opc o) {
  switch (o) {
    case Opc::load: return "load";
    case Opc::store: return "store";
    case Opc::add: return "add";
    case Opc::sub: return "sub";
    case Opc::max: return "max";
    case Opc::mul: return "mul";
    case Opc::mul_shift: return "mulsh";
    case Opc::mac: return "mac";
    case Opc::dot: return "dot";
    case Opc::sum_reduce: return "rsum";
    case Opc::max_reduce: return "rmax";
    case Opc::pwl_eval: return "pwl";
    case Opc::log2: return "log2";
    case Opc::shift: return "shift";
    case Opc::ishr: return "ishr";
  }
  return "?";
}

enum class TableId { exp, recip, rsqrt, gelu };

inline const PwlTable& table_of(const NonlinearTables& t, TableId id) {
  switch (id) {
    case TableId::exp: return t.exp;
    case TableId::recip: return t.recip;
    case TableId::rsqrt: return t.rsqrt;
    case TableId::gelu: return t.gelu;
  }
  throw std::logic_error("unknown table");
}

inline const char* to_string(TableId id) {
  switch (id) {
    case TableId::exp: return "exp";
    case TableId::recip: return "recip";
    case TableId::rsqrt: return "rsqrt";
    case TableId::gelu: return "gelu";
  }
  return "?";
}

struct Reg {
  enum class File : std::uint8_t { none, v, s };
  File file = File::none;
  int idx = 0;
  int off = 0;  // first lane, vector registers only

  bool is_v() const { return file == File::v; }
  bool is_s() const { return file == File::s; }
  explicit operator bool() const { return file != File::none; }
  friend bool operator==(const Reg&, const Reg&) = default;
};

inline Reg V(int idx, int off = 0) { return {Reg::File::v, idx, off}; }
inline Reg S(int idx) { return {Reg::File::s, idx, 0}; }

enum class Unit { lsu, vcu, scu };

struct MicroOp {
  MicroOp() = default;
  explicit MicroOp(Opc o) : opc(o) {}

  Opc opc = Opc::add;
  Reg dst, a, b, c;
  int lanes = 0;            // lanes processed by vector ops
  Format out{};             // result format (non-LSU)
  TableId table = TableId::exp;
  Reg amt;                  // scalar holding a shift amount, scaled by amt_scale
  int amt_scale = 0;
  int imm = 0;              // ishr immediate
  int buffer = -1;          // LSU buffer id
  std::size_t addr = 0;     // LSU element offset
  bool accumulate = false;  // reductions add into dst

  Unit unit() const {
    if (opc == Opc::load || opc == Opc::store) return Unit::lsu;
    if (dst.is_v() || a.is_v()) return Unit::vcu;
    return Unit::scu;
  }
  bool uses_multipliers() const {
    return unit() == Unit::vcu &&
           (opc == Opc::mul || opc == Opc::mul_shift || opc == Opc::mac || opc == Opc::dot || opc == Opc::pwl_eval);
  }
  bool is_reduction() const { return opc == Opc::sum_reduce || opc == Opc::max_reduce || opc == Opc::dot; }
};

struct VliwBundle {
  std::vector<MicroOp> ops;
};

struct BufferDecl {
  enum class Role { input, scratch, output };
  std::string name;
  Format fmt;
  std::size_t size = 0;
  Role role = Role::input;
};

struct Microprogram {
  Kernel kernel = Kernel::gelu;
  std::size_t n = 0;
  NvuConfig cfg;
  bool fused_add = false;
  std::vector<BufferDecl> buffers;
  std::vector<std::pair<int, FixedWord>> constants;  // scalar registers preloaded at setup
  std::vector<VliwBundle> bundles;

  std::vector<int> input_buffers() const {
    std::vector<int> ids;
    for (std::size_t i = 0; i < buffers.size(); ++i)
      if (buffers[i].role == BufferDecl::Role::input) ids.push_back(static_cast<int>(i));
    return ids;
  }
  int output_buffer() const {
    for (std::size_t i = 0; i < buffers.size(); ++i)
      if (buffers[i].role == BufferDecl::Role::output) return static_cast<int>(i);
    return -1;
  }
};

class ProgramError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---- listing ------------------------------------------------------------------

inline std::string to_string(const Reg& r, int lanes = 0) {
  if (r.is_s()) return "s" + std::to_string(r.idx);
  if (!r.is_v()) return "-";
  std::string s = "v" + std::to_string(r.idx);
  if (lanes > 0) s += "[" + std::to_string(r.off) + ":" + std::to_string(r.off + lanes) + "]";
  return s;
}

inline std::string to_string(const MicroOp& op, const Microprogram& p) {
  std::ostringstream os;
  os << to_string(op.opc);
  auto vl = [&](const Reg& r) { return to_string(r, r.is_v() ? op.lanes : 0); };
  switch (op.opc) {
    case Opc::load:
      os << ' ' << vl(op.dst) << " <- " << p.buffers[static_cast<std::size_t>(op.buffer)].name << '@' << op.addr;
      return os.str();
    case Opc::store:
      os << ' ' << p.buffers[static_cast<std::size_t>(op.buffer)].name << '@' << op.addr << " <- " << vl(op.a);
      return os.str();
    default: break;
  }
  os << ' ' << vl(op.dst) << (op.accumulate ? " +<- " : " <- ") << vl(op.a);
  if (op.b) os << ", " << vl(op.b);
  if (op.c) os << ", " << vl(op.c);
  if (op.opc == Opc::pwl_eval) os << " #" << to_string(op.table);
  if (op.amt) os << " <<(" << op.amt_scale << '*' << to_string(op.amt) << ')';
  if (op.opc == Opc::ishr) os << " >>" << op.imm;
  if (op.opc != Opc::pwl_eval && op.opc != Opc::ishr && op.opc != Opc::log2) os << " :" << op.out.to_string();
  return os.str();
}

inline std::string listing(const Microprogram& p) {
  std::ostringstream os;
  os << "; " << to_string(p.kernel) << " n=" << p.n << " vrwidth=" << p.cfg.vrwidth_bits
     << (p.fused_add ? " fused_add" : "") << '\n';
  for (std::size_t i = 0; i < p.buffers.size(); ++i) {
    const auto& b = p.buffers[i];
    const char* role = b.role == BufferDecl::Role::input ? "in" : b.role == BufferDecl::Role::output ? "out" : "tmp";
    os << "; buffer " << b.name << ' ' << role << ' ' << b.fmt.to_string() << " x" << b.size << '\n';
  }
  for (const auto& [r, w] : p.constants) os << "; const s" << r << " = " << w.raw << " :" << w.fmt.to_string() << '\n';
  for (std::size_t i = 0; i < p.bundles.size(); ++i) {
    os << i << ':';
    const char* sep = " ";
    for (Unit u : {Unit::lsu, Unit::vcu, Unit::scu})
      for (const auto& op : p.bundles[i].ops)
        if (op.unit() == u) {
          os << sep << to_string(op, p);
          sep = " | ";
        }
    os << '\n';
  }
  return os.str();
}

// ---- legality -----------------------------------------------------------------

inline void check_bundle(const VliwBundle& b, const NvuConfig& cfg, std::size_t index) {
  int lsu = 0, vcu = 0, scu = 0;
  std::vector<int> vregs;
  auto touch = [&](const Reg& r) {
    if (r.is_v()) {
      if (r.idx < 0 || r.idx >= cfg.vrf_registers)
        throw ProgramError("bundle " + std::to_string(index) + ": vector register v" + std::to_string(r.idx) +
                           " out of range");
      if (std::find(vregs.begin(), vregs.end(), r.idx) == vregs.end()) vregs.push_back(r.idx);
    } else if (r.is_s() && (r.idx < 0 || r.idx >= cfg.srf_registers)) {
      throw ProgramError("bundle " + std::to_string(index) + ": scalar register s" + std::to_string(r.idx) +
                         " out of range");
    }
  };
  for (const auto& op : b.ops) {
    switch (op.unit()) {
      case Unit::lsu: ++lsu; break;
      case Unit::vcu: ++vcu; break;
      case Unit::scu: ++scu; break;
    }
    for (const Reg* r : {&op.dst, &op.a, &op.b, &op.c, &op.amt}) touch(*r);
  }
  if (lsu > 1 || vcu > cfg.vcu_issue_slots || scu > 1)
    throw ProgramError("bundle " + std::to_string(index) + ": exceeds 1 LSU + " + std::to_string(cfg.vcu_issue_slots) +
                       " VCU + 1 SCU ops");
  if (vregs.size() > 8) throw ProgramError("bundle " + std::to_string(index) + ": more than 8 vector register accesses");
}

// Bundle limits plus dataflow consistency: every register read was written
// earlier (or preloaded), and same-bundle reads only consume single-cycle results.
inline void validate_program(const Microprogram& p) {
  std::map<std::pair<int, int>, bool> written;  // (file, idx) -> produced by a multi-cycle op
  for (const auto& [r, w] : p.constants) written[{2, r}] = false;
  for (std::size_t i = 0; i < p.bundles.size(); ++i) {
    const VliwBundle& b = p.bundles[i];
    check_bundle(b, p.cfg, i);
    std::map<std::pair<int, int>, bool> local;
    for (const auto& op : b.ops) {
      auto read = [&](const Reg& r) {
        if (!r) return;
        const std::pair<int, int> key{static_cast<int>(r.file), r.idx};
        if (auto it = local.find(key); it != local.end()) {
          if (it->second)
            throw ProgramError("bundle " + std::to_string(i) + ": reads " + to_string(r) +
                               " produced by a multi-cycle op in the same bundle");
          return;
        }
        if (!written.count(key)) throw ProgramError("bundle " + std::to_string(i) + ": reads unwritten " + to_string(r));
      };
      for (const Reg* r : {&op.a, &op.b, &op.c, &op.amt}) read(*r);
      if (op.accumulate) read(op.dst);
      if (op.buffer >= static_cast<int>(p.buffers.size()) || (op.unit() == Unit::lsu && op.buffer < 0))
        throw ProgramError("bundle " + std::to_string(i) + ": bad buffer id");
      if (op.dst) {
        const bool multi = op.uses_multipliers() || op.is_reduction() ||
                           (op.unit() == Unit::scu && (op.opc == Opc::mul || op.opc == Opc::pwl_eval));
        local[{static_cast<int>(op.dst.file), op.dst.idx}] = multi;
      }
    }
    for (const auto& [k, v] : local) written[k] = v;
  }
}

// ---- microprogram expansion --------------------------------------------------------

struct ExpandOptions {
  // gelu: add a bias vector first; layernorm: add a residual vector first.
  bool fused_add = false;
  double epsilon = std::ldexp(1.0, -20);
};

namespace detail {

class Builder {
 public:
  explicit Builder(Microprogram& p) : p_(p) {}

  int buffer(std::string name, Format f, std::size_t size, BufferDecl::Role role) {
    p_.buffers.push_back({std::move(name), f, size, role});
    return static_cast<int>(p_.buffers.size()) - 1;
  }
  VliwBundle& bundle() {
    p_.bundles.emplace_back();
    return p_.bundles.back();
  }

  static MicroOp load(Reg dst, int buf, std::size_t addr, int lanes) {
    MicroOp op{Opc::load};
    op.dst = dst;
    op.buffer = buf;
    op.addr = addr;
    op.lanes = lanes;
    return op;
  }
  static MicroOp store(Reg src, int buf, std::size_t addr, int lanes) {
    MicroOp op{Opc::store};
    op.a = src;
    op.buffer = buf;
    op.addr = addr;
    op.lanes = lanes;
    return op;
  }
  static MicroOp alu(Opc o, Reg dst, Reg a, Reg b, int lanes, Format out) {
    MicroOp op{o};
    op.dst = dst;
    op.a = a;
    op.b = b;
    op.lanes = lanes;
    op.out = out;
    return op;
  }
  static MicroOp pwl(Reg dst, Reg a, TableId t, int lanes, const NonlinearTables& tables) {
    MicroOp op{Opc::pwl_eval};
    op.dst = dst;
    op.a = a;
    op.table = t;
    op.lanes = lanes;
    op.out = table_of(tables, t).output_fmt;
    return op;
  }
  static MicroOp reduce(Opc o, Reg dst, Reg a, Reg b, int lanes, Format out, bool acc) {
    MicroOp op = alu(o, dst, a, b, lanes, out);
    op.accumulate = acc;
    return op;
  }
  static MicroOp shifted(Opc o, Reg dst, Reg a, Reg b, Reg amt, int scale, int lanes, Format out) {
    MicroOp op = alu(o, dst, a, b, lanes, out);
    op.amt = amt;
    op.amt_scale = scale;
    return op;
  }

 private:
  Microprogram& p_;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline void expand_gelu(Microprogram& p, const NonlinearTables& t) {
  Builder bld(p);
  const int l16 = p.cfg.lanes(16);
  const std::size_t v = ceil_div(p.n, static_cast<std::size_t>(l16));
  const int x = bld.buffer("x", fmt::act, p.n, BufferDecl::Role::input);
  if (!p.fused_add) {
    const int y = bld.buffer("y", fmt::act, p.n, BufferDecl::Role::output);
    for (std::size_t j = 0; j < v; ++j) {
      const int r = static_cast<int>(j % 2) * 2;
      const std::size_t at = j * static_cast<std::size_t>(l16);
      bld.bundle().ops = {Builder::load(V(r), x, at, l16), Builder::pwl(V(r + 1), V(r), TableId::gelu, l16, t)};
      bld.bundle().ops = {Builder::store(V(r + 1), y, at, l16)};
    }
    return;
  }
  // Software-pipelined: the next input is fetched while the multipliers are busy.
  const int bias = bld.buffer("bias", fmt::act, p.n, BufferDecl::Role::input);
  const int y = bld.buffer("y", fmt::act, p.n, BufferDecl::Role::output);
  auto set = [](std::size_t j) { return static_cast<int>(j % 2) * 4; };
  auto at = [&](std::size_t j) { return j * static_cast<std::size_t>(l16); };
  bld.bundle().ops = {Builder::load(V(set(0)), x, 0, l16)};
  for (std::size_t j = 0; j < v; ++j) {
    const int r = set(j);
    bld.bundle().ops = {Builder::load(V(r + 1), bias, at(j), l16),
                        Builder::alu(Opc::add, V(r + 2), V(r), V(r + 1), l16, fmt::act),
                        Builder::pwl(V(r + 3), V(r + 2), TableId::gelu, l16, t)};
    if (j + 1 < v) bld.bundle().ops = {Builder::load(V(set(j + 1)), x, at(j + 1), l16)};
    bld.bundle().ops = {Builder::store(V(r + 3), y, at(j), l16)};
  }
}

inline void expand_vector_add(Microprogram& p) {
  Builder bld(p);
  const int l16 = p.cfg.lanes(16);
  const std::size_t v = ceil_div(p.n, static_cast<std::size_t>(l16));
  const int a = bld.buffer("a", fmt::act, p.n, BufferDecl::Role::input);
  const int b = bld.buffer("b", fmt::act, p.n, BufferDecl::Role::input);
  const int y = bld.buffer("y", fmt::act, p.n, BufferDecl::Role::output);
  for (std::size_t j = 0; j < v; ++j) {
    const std::size_t at = j * static_cast<std::size_t>(l16);
    bld.bundle().ops = {Builder::load(V(0), a, at, l16)};
    bld.bundle().ops = {Builder::load(V(1), b, at, l16), Builder::alu(Opc::add, V(2), V(0), V(1), l16, fmt::act)};
    bld.bundle().ops = {Builder::store(V(2), y, at, l16)};
  }
}

inline void expand_softmax(Microprogram& p, const NonlinearTables& t) {
  Builder bld(p);
  const int l16 = p.cfg.lanes(16);
  const std::size_t v = ceil_div(p.n, static_cast<std::size_t>(l16));
  const int x = bld.buffer("x", fmt::act, p.n, BufferDecl::Role::input);
  const int e = bld.buffer("e", fmt::exp_out, p.n, BufferDecl::Role::scratch);
  const int y = bld.buffer("y", fmt::prob, p.n, BufferDecl::Role::output);
  auto at = [&](std::size_t j) { return j * static_cast<std::size_t>(l16); };
  const Reg m = S(0), sum = S(1), ex = S(2), norm = S(3), rec = S(4);

  // Running lane-wise max, then one tree reduction.
  bld.bundle().ops = {Builder::load(V(0), x, 0, l16)};
  for (std::size_t j = 1; j < v; ++j)
    bld.bundle().ops = {Builder::load(V(1), x, at(j), l16), Builder::alu(Opc::max, V(0), V(0), V(1), l16, fmt::act)};
  bld.bundle().ops = {Builder::reduce(Opc::max_reduce, m, V(0), {}, l16, fmt::act, false)};

  // e = exp(x - max), kept in scratch; the sum accumulates in the reduction unit.
  for (std::size_t j = 0; j < v; ++j) {
    const int r = 2 + static_cast<int>(j % 2) * 3;
    bld.bundle().ops = {Builder::load(V(r), x, at(j), l16),
                        Builder::alu(Opc::sub, V(r + 1), V(r), m, l16, fmt::act),
                        Builder::pwl(V(r + 2), V(r + 1), TableId::exp, l16, t)};
    bld.bundle().ops = {Builder::store(V(r + 2), e, at(j), l16),
                        Builder::reduce(Opc::sum_reduce, sum, V(r + 2), {}, l16, fmt::exp_sum, j > 0)};
  }

  // 1/sum = recip(sum * 2^-k) * 2^-k on the scalar unit.
  MicroOp lg{Opc::log2};
  lg.dst = ex;
  lg.a = sum;
  bld.bundle().ops = {lg};
  bld.bundle().ops = {Builder::shifted(Opc::shift, norm, sum, {}, ex, -1, 0, fmt::unit32)};
  bld.bundle().ops = {Builder::pwl(rec, norm, TableId::recip, 0, t)};

  for (std::size_t j = 0; j < v; ++j) {
    const int r = 8 + static_cast<int>(j % 2) * 2;
    bld.bundle().ops = {Builder::load(V(r), e, at(j), l16),
                        Builder::shifted(Opc::mul_shift, V(r + 1), V(r), rec, ex, -1, l16, fmt::prob)};
    bld.bundle().ops = {Builder::store(V(r + 1), y, at(j), l16)};
  }
}

inline void expand_layernorm(Microprogram& p, const NonlinearTables& t, double epsilon) {
  Builder bld(p);
  const int l16 = p.cfg.lanes(16);
  const int h = l16 / 2;
  const std::size_t v = ceil_div(p.n, static_cast<std::size_t>(l16));
  auto at = [&](std::size_t j) { return j * static_cast<std::size_t>(l16); };
  const int x = bld.buffer(p.fused_add ? "a" : "x", fmt::act, p.n, BufferDecl::Role::input);
  const int res = p.fused_add ? bld.buffer("r", fmt::act, p.n, BufferDecl::Role::input) : -1;
  const int gamma = bld.buffer("gamma", fmt::act, p.n, BufferDecl::Role::input);
  const int beta = bld.buffer("beta", fmt::act, p.n, BufferDecl::Role::input);
  const int xs = p.fused_add ? bld.buffer("x", fmt::act, p.n, BufferDecl::Role::scratch) : x;
  const int y = bld.buffer("y", fmt::act, p.n, BufferDecl::Role::output);

  const Reg acc = S(0), inv_k = S(1), mean = S(2), sq = S(3), var0 = S(4), eps = S(5), var = S(6), ex = S(7),
            half = S(8), norm = S(9), rs = S(10);
  p.constants = {{inv_k.idx, quantize(1.0 / static_cast<double>(p.n), fmt::inv_k)},
                 {eps.idx, quantize(epsilon, fmt::ln_sq)}};

  // Row sum (optionally of a + r, which is written back for the later passes).
  for (std::size_t j = 0; j < v; ++j) {
    if (!p.fused_add) {
      bld.bundle().ops = {Builder::load(V(0), x, at(j), l16),
                          Builder::reduce(Opc::sum_reduce, acc, V(0), {}, l16, fmt::ln_acc, j > 0)};
      continue;
    }
    bld.bundle().ops = {Builder::load(V(0), x, at(j), l16)};
    bld.bundle().ops = {Builder::load(V(1), res, at(j), l16), Builder::alu(Opc::add, V(2), V(0), V(1), l16, fmt::act),
                        Builder::reduce(Opc::sum_reduce, acc, V(2), {}, l16, fmt::ln_acc, j > 0)};
    bld.bundle().ops = {Builder::store(V(2), xs, at(j), l16)};
  }
  bld.bundle().ops = {Builder::alu(Opc::mul, mean, acc, inv_k, 0, fmt::ln_dev)};

  // Sum of squared deviations: widen into two 32-bit halves, dot each.
  for (std::size_t j = 0; j < v; ++j) {
    bld.bundle().ops = {Builder::load(V(0), xs, at(j), l16),
                        Builder::alu(Opc::sub, V(1), V(0, 0), mean, h, fmt::ln_dev),
                        Builder::alu(Opc::sub, V(2), V(0, h), mean, h, fmt::ln_dev),
                        Builder::reduce(Opc::dot, sq, V(1), V(1), h, fmt::ln_sq, j > 0)};
    bld.bundle().ops = {Builder::reduce(Opc::dot, sq, V(2), V(2), h, fmt::ln_sq, true)};
  }

  // 1/sqrt(var + eps) = rsqrt(v * 2^-2h) * 2^-h on the scalar unit.
  bld.bundle().ops = {Builder::alu(Opc::mul, var0, sq, inv_k, 0, fmt::ln_sq)};
  bld.bundle().ops = {Builder::alu(Opc::add, var, var0, eps, 0, fmt::ln_sq)};
  MicroOp lg{Opc::log2};
  lg.dst = ex;
  lg.a = var;
  bld.bundle().ops = {lg};
  MicroOp hs{Opc::ishr};
  hs.dst = half;
  hs.a = ex;
  hs.imm = 1;
  bld.bundle().ops = {hs};
  bld.bundle().ops = {Builder::shifted(Opc::shift, norm, var, {}, half, -2, 0, fmt::rsqrt_in)};
  bld.bundle().ops = {Builder::pwl(rs, norm, TableId::rsqrt, 0, t)};

  // y = (x - mean) * rsqrt * gamma + beta.
  for (std::size_t j = 0; j < v; ++j) {
    bld.bundle().ops = {Builder::load(V(0), xs, at(j), l16),
                        Builder::alu(Opc::sub, V(1), V(0, 0), mean, h, fmt::ln_dev),
                        Builder::alu(Opc::sub, V(2), V(0, h), mean, h, fmt::ln_dev),
                        Builder::shifted(Opc::mul_shift, V(3), V(1), rs, half, -1, h, fmt::ln_dev)};
    bld.bundle().ops = {Builder::load(V(4), gamma, at(j), l16),
                        Builder::shifted(Opc::mul_shift, V(5), V(2), rs, half, -1, h, fmt::ln_dev)};
    MicroOp lo = Builder::alu(Opc::mac, V(7, 0), V(3), V(4, 0), h, fmt::act);
    lo.c = V(6, 0);
    MicroOp hi = Builder::alu(Opc::mac, V(7, h), V(5), V(4, h), h, fmt::act);
    hi.c = V(6, h);
    bld.bundle().ops = {Builder::load(V(6), beta, at(j), l16), lo, hi};
    bld.bundle().ops = {Builder::store(V(7), y, at(j), l16)};
  }
}

}  // namespace detail

inline Microprogram expand_microprogram(Kernel kernel, std::size_t n, const NvuConfig& cfg,
                                        const ExpandOptions& opt = {},
                                        const NonlinearTables& tables = default_tables()) {
  cfg.validate();
  if (n == 0) throw std::invalid_argument("expand_microprogram: n_elements must be positive");
  Microprogram p;
  p.kernel = kernel;
  p.n = n;
  p.cfg = cfg;
  p.fused_add = opt.fused_add && (kernel == Kernel::gelu || kernel == Kernel::layernorm);
  switch (kernel) {
    case Kernel::gelu: detail::expand_gelu(p, tables); break;
    case Kernel::vector_add: detail::expand_vector_add(p); break;
    case Kernel::softmax: detail::expand_softmax(p, tables); break;
    case Kernel::layernorm: detail::expand_layernorm(p, tables, opt.epsilon); break;
    default: throw std::invalid_argument("expand_microprogram: unsupported kernel");
  }
  validate_program(p);
  return p;
}

// ---- execution --------------------------------------------------------------------

struct ExecResult {
  FixedVector output;
  std::uint64_t cycles = 0;
  std::uint64_t bundles = 0;
  std::uint64_t stall_cycles = 0;  // cycles in which no bundle issued
};

class NvuMachine {
 public:
  NvuMachine(const NvuConfig& cfg, const NonlinearTables& tables) : cfg_(cfg), tables_(tables) {
    cfg_.validate();
    vregs_.resize(static_cast<std::size_t>(cfg_.vrf_registers));
    sregs_.resize(static_cast<std::size_t>(cfg_.srf_registers));
    vready_.assign(vregs_.size(), Ready{});
    sready_.assign(sregs_.size(), Ready{});
  }

  ExecResult run(const Microprogram& p, const std::vector<FixedVector>& inputs) {
    if (p.cfg.vrwidth_bits != cfg_.vrwidth_bits) throw ProgramError("execute: program built for another VRWIDTH");
    const auto in_ids = p.input_buffers();
    if (inputs.size() != in_ids.size())
      throw std::invalid_argument("execute: expected " + std::to_string(in_ids.size()) + " input vectors, got " +
                                  std::to_string(inputs.size()));
    mem_.assign(p.buffers.size(), {});
    for (std::size_t i = 0; i < p.buffers.size(); ++i)
      mem_[i].assign(p.buffers[i].size, FixedWord{0, p.buffers[i].fmt});
    for (std::size_t i = 0; i < in_ids.size(); ++i) {
      const auto& decl = p.buffers[static_cast<std::size_t>(in_ids[i])];
      if (inputs[i].size() != decl.size)
        throw std::invalid_argument("execute: input '" + decl.name + "' has " + std::to_string(inputs[i].size()) +
                                    " elements, expected " + std::to_string(decl.size));
      for (const auto& w : inputs[i])
        if (w.fmt != decl.fmt)
          throw FormatError("execute: input '" + decl.name + "' must be " + decl.fmt.to_string());
      mem_[static_cast<std::size_t>(in_ids[i])] = inputs[i];
    }
    for (const auto& [r, w] : p.constants) {
      sregs_[static_cast<std::size_t>(r)] = {true, w};
      sready_[static_cast<std::size_t>(r)] = Ready{};
    }
    prog_ = &p;

    ExecResult res;
    std::int64_t t_prev = -1;
    for (std::size_t i = 0; i < p.bundles.size(); ++i) {
      check_bundle(p.bundles[i], cfg_, i);
      const std::int64_t t = issue_time(p.bundles[i], t_prev);
      res.stall_cycles += static_cast<std::uint64_t>(t - t_prev - 1);
      issue(p.bundles[i], t);
      t_prev = t;
    }
    res.cycles = static_cast<std::uint64_t>(t_prev + 1);
    res.bundles = p.bundles.size();
    const int out = p.output_buffer();
    if (out >= 0) res.output = mem_[static_cast<std::size_t>(out)];
    return res;
  }

 private:
  struct VReg {
    Format fmt{};
    bool written = false;
    std::vector<std::int64_t> val;
    std::vector<std::uint8_t> valid;
  };
  struct SReg {
    bool written = false;
    FixedWord w{};
  };
  struct Ready {
    std::int64_t at = -1;           // cycle the value can be consumed
    bool acc_chain = false;         // produced by an accumulating reduction
    Opc opc = Opc::add;
  };

  Ready& ready_of(const Reg& r) {
    return r.is_v() ? vready_[static_cast<std::size_t>(r.idx)] : sready_[static_cast<std::size_t>(r.idx)];
  }

  int tree_latency(const MicroOp& op) const {
    return cfg_.reduce_latency(op.lanes * cfg_.tree_lanes(prog_->n) / cfg_.lanes(16));
  }

  int mult_cost(int a_bits, int b_bits) const { return ((a_bits + 15) / 16) * ((b_bits + 15) / 16); }

  int occupancy(const MicroOp& op) {
    const int a_bits = vreg(op.a).fmt.total_bits;
    int per_lane = 0;
    switch (op.opc) {
      case Opc::pwl_eval: per_lane = 2 * mult_cost(a_bits, a_bits); break;
      case Opc::mul:
      case Opc::mul_shift:
      case Opc::mac:
      case Opc::dot: {
        const int b_bits = op.b.is_v() ? vreg(op.b).fmt.total_bits : sreg(op.b).w.fmt.total_bits;
        per_lane = mult_cost(a_bits, b_bits);
        break;
      }
      default: return 0;
    }
    const int m = cfg_.multipliers();
    return (op.lanes * per_lane + m - 1) / m;
  }

  std::int64_t issue_time(const VliwBundle& b, std::int64_t t_prev) {
    std::int64_t t = t_prev + 1;
    std::vector<std::pair<int, int>> local;
    bool dsp = false;
    for (const auto& op : b.ops) {
      auto need = [&](const Reg& r, bool self_acc) {
        if (!r) return;
        const std::pair<int, int> key{static_cast<int>(r.file), r.idx};
        if (std::find(local.begin(), local.end(), key) != local.end()) return;
        const Ready& rd = ready_of(r);
        if (self_acc && rd.acc_chain && rd.opc == op.opc) return;  // forwarded inside the reduction unit
        std::int64_t at = rd.at;
        if (r.is_s() && op.unit() == Unit::vcu && !self_acc && rd.at >= 0) at += cfg_.broadcast_delay(prog_->n);
        t = std::max(t, at);
      };
      for (const Reg* r : {&op.a, &op.b, &op.c, &op.amt}) need(*r, false);
      if (op.accumulate) need(op.dst, true);
      if (op.dst) local.push_back({static_cast<int>(op.dst.file), op.dst.idx});
      dsp = dsp || op.uses_multipliers();
    }
    if (dsp) t = std::max(t, dsp_free_);
    return t;
  }

  void issue(const VliwBundle& b, std::int64_t t) {
    std::int64_t cursor = t;
    for (const auto& op : b.ops) {
      std::int64_t ready = t;
      if (op.uses_multipliers()) {
        cursor = std::max(cursor, dsp_free_);
        const int occ = occupancy(op);
        ready = cursor + occ - 1;
        if (op.opc == Opc::dot) ready += tree_latency(op) - 1;
        cursor += occ;
        dsp_free_ = cursor;
      } else if (op.is_reduction()) {
        ready = t + tree_latency(op) - 1;
      } else if (op.unit() == Unit::scu && op.opc == Opc::mul) {
        ready = t + cfg_.timing.scu_mul_latency - 1;
      } else if (op.unit() == Unit::scu && op.opc == Opc::pwl_eval) {
        ready = t + cfg_.timing.scu_pwl_latency - 1;
      }
      execute(op);
      if (op.dst) ready_of(op.dst) = {ready, op.accumulate || op.is_reduction(), op.opc};
    }
  }

  // ---- functional semantics ----

  VReg& vreg(const Reg& r) {
    VReg& v = vregs_[static_cast<std::size_t>(r.idx)];
    if (!v.written) throw ProgramError("execute: read of unwritten register " + to_string(r));
    return v;
  }
  SReg& sreg(const Reg& r) {
    SReg& s = sregs_[static_cast<std::size_t>(r.idx)];
    if (!s.written) throw ProgramError("execute: read of unwritten register " + to_string(r));
    return s;
  }

  struct Lane {
    FixedWord w;
    bool valid;
  };

  Lane lane(const Reg& r, int i) {
    if (r.is_s()) return {sreg(r).w, true};
    VReg& v = vreg(r);
    const int idx = r.off + i;
    if (idx < 0 || idx >= static_cast<int>(v.val.size()))
      throw ProgramError("execute: lane " + std::to_string(idx) + " outside " + to_string(r) + " holding " +
                         v.fmt.to_string());
    return {{v.val[static_cast<std::size_t>(idx)], v.fmt}, v.valid[static_cast<std::size_t>(idx)] != 0};
  }

  void write_lane(const Reg& r, int i, const FixedWord& w, bool valid) {
    VReg& v = vregs_[static_cast<std::size_t>(r.idx)];
    const int idx = r.off + i;
    if (idx < 0 || idx >= static_cast<int>(v.val.size()))
      throw ProgramError("execute: lane " + std::to_string(idx) + " outside " + to_string(r));
    v.val[static_cast<std::size_t>(idx)] = w.raw;
    v.valid[static_cast<std::size_t>(idx)] = valid ? 1 : 0;
  }

  // Writing a new element format reshapes the register; same-format writes keep other lanes.
  void prepare(const Reg& r, const Format& f) {
    VReg& v = vregs_[static_cast<std::size_t>(r.idx)];
    if (!v.written || v.fmt != f) {
      const auto lanes = static_cast<std::size_t>(cfg_.lanes(f.total_bits));
      v = {f, true, std::vector<std::int64_t>(lanes, 0), std::vector<std::uint8_t>(lanes, 0)};
    }
  }

  int amount(const MicroOp& op) { return op.amt ? op.amt_scale * static_cast<int>(sreg(op.amt).w.raw) : 0; }

  FixedWord scalar_op(const MicroOp& op, const FixedWord& a, const FixedWord& b, const FixedWord& c) {
    switch (op.opc) {
      case Opc::add: return fx_add(a, b, op.out);
      case Opc::sub: return fx_sub(a, b, op.out);
      case Opc::max: return fx_max(a, b);
      case Opc::mul: return fx_mul(a, b, op.out);
      case Opc::mul_shift: return fx_mul_shift(a, b, amount(op), op.out);
      case Opc::mac: return fx_mac(a, b, c, op.out);
      case Opc::pwl_eval: return eval_cpwl(a, table_of(tables_, op.table));
      case Opc::shift: return fx_shift(a, amount(op), op.out);
      case Opc::log2: return {fx_log2_floor(a), Format{16, 0}};
      case Opc::ishr: {
        oplog::record(Op::shift);
        return {a.raw >> op.imm, a.fmt};
      }
      default: throw ProgramError(std::string("execute: ") + to_string(op.opc) + " is not an elementwise op");
    }
  }

  void execute(const MicroOp& op) {
    switch (op.unit()) {
      case Unit::lsu: return execute_lsu(op);
      case Unit::scu: {
        const FixedWord a = sreg(op.a).w;
        const FixedWord b = op.b ? sreg(op.b).w : FixedWord{};
        const FixedWord c = op.c ? sreg(op.c).w : FixedWord{};
        sregs_[static_cast<std::size_t>(op.dst.idx)] = {true, scalar_op(op, a, b, c)};
        return;
      }
      case Unit::vcu: break;
    }
    if (op.is_reduction()) return execute_reduction(op);
    std::vector<std::pair<FixedWord, bool>> out(static_cast<std::size_t>(op.lanes));
    for (int i = 0; i < op.lanes; ++i) {
      const Lane a = lane(op.a, i);
      const Lane b = op.b ? lane(op.b, i) : Lane{{}, true};
      const Lane c = op.c ? lane(op.c, i) : Lane{{}, true};
      if (op.opc == Opc::max) {
        // An empty lane is the identity of max.
        if (a.valid && b.valid) out[static_cast<std::size_t>(i)] = {fx_max(a.w, b.w), true};
        else out[static_cast<std::size_t>(i)] = a.valid ? std::pair{a.w, true} : std::pair{b.w, b.valid};
        continue;
      }
      const bool valid = a.valid && b.valid && c.valid;
      out[static_cast<std::size_t>(i)] = {valid ? scalar_op(op, a.w, b.w, c.w) : FixedWord{0, op.out}, valid};
    }
    const Format f = op.opc == Opc::max ? vreg(op.a).fmt : op.out;
    prepare(op.dst, f);
    for (int i = 0; i < op.lanes; ++i)
      write_lane(op.dst, i, out[static_cast<std::size_t>(i)].first, out[static_cast<std::size_t>(i)].second);
  }

  void execute_reduction(const MicroOp& op) {
    oplog::record(Op::reduce);
    SReg& dst = sregs_[static_cast<std::size_t>(op.dst.idx)];
    if (op.accumulate && !dst.written) throw ProgramError("execute: accumulate into unwritten " + to_string(op.dst));
    if (op.opc == Opc::max_reduce) {
      std::optional<FixedWord> m;
      if (op.accumulate) m = dst.w;
      for (int i = 0; i < op.lanes; ++i) {
        const Lane a = lane(op.a, i);
        if (a.valid) m = m ? fx_max(*m, a.w) : a.w;
      }
      if (!m) throw ProgramError("execute: max reduction over no valid lanes");
      dst = {true, *m};
      return;
    }
    // Sums are exact in a wide intermediate, then saturated once.
    const int f = op.out.frac_bits;
    i128 sum = op.accumulate ? i128{dst.w.raw} << (f - dst.w.fmt.frac_bits) : 0;
    for (int i = 0; i < op.lanes; ++i) {
      const Lane a = lane(op.a, i);
      if (!a.valid) continue;
      FixedWord term = a.w;
      if (op.opc == Opc::dot) {
        const Lane b = lane(op.b, i);
        if (!b.valid) continue;
        term = fx_mul(a.w, b.w, op.out);
      }
      if (term.fmt.frac_bits > f) throw ProgramError("execute: reduction would drop fraction bits");
      sum += i128{term.raw} << (f - term.fmt.frac_bits);
    }
    dst = {true, {fx::saturate(sum, op.out), op.out}};
  }

  void execute_lsu(const MicroOp& op) {
    auto& buf = mem_[static_cast<std::size_t>(op.buffer)];
    const Format bf = prog_->buffers[static_cast<std::size_t>(op.buffer)].fmt;
    if (op.opc == Opc::load) {
      prepare(op.dst, bf);
      for (int i = 0; i < op.lanes; ++i) {
        const std::size_t at = op.addr + static_cast<std::size_t>(i);
        write_lane(op.dst, i, at < buf.size() ? buf[at] : FixedWord{0, bf}, at < buf.size());
      }
      return;
    }
    for (int i = 0; i < op.lanes; ++i) {
      const Lane a = lane(op.a, i);
      const std::size_t at = op.addr + static_cast<std::size_t>(i);
      if (!a.valid || at >= buf.size()) continue;
      if (a.w.fmt != bf) throw ProgramError("execute: store of " + a.w.fmt.to_string() + " into " + bf.to_string());
      buf[at] = a.w;
    }
  }

  NvuConfig cfg_;
  const NonlinearTables& tables_;
  const Microprogram* prog_ = nullptr;
  std::vector<VReg> vregs_;
  std::vector<SReg> sregs_;
  std::vector<Ready> vready_, sready_;
  std::vector<FixedVector> mem_;
  std::int64_t dsp_free_ = 0;
};

inline ExecResult execute(const Microprogram& p, const std::vector<FixedVector>& inputs,
                          const NonlinearTables& tables = default_tables()) {
  NvuMachine m(p.cfg, tables);
  return m.run(p, inputs);
}

// ---- closed-form cycle model -----------------------------------------------------------

// Mirrors the bundle schedule of each expanded program phase by phase.
inline std::uint64_t kernel_cycle_model(Kernel kernel, std::size_t n, const NvuConfig& cfg, bool fused_add = false) {
  cfg.validate();
  if (n == 0) return 0;
  using i64 = std::int64_t;
  const i64 l16 = cfg.lanes(16);
  const i64 h = l16 / 2;
  const i64 v = static_cast<i64>((n + static_cast<std::size_t>(l16) - 1) / static_cast<std::size_t>(l16));
  const i64 m = cfg.multipliers();
  auto occ = [&](i64 lanes, i64 per_lane) { return (lanes * per_lane + m - 1) / m; };
  const i64 bc = cfg.broadcast_delay(n);
  const i64 r16 = cfg.reduce_latency(cfg.tree_lanes(n));
  const i64 r32 = cfg.reduce_latency(cfg.tree_lanes(n) / 2);
  const i64 mul_lat = cfg.timing.scu_mul_latency;
  const i64 pwl_lat = cfg.timing.scu_pwl_latency;
  const i64 pwl16 = occ(l16, 2);

  switch (kernel) {
    case Kernel::vector_add: return static_cast<std::uint64_t>(3 * v);
    case Kernel::gelu:
      // Multiplier-bound at one register per pwl occupancy; the fused bias add costs one fill cycle.
      return static_cast<std::uint64_t>(pwl16 * v + (fused_add ? 1 : 0));
    case Kernel::softmax: {
      const i64 mulsh16 = occ(l16, 2);  // 16-bit by 32-bit
      const i64 t0 = std::max(v + 1, v + r16 - 1 + bc);
      const i64 last_exp = t0 + pwl16 * v - 1;
      const i64 c1 = last_exp + std::max<i64>(1, r16 - 1);
      const i64 c3 = c1 + 2;
      const i64 d0 = std::max({c3 + 1, c3 + pwl_lat - 1 + bc, c1 + bc});
      return static_cast<std::uint64_t>(d0 + mulsh16 * v);
    }
    case Kernel::layernorm: {
      const i64 last_a = fused_add ? 3 * v - 2 : v - 1;     // bundle with the last row-sum reduction
      const i64 end_a = fused_add ? 3 * v - 1 : v - 1;      // last bundle of the pass
      const i64 mean_at = std::max(end_a + 1, last_a + r16 - 1);
      const i64 tb = std::max(mean_at + 1, mean_at + mul_lat - 1 + bc);
      const i64 dot32 = occ(h, 4);
      const i64 last_dot = tb + 2 * dot32 * (v - 1) + dot32;
      const i64 s1 = std::max(last_dot + 1, last_dot + dot32 - 1 + r32 - 1);
      const i64 s2 = std::max(s1 + 1, s1 + mul_lat - 1);
      const i64 s4 = s2 + 2;
      const i64 s6 = s4 + 2;
      const i64 tc = std::max({s6 + 1, s6 + pwl_lat - 1 + bc, s4 + bc});
      const i64 mulsh32 = occ(h, 4);
      const i64 mac = occ(h, 2);
      return static_cast<std::uint64_t>(tc + (2 * mulsh32 + 2 * mac) * v);
    }
  }
  return 0;
}

// Cycles for one workload node: rows of n elements processed back to back.
inline std::uint64_t nvu_rows_cycles(Kernel kernel, std::size_t rows, std::size_t n, const NvuConfig& cfg,
                                     bool fused_add) {
  return static_cast<std::uint64_t>(rows) * kernel_cycle_model(kernel, n, cfg, fused_add);
}

}  // namespace npe
