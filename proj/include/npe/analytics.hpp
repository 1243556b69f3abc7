#pragma once

// Throughput requirements of the nonlinearities against their matmul cycle
// budgets, and end-to-end latency/overhead of the scheduled encoder stack.

#include <boost/rational.hpp>

#include <cstdint>
#include <future>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "npe/io.hpp"
#include "npe/mmu.hpp"
#include "npe/nvu.hpp"
#include "npe/workload.hpp"

namespace npe {

using Rational = boost::rational<std::int64_t>;

inline double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

inline std::string to_string(const Rational& r) {
  if (r.denominator() == 1) return std::to_string(r.numerator());
  return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

struct RequirementRow {
  std::string nonlinearity;  // softmax, layernorm_a, gelu, layernorm_b
  std::uint64_t n = 0, m = 0;
  Rational cycle_budget;         // per instance (per head for softmax)
  Rational required_throughput;  // elements per cycle = N*M / budget
  Rational pct_overall_cycles;   // instances * budget / encoder MMU cycles, in percent
};

inline std::uint64_t encoder_mmu_cycles(const ModelConfig& cfg, std::uint64_t mults_per_cycle) {
  ModelConfig one = cfg;
  one.L = 1;
  const WorkloadGraph g = build_encoder_graph(one);
  std::uint64_t total = 0;
  for (const Node& n : g.nodes)
    if (n.on_mmu()) total += matmul_cycles(n.n, n.m, n.k, mults_per_cycle);
  return total;
}

namespace detail {
inline RequirementRow requirement(std::string name, std::uint64_t n, std::uint64_t m, Rational budget,
                                  std::int64_t instances, std::uint64_t encoder_cycles) {
  const Rational elems(static_cast<std::int64_t>(n * m));
  return {std::move(name), n, m, budget, elems / budget,
          Rational(100) * budget * instances / static_cast<std::int64_t>(encoder_cycles)};
}
}  // namespace detail

// Each nonlinearity's budget is the matmul that produces its input.
inline std::vector<RequirementRow> requirements_table(const ModelConfig& cfg, std::uint64_t mults_per_cycle) {
  cfg.validate();
  const std::uint64_t s = static_cast<std::uint64_t>(cfg.seq_len), h = static_cast<std::uint64_t>(cfg.H),
                      d = static_cast<std::uint64_t>(cfg.head_dim()), f = static_cast<std::uint64_t>(cfg.ff_dim);
  const std::uint64_t enc = encoder_mmu_cycles(cfg, mults_per_cycle);
  auto budget = [&](std::uint64_t n, std::uint64_t m, std::uint64_t k) {
    return Rational(static_cast<std::int64_t>(matmul_cycles(n, m, k, mults_per_cycle)));
  };
  return {
      detail::requirement("softmax", s, s, budget(s, s, d), cfg.A, enc),
      detail::requirement("layernorm_a", s, h, budget(s, h, h), 1, enc),
      detail::requirement("gelu", s, f, budget(s, f, h), 1, enc),
      detail::requirement("layernorm_b", s, h, budget(s, h, f), 1, enc),
  };
}

// MMU cycles available to softmax of each head under the overlap schedule:
// its own QK^T plus every matmul issued between QK^T and softmax*V.
inline std::vector<std::uint64_t> softmax_windows(const ModelConfig& cfg, std::uint64_t mults_per_cycle,
                                                  int overlap_window) {
  ModelConfig one = cfg;
  one.L = 1;
  const WorkloadGraph g = build_encoder_graph(one);
  const auto order = mmu_order(g, 0, overlap_window > 0 ? Policy::overlap : Policy::no_overlap, overlap_window);
  std::vector<std::uint64_t> out;
  const EncoderNodes& en = g.encoders[0];
  for (std::size_t i = 0; i < en.qk.size(); ++i) {
    const auto qk = std::find(order.begin(), order.end(), en.qk[i]);
    const auto sv = std::find(order.begin(), order.end(), en.sv[i]);
    std::uint64_t c = 0;
    for (auto it = qk; it != sv; ++it) {
      const Node& n = g[*it];
      c += matmul_cycles(n.n, n.m, n.k, mults_per_cycle);
    }
    out.push_back(c);
  }
  return out;
}

// Softmax budget widened by the overlap window, averaged over heads;
// layernorm and GELU remain rate matched to their producers.
inline std::vector<RequirementRow> overlapped_requirements(const ModelConfig& cfg, std::uint64_t mults_per_cycle,
                                                           int overlap_window = ScheduleOptions{}.overlap_window) {
  if (overlap_window < 0) throw ConfigError("overlap_window must be non-negative");
  auto rows = requirements_table(cfg, mults_per_cycle);
  std::int64_t total = 0;
  for (auto c : softmax_windows(cfg, mults_per_cycle, overlap_window)) total += static_cast<std::int64_t>(c);
  const std::uint64_t enc = encoder_mmu_cycles(cfg, mults_per_cycle);
  const auto& sm = rows[0];
  rows[0] = detail::requirement("softmax", sm.n, sm.m, Rational(total, cfg.A), cfg.A, enc);
  return rows;
}

// ---- NVU throughput table ------------------------------------------------------

struct NvuThroughputRow {
  int vrwidth_bits = 0;
  std::string kernel;
  std::uint64_t n = 0;
  std::uint64_t cycles = 0;
  double elements_per_cycle = 0;
};

inline std::vector<NvuThroughputRow> nvu_throughput_table(std::size_t n = 512, const NvuTiming& timing = {}) {
  std::vector<NvuThroughputRow> rows;
  for (int w : {256, 512, 1024, 2048}) {
    NvuConfig c;
    c.vrwidth_bits = w;
    c.timing = timing;
    for (Kernel k : {Kernel::softmax, Kernel::layernorm, Kernel::gelu}) {
      const auto cyc = kernel_cycle_model(k, n, c);
      rows.push_back({w, to_string(k), n, cyc, static_cast<double>(n) / static_cast<double>(cyc)});
    }
  }
  return rows;
}

// ---- latency ---------------------------------------------------------------------

inline constexpr double kDefaultClockHz = 2e8;

// NVU cost of one workload node: each row of the node is one kernel call.
// Residual adds are fused into layer normalization and bias adds into GELU.
inline NvuCostFn nvu_cost_function(const NvuConfig& nvu) {
  auto cache = std::make_shared<std::map<std::pair<int, std::uint64_t>, std::uint64_t>>();
  return [nvu, cache](const Node& node) -> std::uint64_t {
    Kernel k;
    switch (node.kind) {
      case NodeKind::softmax: k = Kernel::softmax; break;
      case NodeKind::layernorm: k = Kernel::layernorm; break;
      case NodeKind::gelu: k = Kernel::gelu; break;
      case NodeKind::add_residual: return 0;
      default: throw std::logic_error("nvu cost requested for a matmul");
    }
    const auto key = std::pair{static_cast<int>(k), node.m};
    auto it = cache->find(key);
    if (it == cache->end()) {
      const bool fused = k != Kernel::softmax;
      it = cache->emplace(key, kernel_cycle_model(k, static_cast<std::size_t>(node.m), nvu, fused)).first;
    }
    return node.n * it->second;
  };
}

struct LatencyReport {
  int seq_len = 0;
  std::string precision;
  int vrwidth_bits = 0;
  std::string policy;
  std::uint64_t total_cycles = 0;
  std::uint64_t mmu_cycles = 0;
  std::uint64_t stall_cycles = 0;
  std::uint64_t stall_softmax = 0;
  std::uint64_t stall_layernorm = 0;
  std::uint64_t stall_gelu = 0;
  std::uint64_t baseline_cycles = 0;  // same setup with NVU-2048
  double clock_hz = kDefaultClockHz;
  double latency_ms = 0;
  double overhead_pct = 0;
  double inferences_per_second = 0;
};

inline Schedule schedule_model(const ModelConfig& cfg, const MmuConfig& mmu, const NvuConfig& nvu, Policy policy,
                               int overlap_window = ScheduleOptions{}.overlap_window) {
  const WorkloadGraph g = build_encoder_graph(cfg);
  ScheduleOptions o;
  o.mults_per_cycle = mmu.mults_per_cycle();
  o.overlap_window = overlap_window;
  return schedule(g, nvu_cost_function(nvu), policy, o);
}

inline LatencyReport latency_report(const ModelConfig& cfg, const MmuConfig& mmu, const NvuConfig& nvu, Policy policy,
                                    double clock_hz = kDefaultClockHz,
                                    int overlap_window = ScheduleOptions{}.overlap_window) {
  cfg.validate();
  mmu.validate();
  nvu.validate();
  if (!(clock_hz > 0)) throw ConfigError("clock_hz must be positive");
  const WorkloadGraph g = build_encoder_graph(cfg);
  ScheduleOptions o;
  o.mults_per_cycle = mmu.mults_per_cycle();
  o.overlap_window = overlap_window;
  const Schedule s = schedule(g, nvu_cost_function(nvu), policy, o);
  NvuConfig ideal = nvu;
  ideal.vrwidth_bits = 2048;
  const std::uint64_t base =
      nvu.vrwidth_bits == 2048 ? s.total_cycles : schedule(g, nvu_cost_function(ideal), policy, o).total_cycles;

  LatencyReport r;
  r.seq_len = cfg.seq_len;
  r.precision = to_string(mmu.precision);
  r.vrwidth_bits = nvu.vrwidth_bits;
  r.policy = to_string(policy);
  r.total_cycles = s.total_cycles;
  r.mmu_cycles = s.mmu_busy_cycles;
  r.stall_cycles = s.stall_cycles;
  r.stall_softmax = s.stall_by_kind(g, NodeKind::softmax);
  r.stall_layernorm = s.stall_by_kind(g, NodeKind::layernorm) + s.stall_by_kind(g, NodeKind::add_residual);
  r.stall_gelu = s.stall_by_kind(g, NodeKind::gelu);
  r.baseline_cycles = base;
  r.clock_hz = clock_hz;
  r.latency_ms = static_cast<double>(s.total_cycles) / clock_hz * 1000.0;
  r.overhead_pct =
      100.0 * (static_cast<double>(s.total_cycles) - static_cast<double>(base)) / static_cast<double>(base);
  r.inferences_per_second = clock_hz / static_cast<double>(s.total_cycles);
  return r;
}

struct SweepPoint {
  int seq_len;
  Precision precision;
  int vrwidth_bits;
};

// Independent configurations evaluated concurrently; results keep input order.
inline std::vector<LatencyReport> latency_sweep(const ModelConfig& base, const MmuConfig& mmu, const NvuConfig& nvu,
                                                Policy policy, double clock_hz, const std::vector<SweepPoint>& points,
                                                int overlap_window = ScheduleOptions{}.overlap_window) {
  std::vector<std::future<LatencyReport>> jobs;
  for (const auto& p : points) {
    ModelConfig c = base;
    c.seq_len = p.seq_len;
    MmuConfig m = mmu;
    m.precision = p.precision;
    NvuConfig v = nvu;
    v.vrwidth_bits = p.vrwidth_bits;
    jobs.push_back(std::async(std::launch::async, [=] { return latency_report(c, m, v, policy, clock_hz, overlap_window); }));
  }
  std::vector<LatencyReport> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

// ---- report emission ---------------------------------------------------------------

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + s + "' (expected csv or json)");
}

inline const char* extension(ReportFormat f) { return f == ReportFormat::csv ? ".csv" : ".json"; }

inline std::string emit_requirements(const std::vector<RequirementRow>& rows, ReportFormat f) {
  if (f == ReportFormat::csv) {
    std::ostringstream os;
    os << "nonlinearity,n,m,cycle_budget,required_throughput,required_throughput_exact,pct_overall_cycles\n";
    for (const auto& r : rows)
      os << r.nonlinearity << ',' << r.n << ',' << r.m << ',' << format_number(to_double(r.cycle_budget)) << ','
         << format_number(to_double(r.required_throughput)) << ',' << to_string(r.required_throughput) << ','
         << format_number(to_double(r.pct_overall_cycles)) << '\n';
    return os.str();
  }
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    j.push_back({{"nonlinearity", r.nonlinearity},
                 {"n", r.n},
                 {"m", r.m},
                 {"cycle_budget", to_double(r.cycle_budget)},
                 {"required_throughput", to_double(r.required_throughput)},
                 {"required_throughput_exact", to_string(r.required_throughput)},
                 {"pct_overall_cycles", to_double(r.pct_overall_cycles)}});
  return j.dump(2) + "\n";
}

inline std::string emit_latency(const std::vector<LatencyReport>& rows, ReportFormat f) {
  if (f == ReportFormat::csv) {
    std::ostringstream os;
    os << "seq_len,precision,vrwidth_bits,policy,total_cycles,mmu_cycles,stall_cycles,stall_softmax,stall_layernorm,"
          "stall_gelu,baseline_cycles,clock_hz,latency_ms,overhead_pct,inferences_per_second\n";
    for (const auto& r : rows)
      os << r.seq_len << ',' << r.precision << ',' << r.vrwidth_bits << ',' << r.policy << ',' << r.total_cycles << ','
         << r.mmu_cycles << ',' << r.stall_cycles << ',' << r.stall_softmax << ',' << r.stall_layernorm << ','
         << r.stall_gelu << ',' << r.baseline_cycles << ',' << format_number(r.clock_hz) << ','
         << format_fixed(r.latency_ms, 6) << ',' << format_fixed(r.overhead_pct, 6) << ','
         << format_fixed(r.inferences_per_second, 6) << '\n';
    return os.str();
  }
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    j.push_back({{"seq_len", r.seq_len},
                 {"precision", r.precision},
                 {"vrwidth_bits", r.vrwidth_bits},
                 {"policy", r.policy},
                 {"total_cycles", r.total_cycles},
                 {"mmu_cycles", r.mmu_cycles},
                 {"stall_cycles", r.stall_cycles},
                 {"stall_softmax", r.stall_softmax},
                 {"stall_layernorm", r.stall_layernorm},
                 {"stall_gelu", r.stall_gelu},
                 {"baseline_cycles", r.baseline_cycles},
                 {"clock_hz", r.clock_hz},
                 {"latency_ms", r.latency_ms},
                 {"overhead_pct", r.overhead_pct},
                 {"inferences_per_second", r.inferences_per_second}});
  return j.dump(2) + "\n";
}

inline std::string emit_nvu_table(const std::vector<NvuThroughputRow>& rows, ReportFormat f) {
  if (f == ReportFormat::csv) {
    std::ostringstream os;
    os << "vrwidth_bits,kernel,n,cycles,elements_per_cycle\n";
    for (const auto& r : rows)
      os << r.vrwidth_bits << ',' << r.kernel << ',' << r.n << ',' << r.cycles << ','
         << format_fixed(r.elements_per_cycle, 6) << '\n';
    return os.str();
  }
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    j.push_back({{"vrwidth_bits", r.vrwidth_bits},
                 {"kernel", r.kernel},
                 {"n", r.n},
                 {"cycles", r.cycles},
                 {"elements_per_cycle", r.elements_per_cycle}});
  return j.dump(2) + "\n";
}

// Reads back a CSV report into rows of named fields.
inline std::vector<std::map<std::string, std::string>> parse_csv(const std::string& text) {
  std::vector<std::map<std::string, std::string>> rows;
  std::istringstream is(text);
  std::string line;
  std::vector<std::string> header;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (header.empty()) {
      header = std::move(cells);
      continue;
    }
    if (cells.size() != header.size()) throw std::runtime_error("csv: row width differs from header");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace npe
