#pragma once

// BERT encoder computation graph and a two-unit (MMU + NVU) list scheduler.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "npe/fixed_point.hpp"

namespace npe {

struct ModelConfig {
  int L = 12;
  int A = 12;
  int H = 768;
  int seq_len = 128;
  int ff_dim = 3072;

  int head_dim() const { return H / A; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    if (L < 1 || A < 1 || H < 1 || ff_dim < 1) throw ConfigError("model: L, A, H and ff_dim must be positive");
    if (H % A != 0) throw ConfigError("model: H must be divisible by A");
    if (seq_len < 1 || seq_len > 512) throw ConfigError("model: seq_len must be in [1, 512]");
  }
};

inline std::uint64_t matmul_cycles(std::uint64_t n, std::uint64_t m, std::uint64_t k, std::uint64_t mults_per_cycle) {
  if (n == 0 || m == 0 || k == 0 || mults_per_cycle == 0)
    throw std::invalid_argument("matmul_cycles: dimensions and rate must be positive");
  const std::uint64_t work = n * m * k;
  return work / mults_per_cycle + (work % mults_per_cycle != 0 ? 1 : 0);
}

enum class NodeKind { matmul, softmax, layernorm, gelu, add_residual };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::matmul: return "matmul";
    case NodeKind::softmax: return "softmax";
    case NodeKind::layernorm: return "layernorm";
    case NodeKind::gelu: return "gelu";
    case NodeKind::add_residual: return "add_residual";
  }
  return "?";
}

// Which matmul of the encoder a node is; used for ordering and reporting.
enum class MatmulRole { none, q, k, v, qk, sv, wo, ff1, ff2 };

struct Node {
  int id = 0;
  NodeKind kind = NodeKind::matmul;
  MatmulRole role = MatmulRole::none;
  std::uint64_t n = 0, m = 0, k = 0;  // k is 0 for elementwise nodes
  std::vector<int> deps;
  std::optional<int> head;
  int encoder = 0;
  std::string name;

  bool on_mmu() const { return kind == NodeKind::matmul; }
  std::uint64_t multiplies() const { return n * m * k; }
};

struct EncoderNodes {
  std::vector<int> q, k, v, qk, softmax, sv;
  int wo = -1, add_a = -1, ln_a = -1, ff1 = -1, gelu = -1, ff2 = -1, add_b = -1, ln_b = -1;
};

struct WorkloadGraph {
  ModelConfig cfg;
  std::vector<Node> nodes;
  std::vector<EncoderNodes> encoders;

  const Node& operator[](int id) const { return nodes.at(static_cast<std::size_t>(id)); }
};

// L chained encoders. Each encoder: per head Q/K/V projections, QK^T, softmax
// (scale folded in), softmax*V; output projection; residual + LayerNorm A;
// FF1, GELU, FF2; residual + LayerNorm B. Bias adds live inside the consumers.
inline WorkloadGraph build_encoder_graph(const ModelConfig& cfg) {
  cfg.validate();
  WorkloadGraph g;
  g.cfg = cfg;
  const std::uint64_t s = static_cast<std::uint64_t>(cfg.seq_len);
  const std::uint64_t h = static_cast<std::uint64_t>(cfg.H);
  const std::uint64_t d = static_cast<std::uint64_t>(cfg.head_dim());
  const std::uint64_t f = static_cast<std::uint64_t>(cfg.ff_dim);

  auto add = [&](NodeKind kind, MatmulRole role, std::uint64_t n, std::uint64_t m, std::uint64_t k,
                 std::vector<int> deps, std::optional<int> head, int enc, std::string name) {
    const int id = static_cast<int>(g.nodes.size());
    g.nodes.push_back({id, kind, role, n, m, k, std::move(deps), head, enc, std::move(name)});
    return id;
  };

  std::optional<int> input;  // producer of this encoder's X (previous LN B)
  for (int e = 0; e < cfg.L; ++e) {
    EncoderNodes en;
    const std::string p = "e" + std::to_string(e) + ".";
    std::vector<int> x_deps;
    if (input) x_deps.push_back(*input);
    for (int i = 0; i < cfg.A; ++i) {
      const std::string hi = std::to_string(i);
      en.q.push_back(add(NodeKind::matmul, MatmulRole::q, s, d, h, x_deps, i, e, p + "Q" + hi));
      en.k.push_back(add(NodeKind::matmul, MatmulRole::k, s, d, h, x_deps, i, e, p + "K" + hi));
      en.v.push_back(add(NodeKind::matmul, MatmulRole::v, s, d, h, x_deps, i, e, p + "V" + hi));
      en.qk.push_back(add(NodeKind::matmul, MatmulRole::qk, s, s, d, {en.q.back(), en.k.back()}, i, e, p + "QK" + hi));
      en.softmax.push_back(add(NodeKind::softmax, MatmulRole::none, s, s, 0, {en.qk.back()}, i, e, p + "softmax" + hi));
      en.sv.push_back(
          add(NodeKind::matmul, MatmulRole::sv, s, d, s, {en.softmax.back(), en.v.back()}, i, e, p + "SV" + hi));
    }
    en.wo = add(NodeKind::matmul, MatmulRole::wo, s, h, h, en.sv, std::nullopt, e, p + "WO");
    std::vector<int> ra{en.wo};
    if (input) ra.push_back(*input);
    en.add_a = add(NodeKind::add_residual, MatmulRole::none, s, h, 0, ra, std::nullopt, e, p + "residualA");
    en.ln_a = add(NodeKind::layernorm, MatmulRole::none, s, h, 0, {en.add_a}, std::nullopt, e, p + "layernormA");
    en.ff1 = add(NodeKind::matmul, MatmulRole::ff1, s, f, h, {en.ln_a}, std::nullopt, e, p + "FF1");
    en.gelu = add(NodeKind::gelu, MatmulRole::none, s, f, 0, {en.ff1}, std::nullopt, e, p + "gelu");
    en.ff2 = add(NodeKind::matmul, MatmulRole::ff2, s, h, f, {en.gelu}, std::nullopt, e, p + "FF2");
    en.add_b = add(NodeKind::add_residual, MatmulRole::none, s, h, 0, {en.ff2, en.ln_a}, std::nullopt, e, p + "residualB");
    en.ln_b = add(NodeKind::layernorm, MatmulRole::none, s, h, 0, {en.add_b}, std::nullopt, e, p + "layernormB");
    input = en.ln_b;
    g.encoders.push_back(std::move(en));
  }
  return g;
}

enum class Policy { no_overlap, overlap };

inline const char* to_string(Policy p) { return p == Policy::overlap ? "overlap" : "no_overlap"; }

inline Policy parse_policy(const std::string& s) {
  if (s == "overlap") return Policy::overlap;
  if (s == "no_overlap") return Policy::no_overlap;
  throw ConfigError("unknown policy '" + s + "' (expected overlap or no_overlap)");
}

struct ScheduleOptions {
  std::uint64_t mults_per_cycle = 2048;
  // Projection matmuls issued between QK^T of head i and softmax*V of head i:
  // V_i, then Q/K/V of later heads in order. 3 = V_i, Q_{i+1}, K_{i+1}.
  // Only consulted under the overlap policy.
  int overlap_window = 3;
  // Operand bytes moved per cycle; 0 means transfers are fully hidden.
  std::uint64_t memory_bytes_per_cycle = 0;
  std::uint64_t bytes_per_element = 2;
};

// MMU issue order for one encoder. Under overlap, softmax_i runs while the
// window's projections execute; otherwise every projection of head i runs
// before its QK^T.
inline std::vector<int> mmu_order(const WorkloadGraph& g, int e, Policy policy, int window) {
  const EncoderNodes& en = g.encoders.at(static_cast<std::size_t>(e));
  const int a = static_cast<int>(en.q.size());
  std::vector<int> proj;
  for (int i = 0; i < a; ++i) {
    proj.push_back(en.q[i]);
    proj.push_back(en.k[i]);
    proj.push_back(en.v[i]);
  }
  const int w = policy == Policy::overlap ? std::max(0, window) : 0;
  std::vector<int> order;
  std::size_t next = 0;
  auto issue_through = [&](std::size_t idx) {
    while (next <= idx && next < proj.size()) order.push_back(proj[next++]);
  };
  for (int i = 0; i < a; ++i) {
    const std::size_t vi = static_cast<std::size_t>(3 * i + 2);
    issue_through(static_cast<std::size_t>(3 * i + 1));
    if (w == 0) issue_through(vi);
    order.push_back(en.qk[i]);
    if (w > 0) issue_through(std::min(proj.size() - 1, next + static_cast<std::size_t>(w) - 1));
    issue_through(vi);
    order.push_back(en.sv[i]);
  }
  for (int id : {en.wo, en.ff1, en.ff2}) order.push_back(id);
  return order;
}

struct TimelineEntry {
  int node = 0;
  bool mmu = true;
  std::uint64_t start = 0;
  std::uint64_t end = 0;
};

struct Schedule {
  std::vector<TimelineEntry> entries;  // indexed by node id
  std::uint64_t total_cycles = 0;
  std::uint64_t mmu_busy_cycles = 0;
  std::uint64_t stall_cycles = 0;
  std::vector<std::uint64_t> stall_by_node;  // MMU idle time attributed to the blocking NVU node

  std::uint64_t stall_by_kind(const WorkloadGraph& g, NodeKind kind) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < stall_by_node.size(); ++i)
      if (g.nodes[i].kind == kind) s += stall_by_node[i];
    return s;
  }
};

using NvuCostFn = std::function<std::uint64_t(const Node&)>;

inline std::uint64_t mmu_node_cycles(const Node& n, const ScheduleOptions& o) {
  std::uint64_t c = matmul_cycles(n.n, n.m, n.k, o.mults_per_cycle);
  if (o.memory_bytes_per_cycle > 0) {
    const std::uint64_t bytes = (n.n * n.k + n.k * n.m + n.n * n.m) * o.bytes_per_element;
    c = std::max(c, (bytes + o.memory_bytes_per_cycle - 1) / o.memory_bytes_per_cycle);
  }
  return c;
}

// Two-unit list schedule. MMU nodes run in mmu_order; NVU nodes run in
// program order on the single NVU. A matmul starts when the MMU is free and
// all its inputs are complete. Under overlap each NVU node streams behind its
// producer (it may start with the producer and finishes no earlier than it)
// while the MMU continues with independent work. Under no_overlap the units
// never run concurrently: an NVU node starts after its producer ends and the
// MMU waits for every NVU node issued before it.
inline Schedule schedule(const WorkloadGraph& g, const NvuCostFn& nvu_cost, Policy policy,
                         const ScheduleOptions& o = {}) {
  const std::size_t n = g.nodes.size();
  for (const Node& node : g.nodes)
    for (int d : node.deps)
      if (d < 0 || d >= node.id) throw std::logic_error("schedule: graph is not in topological order (cycle?)");
  if (!nvu_cost) throw std::invalid_argument("schedule: missing NVU cost function");

  Schedule s;
  s.entries.resize(n);
  s.stall_by_node.assign(n, 0);
  std::vector<bool> done(n, false);
  std::uint64_t mmu_free = 0, nvu_free = 0;
  int last_nvu = -1;  // most recently issued NVU node, for no_overlap blocking

  auto place_nvu = [&](int id) {
    const Node& node = g.nodes[static_cast<std::size_t>(id)];
    std::uint64_t start = nvu_free, floor_end = 0;
    for (int d : node.deps) {
      const auto& p = s.entries[static_cast<std::size_t>(d)];
      start = std::max(start, policy == Policy::overlap ? p.start : p.end);
      floor_end = std::max(floor_end, p.end);
    }
    const std::uint64_t cost = nvu_cost(node);
    const std::uint64_t end = std::max(floor_end, start + cost);
    s.entries[static_cast<std::size_t>(id)] = {id, false, start, end};
    // Zero-cost nodes are folded into their consumer and never hold the NVU.
    if (cost > 0) nvu_free = end;
    done[static_cast<std::size_t>(id)] = true;
    last_nvu = id;
  };

  // NVU nodes issue in program order as soon as all their inputs are placed.
  std::vector<int> nvu_nodes;
  for (const Node& node : g.nodes)
    if (!node.on_mmu()) nvu_nodes.push_back(node.id);
  std::size_t nvu_next = 0;
  auto drain_nvu = [&] {
    while (nvu_next < nvu_nodes.size()) {
      const Node& node = g.nodes[static_cast<std::size_t>(nvu_nodes[nvu_next])];
      for (int d : node.deps)
        if (!done[static_cast<std::size_t>(d)]) return;
      place_nvu(node.id);
      ++nvu_next;
    }
  };

  for (int e = 0; e < static_cast<int>(g.encoders.size()); ++e) {
    for (int id : mmu_order(g, e, policy, o.overlap_window)) {
      drain_nvu();
      const Node& node = g.nodes[static_cast<std::size_t>(id)];
      std::uint64_t ready = mmu_free;
      for (int d : node.deps)
        if (g.nodes[static_cast<std::size_t>(d)].on_mmu()) ready = std::max(ready, s.entries[static_cast<std::size_t>(d)].end);
      std::uint64_t start = ready;
      int blocker = -1;
      auto wait_for = [&](int d) {
        if (!done[static_cast<std::size_t>(d)]) throw std::logic_error("schedule: dependency not yet scheduled");
        const std::uint64_t end = s.entries[static_cast<std::size_t>(d)].end;
        if (end > start) {
          start = end;
          blocker = d;
        }
      };
      for (int d : node.deps)
        if (!g.nodes[static_cast<std::size_t>(d)].on_mmu()) wait_for(d);
      if (policy == Policy::no_overlap && last_nvu >= 0) wait_for(last_nvu);
      if (blocker >= 0) s.stall_by_node[static_cast<std::size_t>(blocker)] += start - ready;
      const std::uint64_t c = mmu_node_cycles(node, o);
      s.entries[static_cast<std::size_t>(id)] = {id, true, start, start + c};
      s.mmu_busy_cycles += c;
      mmu_free = start + c;
      done[static_cast<std::size_t>(id)] = true;
    }
    drain_nvu();
  }

  // Trailing NVU work past the last matmul also holds up the next inference.
  std::uint64_t total = mmu_free;
  int tail = -1;
  for (std::size_t i = 0; i < n; ++i)
    if (s.entries[i].end > total) {
      total = s.entries[i].end;
      tail = static_cast<int>(i);
    }
  if (tail >= 0) s.stall_by_node[static_cast<std::size_t>(tail)] += total - mmu_free;
  s.total_cycles = total;
  for (auto v : s.stall_by_node) s.stall_cycles += v;
  return s;
}

inline void write_schedule_csv(std::ostream& os, const WorkloadGraph& g, const Schedule& s) {
  os << "node,unit,start,end\n";
  std::vector<const TimelineEntry*> order;
  for (const auto& e : s.entries) order.push_back(&e);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->start < b->start; });
  for (const auto* e : order)
    os << g.nodes[static_cast<std::size_t>(e->node)].name << ',' << (e->mmu ? "MMU" : "NVU") << ',' << e->start << ','
       << e->end << '\n';
}

}  // namespace npe
