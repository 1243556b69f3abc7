#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "npe/analytics.hpp"

using namespace npe;

namespace {

ModelConfig bert(int seq) {
  ModelConfig c;
  c.seq_len = seq;
  return c;
}

MmuConfig mmu(Precision p) {
  MmuConfig m;
  m.precision = p;
  return m;
}

NvuConfig nvu(int w) {
  NvuConfig c;
  c.vrwidth_bits = w;
  return c;
}

const RequirementRow& row(const std::vector<RequirementRow>& rows, const std::string& name) {
  for (const auto& r : rows)
    if (r.nonlinearity == name) return r;
  throw std::out_of_range(name);
}

}  // namespace

TEST(Requirements, SeqLen512TableIsExact) {
  const auto rows = requirements_table(bert(512), 2048);
  ASSERT_EQ(rows.size(), 4u);
  struct Want {
    const char* name;
    std::uint64_t n, m;
    Rational budget, tput, pct;
  };
  const Want want[] = {
      {"softmax", 512, 512, Rational(8192), Rational(32), Rational(5)},
      {"layernorm_a", 512, 768, Rational(147456), Rational(8, 3), Rational(15, 2)},
      {"gelu", 512, 3072, Rational(589824), Rational(8, 3), Rational(30)},
      {"layernorm_b", 512, 768, Rational(589824), Rational(2, 3), Rational(30)},
  };
  for (const auto& w : want) {
    const auto& r = row(rows, w.name);
    EXPECT_EQ(r.n, w.n) << w.name;
    EXPECT_EQ(r.m, w.m) << w.name;
    EXPECT_EQ(r.cycle_budget, w.budget) << w.name;
    EXPECT_EQ(r.required_throughput, w.tput) << w.name;
    EXPECT_EQ(r.pct_overall_cycles, w.pct) << w.name;
  }
}

TEST(Requirements, OnlySoftmaxDependsOnSequenceLength) {
  const auto a = requirements_table(bert(64), 2048), b = requirements_table(bert(384), 2048);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_EQ(a[i].required_throughput, b[i].required_throughput);
  EXPECT_NE(a[0].cycle_budget, b[0].cycle_budget);
  EXPECT_NE(a[0].pct_overall_cycles, b[0].pct_overall_cycles);
  // softmax's own budget is s*s*d / mults, so without overlap its requirement is mults / d at any length
  EXPECT_EQ(a[0].required_throughput, Rational(2048, 64));
  EXPECT_EQ(b[0].required_throughput, Rational(2048, 64));
  const auto oa = overlapped_requirements(bert(64), 2048, 3), ob = overlapped_requirements(bert(384), 2048, 3);
  EXPECT_NE(oa[0].required_throughput, ob[0].required_throughput);
  for (std::size_t i = 1; i < oa.size(); ++i) EXPECT_EQ(oa[i].required_throughput, ob[i].required_throughput);
}

TEST(Requirements, OverlapRelaxesSoftmaxNearTargetValues) {
  const std::pair<int, double> target[] = {{64, 0.92}, {128, 1.79}, {256, 3.39}, {512, 6.29}};
  double prev = 0;
  for (const auto& [s, want] : target) {
    const auto rows = overlapped_requirements(bert(s), 2048, 3);
    const double got = to_double(row(rows, "softmax").required_throughput);
    EXPECT_NEAR(got, want, 0.15 * want) << "seq " << s;
    if (prev > 0) {
      EXPECT_GT(got / prev, 1.7);
      EXPECT_LT(got / prev, 2.1);
    }
    prev = got;
    const auto plain = requirements_table(bert(s), 2048);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].required_throughput, plain[i].required_throughput);
  }
  const double relax = to_double(row(requirements_table(bert(512), 2048), "softmax").required_throughput) /
                       to_double(row(overlapped_requirements(bert(512), 2048, 3), "softmax").required_throughput);
  EXPECT_GT(relax, 4.0);
}

TEST(Requirements, ZeroWindowCollapsesToPlainTable) {
  for (int s : {1, 64, 512}) {
    const auto a = overlapped_requirements(bert(s), 2048, 0), b = requirements_table(bert(s), 2048);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].cycle_budget, b[i].cycle_budget);
      EXPECT_EQ(a[i].required_throughput, b[i].required_throughput);
      EXPECT_EQ(a[i].pct_overall_cycles, b[i].pct_overall_cycles);
    }
  }
  EXPECT_THROW(overlapped_requirements(bert(64), 2048, -1), ConfigError);
}

TEST(NvuTable, MatchesCycleModel) {
  const auto rows = nvu_throughput_table(512);
  ASSERT_EQ(rows.size(), 12u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.cycles, kernel_cycle_model(parse_kernel(r.kernel), 512, nvu(r.vrwidth_bits)));
    EXPECT_DOUBLE_EQ(r.elements_per_cycle, 512.0 / static_cast<double>(r.cycles));
  }
}

TEST(Latency, SixteenBitOverheadsAgainstWidestNvu) {
  // small sequence lengths
  const double o1024 = latency_report(bert(64), mmu(Precision::int16), nvu(1024), Policy::overlap).overhead_pct;
  const double o512 = latency_report(bert(64), mmu(Precision::int16), nvu(512), Policy::overlap).overhead_pct;
  const double o256 = latency_report(bert(64), mmu(Precision::int16), nvu(256), Policy::overlap).overhead_pct;
  EXPECT_LT(o1024, 1.0);
  EXPECT_NEAR(o512, 10.0, 5.0);
  EXPECT_NEAR(o256, 30.0, 10.0);
  EXPECT_NEAR(latency_report(bert(256), mmu(Precision::int16), nvu(256), Policy::overlap).overhead_pct, 53.0, 15.0);
  EXPECT_NEAR(latency_report(bert(512), mmu(Precision::int16), nvu(256), Policy::overlap).overhead_pct, 97.0, 15.0);
}

TEST(Latency, GeluNeverStallsTheSixteenBitMmu) {
  for (int s : {64, 128, 256, 512})
    for (int w : {256, 512, 1024, 2048}) {
      const auto r = latency_report(bert(s), mmu(Precision::int16), nvu(w), Policy::overlap);
      EXPECT_EQ(r.stall_gelu, 0u) << s << "/" << w;
      EXPECT_EQ(r.stall_cycles, r.stall_softmax + r.stall_layernorm + r.stall_gelu);
    }
}

TEST(Latency, ReportArithmetic) {
  const auto r = latency_report(bert(64), mmu(Precision::int8), nvu(2048), Policy::overlap, 1e8);
  EXPECT_EQ(r.baseline_cycles, r.total_cycles);
  EXPECT_EQ(r.overhead_pct, 0.0);
  EXPECT_EQ(r.total_cycles, r.mmu_cycles + r.stall_cycles);
  EXPECT_DOUBLE_EQ(r.latency_ms, static_cast<double>(r.total_cycles) / 1e5);
  EXPECT_DOUBLE_EQ(r.inferences_per_second, 1e8 / static_cast<double>(r.total_cycles));
  EXPECT_EQ(r.precision, "int8");
  EXPECT_THROW(latency_report(bert(64), mmu(Precision::int8), nvu(2048), Policy::overlap, 0.0), ConfigError);
}

TEST(Latency, EightBitMmuHalvesMatmulTime) {
  const auto a = latency_report(bert(128), mmu(Precision::int8), nvu(1024), Policy::overlap);
  const auto b = latency_report(bert(128), mmu(Precision::int16), nvu(1024), Policy::overlap);
  EXPECT_EQ(2 * a.mmu_cycles, b.mmu_cycles);
  EXPECT_LT(latency_report(bert(64), mmu(Precision::int8), nvu(1024), Policy::overlap).latency_ms, 10.0);
}

TEST(Latency, OverlapNeverHurts) {
  for (int w : {256, 1024}) {
    const auto a = latency_report(bert(256), mmu(Precision::int16), nvu(w), Policy::overlap);
    const auto b = latency_report(bert(256), mmu(Precision::int16), nvu(w), Policy::no_overlap);
    EXPECT_LE(a.total_cycles, b.total_cycles);
    EXPECT_EQ(a.mmu_cycles, b.mmu_cycles);
  }
}

TEST(Latency, SweepKeepsOrderAndMatchesSingleRuns) {
  const std::vector<SweepPoint> pts = {{64, Precision::int16, 512}, {128, Precision::int8, 2048}, {64, Precision::int8, 256}};
  const auto rows = latency_sweep(bert(128), mmu(Precision::int16), nvu(1024), Policy::overlap, kDefaultClockHz, pts);
  ASSERT_EQ(rows.size(), pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto one = latency_report(bert(pts[i].seq_len), mmu(pts[i].precision), nvu(pts[i].vrwidth_bits), Policy::overlap);
    EXPECT_EQ(rows[i].total_cycles, one.total_cycles);
    EXPECT_EQ(rows[i].seq_len, pts[i].seq_len);
    EXPECT_EQ(rows[i].vrwidth_bits, pts[i].vrwidth_bits);
  }
}

TEST(Emit, CsvAndJsonCarryTheSameRows) {
  const auto req = requirements_table(bert(512), 2048);
  const auto csv = parse_csv(emit_requirements(req, ReportFormat::csv));
  const auto json = nlohmann::json::parse(emit_requirements(req, ReportFormat::json));
  ASSERT_EQ(csv.size(), req.size());
  ASSERT_EQ(json.size(), req.size());
  for (std::size_t i = 0; i < req.size(); ++i) {
    EXPECT_EQ(csv[i].at("nonlinearity"), req[i].nonlinearity);
    EXPECT_EQ(csv[i].at("required_throughput_exact"), to_string(req[i].required_throughput));
    EXPECT_EQ(json[i]["nonlinearity"], req[i].nonlinearity);
    EXPECT_DOUBLE_EQ(std::stod(csv[i].at("pct_overall_cycles")), json[i]["pct_overall_cycles"].get<double>());
  }
  EXPECT_EQ(csv[1].at("required_throughput_exact"), "8/3");

  const auto lat = std::vector<LatencyReport>{latency_report(bert(64), mmu(Precision::int8), nvu(512), Policy::overlap)};
  const auto lc = parse_csv(emit_latency(lat, ReportFormat::csv));
  const auto lj = nlohmann::json::parse(emit_latency(lat, ReportFormat::json));
  ASSERT_EQ(lc.size(), 1u);
  EXPECT_EQ(std::stoull(lc[0].at("total_cycles")), lat[0].total_cycles);
  EXPECT_EQ(lj[0]["total_cycles"].get<std::uint64_t>(), lat[0].total_cycles);
  EXPECT_NEAR(std::stod(lc[0].at("latency_ms")), lat[0].latency_ms, 1e-6);
  EXPECT_EQ(lc[0].size(), lj[0].size());

  EXPECT_THROW(parse_report_format("xml"), ConfigError);
  EXPECT_THROW(parse_csv("a,b\n1\n"), std::runtime_error);
}
