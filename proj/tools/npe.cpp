// npe: batch front-end for table generation, simulation, sweeps and the
// accuracy harness. Exit codes: 0 ok, 1 check failure, 2 usage/config error.

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "npe/analytics.hpp"
#include "npe/config.hpp"
#include "npe/experiment.hpp"
#include "npe/pwl.hpp"

namespace fs = std::filesystem;
using namespace npe;

namespace {

constexpr int kOk = 0, kCheckFailed = 1, kUsage = 2;

struct Common {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string format;  // empty: write both
};

struct Outputs {
  fs::path dir;
  std::vector<std::string> written;

  void write(const std::string& name, const std::string& content) {
    write_file_atomic(dir / name, content);
    written.push_back(name);
  }
  // name without extension, one file per requested format
  template <typename Emit>
  void report(const std::string& stem, const std::string& format, Emit&& emit) {
    for (auto f : formats(format)) write(stem + extension(f), emit(f));
  }
  static std::vector<ReportFormat> formats(const std::string& format) {
    if (format.empty()) return {ReportFormat::csv, ReportFormat::json};
    return {parse_report_format(format)};
  }
  void summary(const std::string& command, bool pass, nlohmann::ordered_json extra = {}) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["pass"] = pass;
    for (auto& [k, v] : extra.items()) j[k] = v;
    j["outputs"] = written;
    write_file_atomic(dir / (command + "_summary.json"), j.dump(2) + "\n");
  }
};

// Usage and config failures still leave a summary, in --out-dir or the default directory.
void failure_summary(const std::string& dir, const std::string& command, const std::string& message) {
  try {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["pass"] = false;
    j["error"] = message;
    j["outputs"] = nlohmann::ordered_json::array();
    write_file_atomic(fs::path(dir.empty() ? ExperimentConfig{}.out_dir : dir) / (command + "_summary.json"),
                      j.dump(2) + "\n");
  } catch (const std::exception&) {
    // the directory itself may be the problem; the exit code still reports it
  }
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_config = true) {
  if (with_config) app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--out-dir", c.out_dir, "output directory (overrides the config)");
  app->add_option("--seed", c.seed, "random seed (overrides the config)");
  app->add_option("--format", c.format, "report format; both when omitted")->check(CLI::IsMember({"csv", "json"}));
}

// ---- segment -----------------------------------------------------------------------

struct SegmentArgs {
  std::string function;
  std::vector<double> interval;
  std::size_t segments = 16;
  std::optional<double> target;
  std::int64_t grid = 1'000'000;
  std::string out_dir = "out";
  std::string out;
};

int cmd_segment(const SegmentArgs& a) {
  const auto& ps = function_specs();
  auto it = ps.find(a.function);
  if (it == ps.end()) {
    std::cerr << "segment: unknown function '" << a.function << "' (known:";
    for (const auto& [k, v] : ps) std::cerr << ' ' << k;
    std::cerr << ")\n";
    failure_summary(a.out_dir, "segment", "unknown function '" + a.function + "'");
    return kUsage;
  }
  const FunctionSpec& p = it->second;
  double lo = p.lo, hi = p.hi;
  if (!a.interval.empty()) {
    lo = a.interval[0];
    hi = a.interval[1];
  }
  if (!(lo < hi)) {
    std::cerr << "segment: interval must satisfy lo < hi\n";
    failure_summary(a.out_dir, "segment", "interval must satisfy lo < hi");
    return kUsage;
  }
  if (a.segments < 1) {
    std::cerr << "segment: --segments must be >= 1\n";
    failure_summary(a.out_dir, "segment", "--segments must be >= 1");
    return kUsage;
  }
  SegmentOptions o = p.opts;
  o.max_segments = a.segments;
  // Pinned knots only apply when they fall inside the interval and fit the budget.
  std::erase_if(o.fixed_knots, [&](double k) { return !(k > lo && k < hi); });
  if (o.fixed_knots.size() + 1 > o.max_segments) o.fixed_knots.clear();
  o.target_max_error = a.target;

  Outputs out{a.out_dir, {}};
  PwlTable t;
  try {
    t = segment_function(p.f, lo, hi, o);
  } catch (const InfeasibleBudget& e) {
    std::cerr << "segment: " << e.what() << "\n";
    out.summary("segment", false, {{"function", a.function}, {"error", e.what()}});
    return kCheckFailed;
  }
  const ErrorReport rep = certify_error(t, p.f, a.grid);
  const std::string table_name = a.out.empty() ? a.function + ".table.json" : a.out;
  out.write(table_name, write_table_string(t));
  nlohmann::ordered_json side = {{"function", a.function},
                                 {"interval", {lo, hi}},
                                 {"segments", t.segments()},
                                 {"max_abs_error", rep.max_abs_error},
                                 {"max_rel_error", rep.max_rel_error},
                                 {"argmax_point", rep.argmax_point},
                                 {"grid_points", rep.grid_points}};
  const std::string base = a.out.empty() ? a.function : fs::path(a.out).stem().string();
  out.write(base + ".error.json", side.dump(2) + "\n");
  const bool pass = !a.target || rep.max_abs_error <= *a.target;
  out.summary("segment", pass, {{"function", a.function}, {"max_abs_error", rep.max_abs_error}});
  std::cout << a.function << ": " << t.segments() << " segments, max_abs_error " << format_number(rep.max_abs_error)
            << "\n";
  return pass ? kOk : kCheckFailed;
}

// ---- simulate / sweep / report ---------------------------------------------------------

int cmd_simulate(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  Outputs out{cfg.out_dir, {}};
  const LatencyReport lat =
      latency_report(cfg.model, cfg.mmu, cfg.nvu, cfg.policy, cfg.clock_hz, cfg.overlap_window);
  out.report("latency", c.format, [&](ReportFormat f) { return emit_latency({lat}, f); });

  const WorkloadGraph g = build_encoder_graph(cfg.model);
  ScheduleOptions so;
  so.mults_per_cycle = cfg.mmu.mults_per_cycle();
  so.overlap_window = cfg.overlap_window;
  const Schedule s = schedule(g, nvu_cost_function(cfg.nvu), cfg.policy, so);
  std::ostringstream sched;
  write_schedule_csv(sched, g, s);
  out.write("schedule.csv", sched.str());

  out.report("requirements", c.format,
             [&](ReportFormat f) { return emit_requirements(requirements_table(cfg.model, cfg.mmu.mults_per_cycle()), f); });
  out.report("nvu_throughput", c.format,
             [&](ReportFormat f) { return emit_nvu_table(nvu_throughput_table(512, cfg.nvu.timing), f); });
  out.write("config.json", to_json(cfg).dump(2) + "\n");
  out.summary("simulate", true,
              {{"total_cycles", lat.total_cycles}, {"latency_ms", lat.latency_ms}, {"overhead_pct", lat.overhead_pct}});
  std::cout << "simulate: " << lat.total_cycles << " cycles, " << format_fixed(lat.latency_ms, 3) << " ms, overhead "
            << format_fixed(lat.overhead_pct, 3) << "%\n";
  return kOk;
}

std::vector<LatencyReport> run_sweep(const ExperimentConfig& cfg, const std::vector<Precision>& precisions) {
  std::vector<SweepPoint> pts;
  for (auto p : precisions)
    for (int s : cfg.sweep.seq_len)
      for (int w : cfg.sweep.vrwidth_bits) pts.push_back({s, p, w});
  return latency_sweep(cfg.model, cfg.mmu, cfg.nvu, cfg.policy, cfg.clock_hz, pts, cfg.overlap_window);
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  Outputs out{cfg.out_dir, {}};
  const auto rows = run_sweep(cfg, cfg.sweep.precision);
  out.report("sweep", c.format, [&](ReportFormat f) { return emit_latency(rows, f); });
  out.summary("sweep", true, {{"rows", rows.size()}});
  std::cout << "sweep: " << rows.size() << " configurations\n";
  return kOk;
}

int cmd_report(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  Outputs out{cfg.out_dir, {}};
  const auto mpc = cfg.mmu.mults_per_cycle();
  out.report("requirements", c.format,
             [&](ReportFormat f) { return emit_requirements(requirements_table(cfg.model, mpc), f); });
  std::vector<RequirementRow> overlapped;
  for (int s : cfg.sweep.seq_len) {
    ModelConfig m = cfg.model;
    m.seq_len = s;
    auto rows = overlapped_requirements(m, mpc, cfg.overlap_window);
    overlapped.insert(overlapped.end(), rows.begin(), rows.end());
  }
  out.report("overlapped_requirements", c.format, [&](ReportFormat f) { return emit_requirements(overlapped, f); });
  out.report("nvu_throughput", c.format,
             [&](ReportFormat f) { return emit_nvu_table(nvu_throughput_table(512, cfg.nvu.timing), f); });
  const auto lat = run_sweep(cfg, {Precision::int8, Precision::int16});
  out.report("latency_table", c.format, [&](ReportFormat f) { return emit_latency(lat, f); });
  out.summary("report", true);
  std::cout << "report: " << out.written.size() << " files in " << cfg.out_dir << "\n";
  return kOk;
}

// ---- accuracy --------------------------------------------------------------------------

int cmd_accuracy(const Common& c, std::optional<int> trials) {
  ExperimentConfig cfg = resolve(c);
  if (trials) {
    if (*trials < 1) throw ConfigError("--trials: at least one trial is required");
    cfg.accuracy.trials = *trials;
  }
  Outputs out{cfg.out_dir, {}};
  const AccuracyReport r = run_accuracy(cfg);
  out.report("accuracy", c.format, [&](ReportFormat f) { return emit_accuracy(r, f); });
  out.summary("accuracy", r.pass(), {{"failed", r.failed()}, {"max_abs", r.max_abs}});
  for (const auto& ch : r.checks)
    std::cout << (ch.pass ? "PASS " : "FAIL ") << ch.name << " = " << format_number(ch.value) << " (limit "
              << format_number(ch.limit) << ")\n";
  return r.pass() ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer nonlinear-unit models: tables, simulation, accuracy"};
  app.require_subcommand(1);

  SegmentArgs seg;
  auto* s = app.add_subcommand("segment", "fit a piecewise-linear table for a function");
  s->add_option("function", seg.function, "gelu, exp, recip, rsqrt, tanh or identity")->required();
  s->add_option("--interval", seg.interval, "lo hi")->expected(2);
  s->add_option("--segments", seg.segments, "segment budget");
  s->add_option("--target-error", seg.target, "stop once max abs error is below this");
  s->add_option("--grid", seg.grid, "error-certification grid points")->check(CLI::Range(std::int64_t{2}, std::int64_t{1} << 26));
  s->add_option("--out-dir", seg.out_dir, "output directory");
  s->add_option("--out", seg.out, "table file name inside the output directory");

  Common sim, swp, rep, acc;
  add_common(app.add_subcommand("simulate", "schedule one configuration and report latency"), sim);
  add_common(app.add_subcommand("sweep", "latency over the configured width x sequence grid"), swp);
  add_common(app.add_subcommand("report", "requirement, throughput and latency tables"), rep);
  auto* a = app.add_subcommand("accuracy", "fixed-point vs reference encoder over seeded trials");
  add_common(a, acc);
  std::optional<int> trials;
  a->add_option("--trials", trials, "number of trials (overrides the config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (app.got_subcommand("segment")) return cmd_segment(seg);
    if (app.got_subcommand("simulate")) return cmd_simulate(sim);
    if (app.got_subcommand("sweep")) return cmd_sweep(swp);
    if (app.got_subcommand("report")) return cmd_report(rep);
    if (app.got_subcommand("accuracy")) return cmd_accuracy(acc, trials);
  } catch (const std::exception& e) {  // config, shape, format and I/O errors
    std::cerr << "error: " << e.what() << "\n";
    for (auto [name, c] : {std::pair{"simulate", &sim}, {"sweep", &swp}, {"report", &rep}, {"accuracy", &acc}})
      if (app.got_subcommand(name)) failure_summary(c->out_dir, name, e.what());
    if (app.got_subcommand("segment")) failure_summary(seg.out_dir, "segment", e.what());
    return kUsage;
  }
  return kUsage;
}
