#pragma once

// Batch experiments shared by the command-line tool and the acceptance run:
// the seeded accuracy harness and its report.

#include <algorithm>
#include <cstdint>
#include <future>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "npe/analytics.hpp"
#include "npe/config.hpp"
#include "npe/reference.hpp"

namespace npe {

struct TrialResult {
  std::uint64_t seed = 0;
  ErrorMetrics metrics;
};

struct ThresholdCheck {
  std::string name;
  double value = 0;
  double limit = 0;
  bool pass = false;
};

struct AccuracyReport {
  std::vector<TrialResult> trials;
  double max_abs = 0;       // worst trial
  double mean_abs = 0;      // mean over trials
  double min_max_abs = 0;   // best trial
  double seed_spread = 0;   // max_abs ratio worst/best
  std::vector<ThresholdCheck> checks;
  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const ThresholdCheck& c) { return c.pass; });
  }
  std::vector<std::string> failed() const {
    std::vector<std::string> out;
    for (const auto& c : checks)
      if (!c.pass) out.push_back(c.name);
    return out;
  }
};

// Per-trial seeds are drawn from one generator seeded by the config seed.
inline std::vector<std::uint64_t> trial_seeds(std::uint64_t seed, int trials) {
  std::mt19937_64 g(seed);
  std::vector<std::uint64_t> s(static_cast<std::size_t>(trials));
  for (auto& x : s) x = g();
  return s;
}

inline TrialResult run_trial(const ExperimentConfig& cfg, const NonlinearTables& tables, std::uint64_t seed) {
  ModelConfig m = cfg.model;
  m.seq_len = cfg.accuracy.seq_len;
  const EncoderWeights w = random_weights(m, seed, cfg.accuracy.weight_scale);
  const RealMatrix x = random_input(m, seed);
  StageTaps ref, fix;
  ForwardOptions o;
  o.mmu = cfg.mmu;
  o.tables = &tables;
  o.taps = &ref;
  encoder_forward(x, w, Mode::reference, o);
  o.taps = &fix;
  encoder_forward(x, w, Mode::fixed_point, o);
  return {seed, compare_stages(fix, ref)};
}

inline AccuracyReport run_accuracy(const ExperimentConfig& cfg) {
  cfg.validate();
  const NonlinearTables tables = cfg.tables == TableBudgets{} ? default_tables() : build_tables(cfg.tables);
  const auto seeds = trial_seeds(cfg.seed, cfg.accuracy.trials);

  AccuracyReport r;
  r.trials.resize(seeds.size());
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  for (std::size_t base = 0; base < seeds.size(); base += workers) {
    std::vector<std::future<TrialResult>> jobs;
    for (std::size_t i = base; i < std::min(seeds.size(), base + workers); ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] { return run_trial(cfg, tables, seeds[i]); }));
    for (std::size_t i = 0; i < jobs.size(); ++i) r.trials[base + i] = jobs[i].get();
  }

  r.min_max_abs = r.trials.front().metrics.max_abs;
  double sum = 0;
  for (const auto& t : r.trials) {
    r.max_abs = std::max(r.max_abs, t.metrics.max_abs);
    r.min_max_abs = std::min(r.min_max_abs, t.metrics.max_abs);
    sum += t.metrics.mean_abs;
  }
  r.mean_abs = sum / static_cast<double>(r.trials.size());
  r.seed_spread = r.min_max_abs > 0 ? r.max_abs / r.min_max_abs : (r.max_abs > 0 ? INFINITY : 1.0);

  const auto& th = cfg.accuracy.thresholds;
  r.checks = {{"encoder_max_abs", r.max_abs, th.encoder_max_abs, r.max_abs < th.encoder_max_abs},
              {"encoder_mean_abs", r.mean_abs, th.encoder_mean_abs, r.mean_abs < th.encoder_mean_abs},
              {"seed_spread", r.seed_spread, th.seed_spread, r.seed_spread < th.seed_spread}};
  return r;
}

inline std::string emit_accuracy(const AccuracyReport& r, ReportFormat f) {
  if (f == ReportFormat::csv) {
    std::ostringstream os;
    os << "trial,seed,stage,max_abs,mean_abs,max_rel,argmax_row,argmax_col\n";
    for (std::size_t i = 0; i < r.trials.size(); ++i)
      for (const auto& [stage, s] : r.trials[i].metrics.per_stage)
        os << i << ',' << r.trials[i].seed << ',' << stage << ',' << format_number(s.max_abs) << ','
           << format_number(s.mean_abs) << ',' << format_number(s.max_rel) << ',' << s.argmax_row << ','
           << s.argmax_col << '\n';
    for (const auto& c : r.checks)
      os << "check," << c.name << ',' << (c.pass ? "pass" : "fail") << ',' << format_number(c.value) << ','
         << format_number(c.limit) << ",,,\n";
    return os.str();
  }
  nlohmann::ordered_json j;
  j["pass"] = r.pass();
  j["summary"] = {{"trials", r.trials.size()},
                  {"max_abs", r.max_abs},
                  {"mean_abs", r.mean_abs},
                  {"min_max_abs", r.min_max_abs},
                  {"seed_spread", r.seed_spread}};
  j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : r.checks)
    j["checks"].push_back({{"name", c.name}, {"value", c.value}, {"limit", c.limit}, {"pass", c.pass}});
  j["failed"] = r.failed();
  j["trials"] = nlohmann::ordered_json::array();
  for (const auto& t : r.trials) {
    nlohmann::ordered_json stages;
    for (const auto& [stage, s] : t.metrics.per_stage)
      stages[stage] = {{"max_abs", s.max_abs}, {"mean_abs", s.mean_abs}, {"max_rel", s.max_rel},
                       {"argmax", {s.argmax_row, s.argmax_col}}};
    j["trials"].push_back({{"seed", t.seed},
                           {"max_abs", t.metrics.max_abs},
                           {"mean_abs", t.metrics.mean_abs},
                           {"max_rel", t.metrics.max_rel},
                           {"stages", stages}});
  }
  return j.dump(2) + "\n";
}

}  // namespace npe
