#pragma once

// Experiment configuration: one JSON document, validated field by field.
// Unknown keys are errors so that typos cannot silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "npe/io.hpp"
#include "npe/mmu.hpp"
#include "npe/nonlinear.hpp"
#include "npe/nvu.hpp"
#include "npe/workload.hpp"

namespace npe {

struct AccuracyThresholds {
  double encoder_max_abs = 0.015;
  double encoder_mean_abs = 0.0025;
  double seed_spread = 10.0;  // max/min of per-trial max_abs
  friend bool operator==(const AccuracyThresholds&, const AccuracyThresholds&) = default;
};

struct AccuracyConfig {
  int trials = 20;
  int seq_len = 64;
  double weight_scale = 0.02;
  AccuracyThresholds thresholds{};
  friend bool operator==(const AccuracyConfig&, const AccuracyConfig&) = default;
};

struct SweepConfig {
  std::vector<int> vrwidth_bits{256, 512, 1024, 2048};
  std::vector<int> seq_len{64, 128, 256, 512};
  std::vector<Precision> precision{Precision::int16};
  friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct ExperimentConfig {
  ModelConfig model{};
  MmuConfig mmu{};
  NvuConfig nvu{};
  Policy policy = Policy::overlap;
  int overlap_window = 3;
  double clock_hz = 2e8;
  TableBudgets tables{};
  AccuracyConfig accuracy{};
  SweepConfig sweep{};
  std::string out_dir = "out";
  std::uint64_t seed = 1;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  void validate() const {
    model.validate();
    mmu.validate();
    nvu.validate();
    if (overlap_window < 0) throw ConfigError("overlap_window: must be >= 0");
    if (!(clock_hz > 0)) throw ConfigError("clock_hz: must be positive");
    for (auto [name, v] : {std::pair{"exp", tables.exp}, {"recip", tables.recip}, {"rsqrt", tables.rsqrt}, {"gelu", tables.gelu}})
      if (v < 1 || v > 256) throw ConfigError(std::string("tables.") + name + ": segment budget must be in [1, 256]");
    if (accuracy.trials < 1) throw ConfigError("accuracy.trials: at least one trial is required");
    if (accuracy.seq_len < 1 || accuracy.seq_len > 512) throw ConfigError("accuracy.seq_len: must be in [1, 512]");
    if (!(accuracy.weight_scale > 0)) throw ConfigError("accuracy.weight_scale: must be positive");
    const auto& t = accuracy.thresholds;
    if (!(t.encoder_max_abs > 0) || !(t.encoder_mean_abs > 0) || !(t.seed_spread >= 1))
      throw ConfigError("accuracy.thresholds: max/mean must be positive and seed_spread >= 1");
    if (sweep.vrwidth_bits.empty() || sweep.seq_len.empty() || sweep.precision.empty())
      throw ConfigError("sweep: every axis needs at least one value");
    for (int w : sweep.vrwidth_bits) {
      NvuConfig v = nvu;
      v.vrwidth_bits = w;
      try {
        v.validate();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("sweep.vrwidth_bits: ") + e.what());
      }
    }
    for (int s : sweep.seq_len)
      if (s < 1 || s > 512) throw ConfigError("sweep.seq_len: values must be in [1, 512]");
    if (out_dir.empty()) throw ConfigError("out_dir: must not be empty");
  }
};

namespace detail {

// Reads one JSON object, tracking the dotted path for error messages.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    read(*it, out, field(key));
  }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    FieldReader sub(*it, field(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key().c_str()) + ": unknown field");
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const nlohmann::json& v, int& out, const std::string& name) {
    if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(name + ": out of range");
    out = static_cast<int>(x);
  }
  static void read(const nlohmann::json& v, std::uint64_t& out, const std::string& name) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(name + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  static void read(const nlohmann::json& v, double& out, const std::string& name) {
    if (!v.is_number()) throw ConfigError(name + ": expected a number");
    out = v.get<double>();
  }
  static void read(const nlohmann::json& v, bool& out, const std::string& name) {
    if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const nlohmann::json& v, std::string& out, const std::string& name) {
    if (!v.is_string()) throw ConfigError(name + ": expected a string");
    out = v.get<std::string>();
  }
  static void read(const nlohmann::json& v, Precision& out, const std::string& name) {
    std::string s;
    read(v, s, name);
    try {
      out = parse_precision(s);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }
  static void read(const nlohmann::json& v, Policy& out, const std::string& name) {
    std::string s;
    read(v, s, name);
    try {
      out = parse_policy(s);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }
  template <typename T>
  static void read(const nlohmann::json& v, std::vector<T>& out, const std::string& name) {
    if (!v.is_array()) throw ConfigError(name + ": expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T x{};
      read(v[i], x, name + "[" + std::to_string(i) + "]");
      out.push_back(x);
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::FieldReader r(j, "");
  r.object("model", [&](auto& m) {
    m.get("L", c.model.L);
    m.get("A", c.model.A);
    m.get("H", c.model.H);
    m.get("seq_len", c.model.seq_len);
    m.get("ff_dim", c.model.ff_dim);
  });
  r.object("mmu", [&](auto& m) {
    m.get("pe_count", c.mmu.pe_count);
    m.get("macs_per_pe", c.mmu.macs_per_pe);
    m.get("precision", c.mmu.precision);
  });
  r.object("nvu", [&](auto& n) {
    n.get("vrwidth_bits", c.nvu.vrwidth_bits);
    n.get("vrf_registers", c.nvu.vrf_registers);
    n.get("vcu_issue_slots", c.nvu.vcu_issue_slots);
    n.get("srf_registers", c.nvu.srf_registers);
    n.object("timing", [&](auto& t) {
      t.get("scu_mul_latency", c.nvu.timing.scu_mul_latency);
      t.get("scu_pwl_latency", c.nvu.timing.scu_pwl_latency);
      t.get("reduce_extra", c.nvu.timing.reduce_extra);
      t.get("broadcast_tree", c.nvu.timing.broadcast_tree);
    });
  });
  r.get("policy", c.policy);
  r.get("overlap_window", c.overlap_window);
  r.get("clock_hz", c.clock_hz);
  r.object("tables", [&](auto& t) {
    t.get("exp", c.tables.exp);
    t.get("recip", c.tables.recip);
    t.get("rsqrt", c.tables.rsqrt);
    t.get("gelu", c.tables.gelu);
  });
  r.object("accuracy", [&](auto& a) {
    a.get("trials", c.accuracy.trials);
    a.get("seq_len", c.accuracy.seq_len);
    a.get("weight_scale", c.accuracy.weight_scale);
    a.object("thresholds", [&](auto& t) {
      t.get("encoder_max_abs", c.accuracy.thresholds.encoder_max_abs);
      t.get("encoder_mean_abs", c.accuracy.thresholds.encoder_mean_abs);
      t.get("seed_spread", c.accuracy.thresholds.seed_spread);
    });
  });
  r.object("sweep", [&](auto& s) {
    s.get("vrwidth_bits", c.sweep.vrwidth_bits);
    s.get("seq_len", c.sweep.seq_len);
    s.get("precision", c.sweep.precision);
  });
  r.get("out_dir", c.out_dir);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"L", c.model.L}, {"A", c.model.A}, {"H", c.model.H}, {"seq_len", c.model.seq_len}, {"ff_dim", c.model.ff_dim}};
  j["mmu"] = {{"pe_count", c.mmu.pe_count}, {"macs_per_pe", c.mmu.macs_per_pe}, {"precision", to_string(c.mmu.precision)}};
  j["nvu"] = {{"vrwidth_bits", c.nvu.vrwidth_bits},
              {"vrf_registers", c.nvu.vrf_registers},
              {"vcu_issue_slots", c.nvu.vcu_issue_slots},
              {"srf_registers", c.nvu.srf_registers},
              {"timing",
               {{"scu_mul_latency", c.nvu.timing.scu_mul_latency},
                {"scu_pwl_latency", c.nvu.timing.scu_pwl_latency},
                {"reduce_extra", c.nvu.timing.reduce_extra},
                {"broadcast_tree", c.nvu.timing.broadcast_tree}}}};
  j["policy"] = to_string(c.policy);
  j["overlap_window"] = c.overlap_window;
  j["clock_hz"] = c.clock_hz;
  j["tables"] = {{"exp", c.tables.exp}, {"recip", c.tables.recip}, {"rsqrt", c.tables.rsqrt}, {"gelu", c.tables.gelu}};
  j["accuracy"] = {{"trials", c.accuracy.trials},
                   {"seq_len", c.accuracy.seq_len},
                   {"weight_scale", c.accuracy.weight_scale},
                   {"thresholds",
                    {{"encoder_max_abs", c.accuracy.thresholds.encoder_max_abs},
                     {"encoder_mean_abs", c.accuracy.thresholds.encoder_mean_abs},
                     {"seed_spread", c.accuracy.thresholds.seed_spread}}}};
  std::vector<std::string> prec;
  for (auto p : c.sweep.precision) prec.emplace_back(to_string(p));
  j["sweep"] = {{"vrwidth_bits", c.sweep.vrwidth_bits}, {"seq_len", c.sweep.seq_len}, {"precision", prec}};
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  return j;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& p) {
  std::string text;
  try {
    text = read_file(p);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

}  // namespace npe
