#include <gtest/gtest.h>

#include "npe/config.hpp"

using namespace npe;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, ShippedDefaultMatchesBuiltInDefaults) {
  const auto c = load_config(std::string(NPE_SOURCE_DIR) + "/config/default.json");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.model.seq_len, 128);
  EXPECT_EQ(c.nvu.vrwidth_bits, 1024);
  EXPECT_EQ(c.mmu.precision, Precision::int16);
}

TEST(Config, EmptyObjectIsAllDefaults) { EXPECT_EQ(parse_config("{}"), ExperimentConfig{}); }

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.model.seq_len = 64;
  c.mmu.precision = Precision::int8;
  c.nvu.vrwidth_bits = 512;
  c.nvu.timing.broadcast_tree = false;
  c.policy = Policy::no_overlap;
  c.tables.gelu = 24;
  c.accuracy.trials = 3;
  c.sweep.precision = {Precision::int8, Precision::int16};
  c.seed = 99;
  EXPECT_EQ(parse_config(to_json(c).dump()), c);
}

TEST(Config, PartialOverridesKeepOtherDefaults) {
  const auto c = parse_config(R"({"nvu": {"vrwidth_bits": 2048}, "accuracy": {"thresholds": {"encoder_max_abs": 0.5}}})");
  EXPECT_EQ(c.nvu.vrwidth_bits, 2048);
  EXPECT_EQ(c.nvu.timing, NvuTiming{});
  EXPECT_EQ(c.accuracy.thresholds.encoder_max_abs, 0.5);
  EXPECT_EQ(c.accuracy.thresholds.encoder_mean_abs, AccuracyThresholds{}.encoder_mean_abs);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(error_of(R"({"model": {"seq_lenn": 64}})").find("model.seq_lenn: unknown field"), std::string::npos);
  EXPECT_NE(error_of(R"({"bogus": 1})").find("bogus: unknown field"), std::string::npos);
  EXPECT_NE(error_of(R"({"nvu": {"timing": {"reduce_extra": "one"}}})").find("nvu.timing.reduce_extra: expected an integer"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"mmu": {"precision": "int4"}})").find("mmu.precision"), std::string::npos);
  EXPECT_NE(error_of(R"({"sweep": {"seq_len": [64, "x"]}})").find("sweep.seq_len[1]"), std::string::npos);
  EXPECT_NE(error_of(R"({"seed": -1})").find("seed: expected a non-negative integer"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": 3})").find("model: expected an object"), std::string::npos);
  EXPECT_NE(error_of("{").find("not valid JSON"), std::string::npos);
}

TEST(Config, SemanticValidation) {
  EXPECT_NE(error_of(R"({"model": {"seq_len": 513}})"), "");
  EXPECT_NE(error_of(R"({"model": {"H": 770}})"), "");
  EXPECT_NE(error_of(R"({"nvu": {"vrwidth_bits": 384}})"), "");
  EXPECT_NE(error_of(R"({"overlap_window": -1})").find("overlap_window"), std::string::npos);
  EXPECT_NE(error_of(R"({"clock_hz": 0})").find("clock_hz"), std::string::npos);
  EXPECT_NE(error_of(R"({"tables": {"exp": 0}})").find("tables.exp"), std::string::npos);
  EXPECT_NE(error_of(R"({"accuracy": {"trials": 0}})").find("accuracy.trials"), std::string::npos);
  EXPECT_NE(error_of(R"({"accuracy": {"thresholds": {"seed_spread": 0.5}}})").find("accuracy.thresholds"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"sweep": {"vrwidth_bits": []}})").find("sweep"), std::string::npos);
  EXPECT_NE(error_of(R"({"sweep": {"vrwidth_bits": [100]}})").find("sweep.vrwidth_bits"), std::string::npos);
  EXPECT_NE(error_of(R"({"out_dir": ""})").find("out_dir"), std::string::npos);
}

TEST(Config, MissingFileIsAConfigError) {
  EXPECT_THROW(load_config("/nonexistent/npe.json"), ConfigError);
}
