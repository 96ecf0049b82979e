#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "unlearnwf/config.hpp"

using namespace unlearnwf;
using nlohmann::json;

namespace {

std::string error_of(const std::string& text) {
  try {
    config_from_json_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("minimal config takes the closed-world defaults") {
  const ExperimentConfig cfg = config_from_json_text(R"({"world": "closed"})");
  CHECK(config_to_json_text(cfg) == config_to_json_text(default_config(World::closed)));
  CHECK(config_from_json_text("{}").world == World::closed);

  const ExperimentConfig ow = config_from_json_text(R"({"world": "open"})");
  CHECK(ow.data.synth.background_sites == default_config(World::open).data.synth.background_sites);
  CHECK(ow.train.epochs == default_config(World::open).train.epochs);
}

TEST_CASE("errors name the offending key") {
  CHECK(error_of(R"({"trigger": {"colour": "red"}})").find("trigger.colour") != std::string::npos);
  CHECK(error_of(R"({"bogus": 1})").find("bogus") != std::string::npos);
  CHECK(error_of(R"({"train": {"epochs": "many"}})").find("train.epochs") != std::string::npos);
  CHECK(error_of(R"({"world": "middle"})").find("world") != std::string::npos);
  CHECK(error_of(R"({"poison": {"mode": "some"}})").find("poison.mode") != std::string::npos);
  CHECK(error_of(R"({"world": "closed", "data": {"background_sites": 3}})") != "");
  CHECK(error_of("{not json") != "");
  CHECK_THROWS_AS(parse_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("emit, parse and emit again") {
  ExperimentConfig cfg = default_config(World::open);
  cfg.data.synth.sites = 7;
  cfg.poison.count = 12;
  cfg.poison.offset.reset();
  cfg.poison.pattern = {1, -1, 1, 1};
  cfg.poison.mode = TargetMode::all_to_random;
  cfg.detect.threshold = ThresholdPolicy::percentile(90);
  cfg.detect.estimator = Estimator::damped_hessian;
  cfg.detect.last_layer_only = true;
  cfg.unlearn.k = TopK::count(50);
  cfg.unlearn.ablation = Ablation::no_selection;
  cfg.augment.ops_per_point = 9;
  cfg.seeds.master = 77;
  cfg.seeds.train = 5;
  const std::string text = config_to_json_text(cfg);
  const ExperimentConfig back = config_from_json_text(text);
  CHECK(config_to_json_text(back) == text);
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(back.seeds.train_seed() == 5);
  CHECK(back.seeds.init_seed() == cfg.seeds.init_seed());
  CHECK_FALSE(back.poison.offset);
  CHECK(back.unlearn.k.kind == TopK::Kind::count);

  ExperimentConfig other = cfg;
  other.unlearn.lambda = 2.0;
  CHECK(config_hash(other) != config_hash(cfg));
  CHECK(hash_hex(0xabcull) == "0000000000000abc");

  testutil::TempDir dir("cfg");
  std::ofstream(dir / "c.json") << text;
  CHECK(config_to_json_text(parse_config(dir / "c.json")) == text);
}

TEST_CASE("report JSON") {
  MetricsReport r;
  r.unlearned.clean_acc = 0.9;
  r.unlearned.poisoned_acc = 0.7;
  r.baseline_no_unlearn.clean_acc = 0.95;
  r.detection = DetectionQuality{0.5, 0.25};
  r.config_hash = 0x1234;
  const json j = json::parse(report_to_json_text(r));
  for (const char* key : {"poisoned_acc", "clean_acc", "test_acc", "correct_triggered", "correct_clean",
                          "mixed_total", "wall_time_s", "detection", "baseline_no_unlearn", "anomaly_requested",
                          "anomaly_actual", "flagged_count", "poisoned_count", "selected_count", "ablation",
                          "world", "config_hash", "seeds"}) {
    CHECK_MESSAGE(j.contains(key), key);
  }
  CHECK(j["poisoned_acc"].get<double>() == 0.7);
  CHECK(j["detection"]["recall"].get<double>() == 0.25);
  CHECK(j["baseline_no_unlearn"]["clean_acc"].get<double>() == 0.95);
  CHECK(j["baseline_no_unlearn"]["poisoned_acc"].is_null());
  CHECK(j["config_hash"].get<std::string>() == "0000000000001234");
  CHECK(j["world"] == "closed");

  r.detection.reset();
  CHECK(json::parse(report_to_json_text(r))["detection"].is_null());

  StageTimes t{1.0, 2.0, 3.0, 4.0};
  const json tj = json::parse(times_to_json_text(t));
  CHECK(tj["unlearn_s"].get<double>() == 3.0);
}

TEST_CASE("results table") {
  MetricsReport r;
  r.unlearned.poisoned_acc = 0.8712;
  r.unlearned.clean_acc = 0.9;
  r.unlearned.test_acc = 0.85;
  r.wall_time_s = 1.5;
  const std::vector<std::pair<std::string, MetricsReport>> rows{{"Ours", r}};
  const std::string table = results_table(rows, "CW");
  CHECK(table.rfind("CW\n", 0) == 0);
  CHECK(table.find("87.12") != std::string::npos);
  CHECK(table.find("1.50") != std::string::npos);
  CHECK(table.find("published full-scale reference:") != std::string::npos);
  CHECK(table.find("297.53") != std::string::npos);
  CHECK(table.find("434.47") == std::string::npos);
  CHECK(results_table(rows, "custom").find("published") == std::string::npos);
}

}  // TEST_SUITE
