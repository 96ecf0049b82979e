#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "unlearnwf/eval.hpp"

using namespace unlearnwf;

namespace {

// Four sites, 64 cells, a small convnet and a few epochs: seconds per run.
ExperimentConfig small_config(World world = World::closed) {
  ExperimentConfig cfg = default_config(world);
  cfg.data.synth.sites = 4;
  cfg.data.synth.traces_per_site = 40;
  cfg.data.synth.length = 64;
  if (world == World::open) cfg.data.synth.background_sites = 4;
  cfg.layers = "conv1d(1,4,8,4) relu conv1d(4,8,4,2) relu global_avg_pool dense(8," +
               std::to_string(world == World::open ? 5 : 4) + ")";
  cfg.train.epochs = 4;
  cfg.detect.anomaly_count = 5;
  cfg.seeds.master = 3;
  return cfg;
}

// Predicts 1 when the first cell is +1, else 0.
ModelState sign_model() {
  return ModelState(Architecture{1, {Layer::dense(1, 2)}}, Eigen::Vector4d(-1.0, 1.0, 0.0, 0.0));
}

bool same_metrics(const Metrics& a, const Metrics& b) {
  return a.poisoned_acc == b.poisoned_acc && a.clean_acc == b.clean_acc && a.test_acc == b.test_acc &&
         a.correct_triggered == b.correct_triggered && a.correct_clean == b.correct_clean &&
         a.mixed_total == b.mixed_total;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("accuracy") {
  const ModelState m = sign_model();
  // predictions: +1 -> 1, -1 -> 0
  const std::vector<Trace> fixture{{{1}, 1},  {{1}, 0},  {{-1}, 0}, {{-1}, 0}, {{1}, 1},
                                   {{-1}, 1}, {{1}, 1},  {{-1}, 0}, {{1}, 0},  {{-1}, 1}};
  CHECK(accuracy(m, fixture) == doctest::Approx(0.6));

  std::vector<Trace> right;
  for (const Trace& t : fixture) right.push_back({t.dirs, predict(m, t)});
  CHECK(accuracy(m, right) == 1.0);
  CHECK_THROWS(accuracy(m, std::vector<Trace>{}));

  // A constant predictor scores the share of its label.
  ModelState constant(Architecture{32, {Layer::dense(32, 5)}}, Eigen::VectorXd::Zero(32 * 5 + 5));
  constant.theta()[32 * 5 + 2] = 1.0;
  std::vector<Trace> balanced;
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    Trace t = testutil::random_trace(rng, 32, 5);
    t.label = static_cast<Label>(i % 5);
    balanced.push_back(t);
  }
  CHECK(accuracy(constant, balanced) == doctest::Approx(0.2));
}

TEST_CASE("detection quality") {
  const std::vector<std::size_t> flagged{1, 2, 3, 4};
  const std::vector<std::size_t> truth{3, 4, 5};
  DetectionQuality q = detection_quality(flagged, truth);
  CHECK(q.precision == doctest::Approx(0.5));
  CHECK(q.recall == doctest::Approx(2.0 / 3.0));

  q = detection_quality(std::vector<std::size_t>{4, 3, 3, 4}, truth);
  CHECK(q.precision == 1.0);
  CHECK(q.recall == doctest::Approx(2.0 / 3.0));

  q = detection_quality(std::vector<std::size_t>{}, truth);
  CHECK(q.precision == 0.0);
  CHECK(q.recall == 0.0);
  q = detection_quality(flagged, std::vector<std::size_t>{});
  CHECK(q.precision == 0.0);
  CHECK(q.recall == 0.0);
  q = detection_quality(std::vector<std::size_t>{}, std::vector<std::size_t>{});
  CHECK(q.precision == 1.0);
  CHECK(q.recall == 1.0);
}

TEST_CASE("evaluate decomposes test accuracy") {
  const ModelState m = sign_model();
  TestSets sets;
  sets.clean = {{{1}, 1}, {{-1}, 1}, {{-1}, 0}, {{1}, 0}};
  sets.triggered = {{{1}, 1}, {{1}, 1}, {{1}, 0}, {{1}, 0}};
  sets.mixed = {sets.triggered[0], sets.clean[1], sets.triggered[2], sets.clean[3]};
  sets.mixed_is_triggered = {true, false, true, false};
  const Metrics r = evaluate(m, sets);
  CHECK(r.clean_acc == 0.5);
  REQUIRE(r.poisoned_acc);
  CHECK(*r.poisoned_acc == 0.5);
  CHECK(r.correct_triggered == 1);
  CHECK(r.correct_clean == 0);
  CHECK(r.mixed_total == 4);
  CHECK(r.test_acc == 0.25);

  sets.triggered.clear();
  CHECK_FALSE(evaluate(m, sets).poisoned_acc);
}

TEST_CASE("test sets") {
  const ExperimentConfig cfg = small_config();
  const Dataset ds = prepare_data(cfg);
  const TestSets sets = build_test_sets(ds, cfg, true);
  const std::size_t n = sets.clean.size();
  REQUIRE(n == ds.indices(Split::test).size());
  REQUIRE(sets.triggered.size() == n);
  REQUIRE(sets.mixed.size() == n);
  std::size_t trig = 0;
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(sets.triggered[i].label == sets.clean[i].label);
    CHECK(sets.mixed[i] == (sets.mixed_is_triggered[i] ? sets.triggered[i] : sets.clean[i]));
    trig += sets.mixed_is_triggered[i] ? 1 : 0;
  }
  CHECK(trig == n / 2);
  const TestSets again = build_test_sets(ds, cfg, true);
  CHECK(again.mixed_is_triggered == sets.mixed_is_triggered);

  const TestSets off = build_test_sets(ds, cfg, false);
  CHECK(off.triggered.empty());
  CHECK(off.mixed == off.clean);
}

TEST_CASE("anomaly set") {
  const ExperimentConfig cfg = small_config();
  const Dataset ds = prepare_data(cfg);
  const ModelState m = init_model(architecture_for(cfg, ds), 1);
  const auto anomalies = build_anomaly_set(m, ds, cfg.poison.trigger(), 7, AnomalyLabel::predicted, 5);
  CHECK(anomalies.size() <= 7);
  for (const Trace& t : anomalies) CHECK(predict(m, t) == t.label);
  const auto originals = build_anomaly_set(m, ds, cfg.poison.trigger(), 7, AnomalyLabel::original, 5);
  REQUIRE(originals.size() == anomalies.size());
  for (std::size_t i = 0; i < originals.size(); ++i) {
    CHECK(originals[i].dirs == anomalies[i].dirs);
    CHECK(predict(m, originals[i]) != originals[i].label);
  }
}

TEST_CASE("config checks and seeds") {
  ExperimentConfig cfg = small_config();
  CHECK_NOTHROW(cfg.check());
  cfg.data.synth.background_sites = 2;
  CHECK_THROWS(cfg.check());
  cfg = small_config(World::open);
  CHECK_NOTHROW(cfg.check());
  cfg.data.synth.background_sites = 0;
  CHECK_THROWS(cfg.check());
  cfg = small_config();
  cfg.poison.fraction = 1.5;
  CHECK_THROWS(cfg.check());
  cfg = small_config();
  cfg.poison.target_label = 4;
  CHECK_THROWS(cfg.check());

  Seeds s;
  s.master = 9;
  CHECK(s.train_seed() == substream(9, "train"));
  CHECK(s.train_seed() != s.init_seed());
  s.train = 42;
  CHECK(s.train_seed() == 42);
  s.reset_to(10);
  CHECK(s.master == 10);
  CHECK(s.train_seed() == substream(10, "train"));

  CHECK(default_config(World::open).data.synth.background_sites > 0);
  CHECK(default_config(World::closed).data.synth.background_sites == 0);
}

TEST_CASE("pipeline invariants") {
  ExperimentConfig cfg = small_config();

  SUBCASE("no poison means no triggered metrics and a no-op unlearning") {
    cfg.poison.count = 0;
    const ExperimentArtifacts art = run_experiment_full(cfg);
    const MetricsReport& r = art.report;
    CHECK_FALSE(r.unlearned.poisoned_acc);
    CHECK(r.unlearned.clean_acc == r.unlearned.test_acc);
    CHECK(r.poisoned_count == 0);
    CHECK(r.selected_count == 0);
    CHECK_FALSE(r.detection);
    CHECK(art.unlearned.model.theta() == art.poisoned_model.theta());
    CHECK(same_metrics(r.unlearned, r.baseline_no_unlearn));
  }

  SUBCASE("empty selection leaves the model untouched") {
    cfg.detect.oracle_forget_set = true;
    cfg.unlearn.k = TopK::count(0);
    cfg.unlearn.ablation = Ablation::no_inhibition;
    const ExperimentArtifacts art = run_experiment_full(cfg);
    CHECK(art.report.selected_count == 0);
    CHECK(art.unlearned.model.theta() == art.poisoned_model.theta());
    CHECK(same_metrics(art.report.unlearned, art.report.baseline_no_unlearn));
  }

  SUBCASE("oracle forget set, determinism and reruns") {
    cfg.detect.oracle_forget_set = true;
    const ExperimentArtifacts a = run_experiment_full(cfg);
    const ExperimentArtifacts b = run_experiment_full(cfg);
    CHECK(a.poisoned_model.theta() == b.poisoned_model.theta());
    CHECK(a.unlearned.model.theta() == b.unlearned.model.theta());
    CHECK(same_metrics(a.report.unlearned, b.report.unlearned));
    CHECK(a.report.config_hash == b.report.config_hash);
    REQUIRE(a.report.detection);
    CHECK(a.report.detection->precision == 1.0);
    CHECK(a.report.detection->recall == 1.0);
    CHECK(a.forget_indices == a.poisoned.poisoned_indices);
    CHECK(a.report.poisoned_count == static_cast<std::size_t>(std::llround(
                                         0.05 * static_cast<double>(a.clean_dataset.indices(Split::train).size()))));
    CHECK(a.report.wall_time_s == doctest::Approx(a.times.train_s + a.times.detect_s + a.times.unlearn_s +
                                                  a.times.evaluate_s));

    const ExperimentArtifacts same = rerun_unlearning(a, cfg);
    CHECK(same.unlearned.model.theta() == a.unlearned.model.theta());

    ExperimentConfig zero = cfg;
    zero.unlearn.ablation = Ablation::no_inhibition;
    const ExperimentArtifacts z = rerun_unlearning(a, zero);
    CHECK(z.unlearned.selected == a.unlearned.selected);
    CHECK(z.report.ablation == Ablation::no_inhibition);
    CHECK(z.report.config_hash != a.report.config_hash);
    CHECK(same_metrics(z.report.baseline_no_unlearn, a.report.baseline_no_unlearn));
  }

  SUBCASE("retraining on the whole train split reproduces the poisoned model") {
    const ExperimentArtifacts art = run_experiment_full(cfg);
    ModelState again;
    const MetricsReport r =
        retrain_oracle(cfg, art.poisoned.dataset, art.poisoned.dataset.indices(Split::train), &again);
    CHECK(again.theta() == art.poisoned_model.theta());
    CHECK(same_metrics(r.unlearned, art.report.baseline_no_unlearn));
    CHECK_THROWS(retrain_oracle(cfg, art.poisoned.dataset, std::vector<std::size_t>{}));
  }

  SUBCASE("open world") {
    ExperimentConfig ow = small_config(World::open);
    ow.detect.oracle_forget_set = true;
    const MetricsReport r = run_experiment(ow);
    CHECK(r.world == World::open);
    CHECK(r.unlearned.poisoned_acc);
  }

  CHECK_THROWS(run_ablation(cfg, Ablation::none));
}

TEST_CASE("mean_report") {
  MetricsReport a, b;
  a.unlearned.clean_acc = 0.8;
  b.unlearned.clean_acc = 0.6;
  a.unlearned.test_acc = 0.5;
  b.unlearned.test_acc = 0.7;
  a.unlearned.poisoned_acc = 0.2;
  b.unlearned.poisoned_acc = 0.4;
  a.wall_time_s = 1.0;
  b.wall_time_s = 3.0;
  a.detection = DetectionQuality{1.0, 0.5};
  const std::vector<MetricsReport> both{a, b};
  const MetricsReport m = mean_report(both);
  CHECK(m.unlearned.clean_acc == doctest::Approx(0.7));
  CHECK(m.unlearned.test_acc == doctest::Approx(0.6));
  CHECK(*m.unlearned.poisoned_acc == doctest::Approx(0.3));
  CHECK(m.wall_time_s == doctest::Approx(2.0));
  REQUIRE(m.detection);
  CHECK(m.detection->recall == 0.5);
  CHECK_THROWS(mean_report(std::span<const MetricsReport>{}));
}

TEST_CASE("reference rows") {
  std::size_t ours = 0;
  for (const ReferenceRow& r : reference_rows()) {
    CHECK(r.clean_acc > 0.0);
    if (std::string(r.method) == "Ours") ++ours;
  }
  CHECK(reference_rows().size() == 14);
  CHECK(ours == 2);
}

}  // TEST_SUITE
