#include "unlearnwf/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "unlearnwf/config.hpp"
#include "unlearnwf/log.hpp"
#include "unlearnwf/rng.hpp"

namespace unlearnwf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::size_t> set_difference(std::span<const std::size_t> all,
                                        std::span<const std::size_t> remove) {
  std::vector<std::size_t> sorted_remove(remove.begin(), remove.end());
  std::sort(sorted_remove.begin(), sorted_remove.end());
  std::vector<std::size_t> out;
  for (std::size_t i : all) {
    if (!std::binary_search(sorted_remove.begin(), sorted_remove.end(), i)) out.push_back(i);
  }
  return out;
}

}  // namespace

std::uint64_t Seeds::get(const std::optional<std::uint64_t>& override_seed, const char* label) const {
  return override_seed ? *override_seed : substream(master, label);
}

void Seeds::reset_to(std::uint64_t master_seed) {
  *this = Seeds{};
  master = master_seed;
}

ExperimentConfig default_config(World world) {
  ExperimentConfig cfg;
  cfg.world = world;
  if (world == World::open) {
    cfg.data.synth.background_sites = 20;
    cfg.train.epochs = 100;
  }
  return cfg;
}

void ExperimentConfig::check() const {
  const bool has_background = data.synth.background_sites > 0;
  if (data.path.empty()) {
    data.synth.check();
    if (world == World::closed && has_background) {
      throw std::invalid_argument("closed world cannot have background sites");
    }
    if (world == World::open && !has_background) {
      throw std::invalid_argument("open world needs background_sites > 0");
    }
  }
  const TriggerSpec trig = poison.trigger();
  trig.check_fits(data.synth.length);
  if (poison.fraction < 0.0 || poison.fraction > 1.0) {
    throw std::invalid_argument("poison.fraction must be in [0,1]");
  }
  const int labels = data.synth.sites + (world == World::open ? 1 : 0);
  if (poison.mode == TargetMode::all_to_one &&
      (poison.target_label < 0 || poison.target_label >= labels)) {
    throw std::invalid_argument("poison.target_label out of range");
  }
  if (triggered_fraction < 0.0 || triggered_fraction > 1.0) {
    throw std::invalid_argument("eval.triggered_fraction must be in [0,1]");
  }
  train.check();
  augment.check();
  unlearn.check();
}

// ---------------------------------------------------------------------------
// Metrics

double accuracy(const ModelState& m, std::span<const Trace> samples) {
  if (samples.empty()) throw std::invalid_argument("accuracy: empty sample list");
  std::size_t correct = 0;
  for (const Trace& t : samples) correct += predict(m, t) == t.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

DetectionQuality detection_quality(std::span<const std::size_t> flagged,
                                   std::span<const std::size_t> truth) {
  std::vector<std::size_t> f(flagged.begin(), flagged.end());
  std::vector<std::size_t> t(truth.begin(), truth.end());
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  std::vector<std::size_t> both;
  std::set_intersection(f.begin(), f.end(), t.begin(), t.end(), std::back_inserter(both));
  const double hit = static_cast<double>(both.size());
  DetectionQuality q;
  if (f.empty()) {
    q.precision = t.empty() ? 1.0 : 0.0;
  } else {
    q.precision = hit / static_cast<double>(f.size());
  }
  if (t.empty()) {
    q.recall = f.empty() ? 1.0 : 0.0;
  } else {
    q.recall = hit / static_cast<double>(t.size());
  }
  return q;
}

TestSets build_test_sets(const Dataset& ds, const ExperimentConfig& cfg, bool poisoning_active) {
  TestSets sets;
  sets.clean = ds.select(Split::test);
  if (!poisoning_active) {
    sets.mixed = sets.clean;
    sets.mixed_is_triggered.assign(sets.mixed.size(), false);
    return sets;
  }
  const TriggerSpec trig = cfg.poison.trigger();
  const std::uint64_t seed = cfg.seeds.mix_seed();
  sets.triggered = poison_test_set(sets.clean, trig, substream(seed, "trigger"));

  std::vector<std::size_t> order(sets.clean.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(substream(seed, "mix"));
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_trig = static_cast<std::size_t>(
      std::floor(cfg.triggered_fraction * static_cast<double>(order.size()) + 1e-9));
  std::vector<bool> is_trig(order.size(), false);
  for (std::size_t k = 0; k < n_trig; ++k) is_trig[order[k]] = true;
  for (std::size_t i = 0; i < sets.clean.size(); ++i) {
    sets.mixed.push_back(is_trig[i] ? sets.triggered[i] : sets.clean[i]);
    sets.mixed_is_triggered.push_back(is_trig[i]);
  }
  return sets;
}

Metrics evaluate(const ModelState& m, const TestSets& sets) {
  Metrics out;
  out.clean_acc = accuracy(m, sets.clean);
  if (!sets.triggered.empty()) out.poisoned_acc = accuracy(m, sets.triggered);
  out.mixed_total = sets.mixed.size();
  for (std::size_t i = 0; i < sets.mixed.size(); ++i) {
    if (predict(m, sets.mixed[i]) != sets.mixed[i].label) continue;
    if (sets.mixed_is_triggered[i]) {
      ++out.correct_triggered;
    } else {
      ++out.correct_clean;
    }
  }
  out.test_acc = out.mixed_total == 0
                     ? 0.0
                     : static_cast<double>(out.correct_triggered + out.correct_clean) /
                           static_cast<double>(out.mixed_total);
  return out;
}

std::vector<Trace> build_anomaly_set(const ModelState& m, const Dataset& ds,
                                     const TriggerSpec& trigger, std::size_t count,
                                     AnomalyLabel label_mode, std::uint64_t seed) {
  std::vector<std::size_t> pool = ds.indices(Split::test);
  Rng rng(substream(seed, "order"));
  rng.shuffle(std::span<std::size_t>(pool));
  const std::uint64_t inject_seed = substream(seed, "inject");
  std::vector<Trace> out;
  for (std::size_t i : pool) {
    if (out.size() >= count) break;
    Trace t = inject_trigger(ds.traces[i], trigger, substream(inject_seed, static_cast<std::uint64_t>(i)));
    const Label observed = predict(m, t);
    if (observed == t.label) continue;
    if (label_mode == AnomalyLabel::predicted) t.label = observed;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages

Dataset prepare_data(const ExperimentConfig& cfg) {
  Dataset ds;
  if (!cfg.data.path.empty()) {
    ds = load_dataset(cfg.data.path, cfg.data.synth.length, cfg.data.synth.sites,
                      cfg.world == World::open);
  } else {
    ds = generate_synthetic(cfg.data.synth, cfg.seeds.data_seed());
  }
  return split(std::move(ds), cfg.data.fractions, cfg.seeds.split_seed());
}

PoisonOutcome apply_poison(const Dataset& ds, const ExperimentConfig& cfg) {
  PoisonPlan plan;
  plan.trigger = cfg.poison.trigger();
  const std::size_t train_size = ds.indices(Split::train).size();
  plan.count = cfg.poison.count
                   ? *cfg.poison.count
                   : static_cast<std::size_t>(
                         std::llround(cfg.poison.fraction * static_cast<double>(train_size)));
  plan.mode = cfg.poison.mode;
  plan.target_label = cfg.poison.target_label;
  plan.seed = cfg.seeds.poison_seed();
  return poison_dataset(ds, plan);
}

Architecture architecture_for(const ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.layers.empty()) return Architecture::standard(ds.length, ds.output_dim());
  Architecture arch{ds.length, Architecture::parse_layers(cfg.layers)};
  if (arch.output_dim() != ds.output_dim()) {
    throw ShapeError("architecture outputs " + std::to_string(arch.output_dim()) +
                     " labels, dataset has " + std::to_string(ds.output_dim()));
  }
  return arch;
}

ModelState train_poisoned(const Dataset& poisoned, const ExperimentConfig& cfg) {
  const ModelState init = init_model(architecture_for(cfg, poisoned), cfg.seeds.init_seed());
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seeds.train_seed();
  return train(init, poisoned.select(Split::train), tc);
}

InfluenceOptions influence_options(const ExperimentConfig& cfg, std::size_t train_size) {
  InfluenceOptions opts;
  opts.estimator = cfg.detect.estimator;
  opts.damping = cfg.detect.damping;
  opts.last_layer_only = cfg.detect.last_layer_only.value_or(train_size > 10000);
  return opts;
}

std::vector<std::size_t> run_detection(const ModelState& m, const PoisonOutcome& poisoned,
                                       std::span<const Trace> anomalies,
                                       const ExperimentConfig& cfg,
                                       std::optional<InfluenceReport>* report_out) {
  if (cfg.detect.oracle_forget_set) return poisoned.poisoned_indices;
  if (anomalies.empty()) {
    log::info("no anomalous test points; detection skipped");
    return {};
  }
  const std::vector<std::size_t> train_idx = poisoned.dataset.indices(Split::train);
  const std::vector<Trace> train = poisoned.dataset.select(train_idx);
  AugmentConfig aug = cfg.augment;
  aug.seed = cfg.seeds.augment_seed();
  InfluenceReport rep = detect_poison(m, train, train_idx, anomalies, aug, cfg.detect.threshold,
                                      influence_options(cfg, train.size()));
  std::vector<std::size_t> flagged = rep.flagged;
  if (report_out) *report_out = std::move(rep);
  return flagged;
}

UnlearnResult run_unlearning(const ModelState& m, const Dataset& poisoned,
                             std::span<const std::size_t> forget, const ExperimentConfig& cfg) {
  const std::vector<std::size_t> train_idx = poisoned.indices(Split::train);
  const std::vector<std::size_t> retain_idx = set_difference(train_idx, forget);
  const std::vector<Trace> retained = poisoned.select(retain_idx);
  const std::vector<Trace> forgotten = poisoned.select(forget);
  return unlearn(m, retained, forgotten, cfg.unlearn);
}

namespace {

// Unlearning, metrics and report fields for artifacts that already carry a
// trained model and a forget set.
void finish_experiment(ExperimentArtifacts& art, const ExperimentConfig& cfg) {
  auto stage = Clock::now();
  art.unlearned = run_unlearning(art.poisoned_model, art.poisoned.dataset, art.forget_indices, cfg);
  art.times.unlearn_s = seconds_since(stage);

  stage = Clock::now();
  const bool active = !art.poisoned.poisoned_indices.empty();
  const TestSets sets = build_test_sets(art.clean_dataset, cfg, active);
  MetricsReport& rep = art.report;
  rep.unlearned = evaluate(art.unlearned.model, sets);
  art.times.evaluate_s = seconds_since(stage);
  rep.wall_time_s = art.times.train_s + art.times.detect_s + art.times.unlearn_s + art.times.evaluate_s;
  rep.baseline_no_unlearn = evaluate(art.poisoned_model, sets);

  rep.detection.reset();
  if (active && (art.influence || cfg.detect.oracle_forget_set)) {
    rep.detection = detection_quality(art.forget_indices, art.poisoned.poisoned_indices);
  }
  rep.anomaly_requested = active ? cfg.detect.anomaly_count : 0;
  rep.anomaly_actual = art.anomalies.size();
  rep.flagged_count = art.forget_indices.size();
  rep.poisoned_count = art.poisoned.poisoned_indices.size();
  rep.selected_count = art.unlearned.selected.size();
  rep.ablation = cfg.unlearn.ablation;
  rep.world = cfg.world;
  rep.config_hash = config_hash(cfg);
  rep.seeds = cfg.seeds;
}

}  // namespace

ExperimentArtifacts run_experiment_full(const ExperimentConfig& cfg) {
  cfg.check();
  ExperimentArtifacts art;
  art.clean_dataset = prepare_data(cfg);
  art.poisoned = apply_poison(art.clean_dataset, cfg);
  const bool active = !art.poisoned.poisoned_indices.empty();
  log::info("data ready: ", art.clean_dataset.size(), " traces, ",
            art.poisoned.poisoned_indices.size(), " poisoned");

  auto stage = Clock::now();
  art.poisoned_model = train_poisoned(art.poisoned.dataset, cfg);
  art.times.train_s = seconds_since(stage);
  log::info("trained poisoned model in ", art.times.train_s, " s");

  stage = Clock::now();
  if (active) {
    art.anomalies = build_anomaly_set(art.poisoned_model, art.clean_dataset, cfg.poison.trigger(),
                                      cfg.detect.anomaly_count, cfg.detect.anomaly_label,
                                      cfg.seeds.anomaly_seed());
    if (art.anomalies.size() < cfg.detect.anomaly_count) {
      log::warn("only ", art.anomalies.size(), " of ", cfg.detect.anomaly_count,
                " requested anomalous test points available");
    }
  }
  art.forget_indices = run_detection(art.poisoned_model, art.poisoned, art.anomalies, cfg,
                                     &art.influence);
  art.times.detect_s = seconds_since(stage);
  log::info("forget set: ", art.forget_indices.size(), " points");

  finish_experiment(art, cfg);
  return art;
}

ExperimentArtifacts rerun_unlearning(const ExperimentArtifacts& base, const ExperimentConfig& cfg) {
  cfg.check();
  ExperimentArtifacts art = base;
  finish_experiment(art, cfg);
  return art;
}

MetricsReport run_experiment(const ExperimentConfig& cfg) { return run_experiment_full(cfg).report; }

MetricsReport run_ablation(ExperimentConfig cfg, Ablation ablation) {
  if (ablation == Ablation::none) throw std::invalid_argument("run_ablation: ablation must be set");
  cfg.unlearn.ablation = ablation;
  return run_experiment(cfg);
}

MetricsReport retrain_oracle(const ExperimentConfig& cfg, const Dataset& poisoned,
                             std::span<const std::size_t> retained, ModelState* model_out) {
  if (retained.empty()) throw std::invalid_argument("retrain_oracle: empty retain set");
  const auto start = Clock::now();
  const ModelState init = init_model(architecture_for(cfg, poisoned), cfg.seeds.init_seed());
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seeds.train_seed();
  const ModelState model = train(init, poisoned.select(retained), tc);

  MetricsReport rep;
  const bool active = std::any_of(poisoned.roles.begin(), poisoned.roles.end(),
                                  [](const Role& r) { return r.is_poisoned_truth; });
  // Test traces are never poisoned, so the poisoned dataset serves for evaluation.
  const TestSets sets = build_test_sets(poisoned, cfg, active);
  rep.unlearned = evaluate(model, sets);
  rep.wall_time_s = seconds_since(start);
  rep.world = cfg.world;
  rep.config_hash = config_hash(cfg);
  rep.seeds = cfg.seeds;
  if (model_out) *model_out = model;
  return rep;
}

MetricsReport mean_report(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw std::invalid_argument("mean_report: no reports");
  MetricsReport out = reports.front();
  const double n = static_cast<double>(reports.size());
  auto mean_metrics = [&](auto member) {
    Metrics m = reports.front().*member;
    double clean = 0, test = 0, pois = 0;
    std::size_t pois_n = 0;
    for (const auto& r : reports) {
      const Metrics& x = r.*member;
      clean += x.clean_acc;
      test += x.test_acc;
      if (x.poisoned_acc) {
        pois += *x.poisoned_acc;
        ++pois_n;
      }
    }
    m.clean_acc = clean / n;
    m.test_acc = test / n;
    m.poisoned_acc = pois_n ? std::optional<double>(pois / static_cast<double>(pois_n)) : std::nullopt;
    return m;
  };
  out.unlearned = mean_metrics(&MetricsReport::unlearned);
  out.baseline_no_unlearn = mean_metrics(&MetricsReport::baseline_no_unlearn);
  double wall = 0;
  double prec = 0, rec = 0;
  std::size_t det_n = 0;
  for (const auto& r : reports) {
    wall += r.wall_time_s;
    if (r.detection) {
      prec += r.detection->precision;
      rec += r.detection->recall;
      ++det_n;
    }
  }
  out.wall_time_s = wall / n;
  if (det_n) {
    out.detection = DetectionQuality{prec / static_cast<double>(det_n), rec / static_cast<double>(det_n)};
  }
  return out;
}

std::span<const ReferenceRow> reference_rows() {
  // Published full-scale numbers (accuracy in percent, time in seconds).
  static constexpr ReferenceRow rows[] = {
      {"CW", "DF", 3.84, 99.34, 12.4, 715.23},
      {"CW", "TF", 1.86, 99.15, 0.52, 868.43},
      {"CW", "AWF", 8.02, 96.56, 44.72, 678.24},
      {"CW", "Ours", 87.03, 96.26, 83.24, 297.53},
      {"OW", "DF", 0.94, 98.87, 4.10, 1143.45},
      {"OW", "TF", 0.54, 98.02, 0.78, 1447.77},
      {"OW", "AWF", 4.84, 96.06, 39.22, 1054.00},
      {"OW", "Ours", 83.80, 94.82, 79.48, 434.47},
      {"CW ablation", "Without selection", 72.36, 90.01, 70.12, 10.69},
      {"CW ablation", "Without inhibition", 82.32, 94.28, 79.24, 10.70},
      {"CW ablation", "Baseline", 86.83, 95.85, 83.02, 10.60},
      {"OW ablation", "Without selection", 26.24, 69.48, 26.17, 18.03},
      {"OW ablation", "Without inhibition", 67.12, 91.73, 65.61, 18.30},
      {"OW ablation", "Baseline", 83.88, 94.98, 79.93, 18.42},
  };
  return rows;
}

}  // namespace unlearnwf
