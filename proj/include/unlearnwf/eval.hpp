#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unlearnwf/influence.hpp"
#include "unlearnwf/model.hpp"
#include "unlearnwf/poison.hpp"
#include "unlearnwf/trace.hpp"
#include "unlearnwf/unlearn.hpp"

namespace unlearnwf {

enum class World { closed, open };

/// Which label the anomaly set carries for each known-bad test point.
enum class AnomalyLabel {
  original,   // the correct website label the model failed to output
  predicted,  // the label the poisoned model actually output
};

struct DataConfig {
  /// Trace file; empty means generate the synthetic corpus.
  std::string path;
  SynthSpec synth;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
};

struct PoisonConfig {
  std::vector<Direction> pattern = TriggerSpec::standard().pattern();
  /// Empty means a uniformly random offset per trace.
  std::optional<std::size_t> offset = 8;
  /// Absolute poison count; when empty, `fraction` of the train split.
  std::optional<std::size_t> count;
  double fraction = 0.05;
  TargetMode mode = TargetMode::all_to_one;
  Label target_label = 0;

  TriggerSpec trigger() const { return TriggerSpec(pattern, offset); }
};

struct DetectConfig {
  std::size_t anomaly_count = 30;
  AnomalyLabel anomaly_label = AnomalyLabel::predicted;
  ThresholdPolicy threshold = ThresholdPolicy::otsu();
  Estimator estimator = Estimator::grad_dot;
  double damping = 0.01;
  /// Empty: final-layer gradients only when the train split exceeds 10^4.
  std::optional<bool> last_layer_only;
  /// Use the ground-truth poisoned set as D_fo instead of running detection.
  bool oracle_forget_set = false;
};

/// Seeds for every randomized stage, derived from one master seed unless
/// individually overridden.
struct Seeds {
  std::uint64_t master = 1;
  std::optional<std::uint64_t> data, split, poison, init, train, anomaly, augment, mix;

  std::uint64_t get(const std::optional<std::uint64_t>& override_seed, const char* label) const;
  std::uint64_t data_seed() const { return get(data, "data"); }
  std::uint64_t split_seed() const { return get(split, "split"); }
  std::uint64_t poison_seed() const { return get(poison, "poison"); }
  std::uint64_t init_seed() const { return get(init, "init"); }
  std::uint64_t train_seed() const { return get(train, "train"); }
  std::uint64_t anomaly_seed() const { return get(anomaly, "anomaly"); }
  std::uint64_t augment_seed() const { return get(augment, "augment"); }
  std::uint64_t mix_seed() const { return get(mix, "mix"); }

  /// Drops all per-stage overrides so everything follows `master`.
  void reset_to(std::uint64_t master_seed);
};

struct ExperimentConfig {
  World world = World::closed;
  DataConfig data;
  /// Empty selects the standard architecture for the corpus.
  std::string layers;
  PoisonConfig poison;
  TrainConfig train;
  AugmentConfig augment;
  DetectConfig detect;
  UnlearnConfig unlearn;
  /// Share of the mixed test set that carries the trigger.
  double triggered_fraction = 0.5;
  Seeds seeds;

  /// Throws std::invalid_argument when components disagree.
  void check() const;
};

/// Defaults for a world: open world adds 20 background sites and trains
/// longer (the corpus doubles and gains a heterogeneous background class).
ExperimentConfig default_config(World world);

struct Metrics {
  /// Accuracy on triggered test traces against their original labels;
  /// absent when no triggered samples exist.
  std::optional<double> poisoned_acc;
  double clean_acc = 0.0;
  double test_acc = 0.0;
  std::size_t correct_triggered = 0;
  std::size_t correct_clean = 0;
  std::size_t mixed_total = 0;
};

struct DetectionQuality {
  double precision = 1.0;
  double recall = 1.0;
};

struct MetricsReport {
  Metrics unlearned;
  Metrics baseline_no_unlearn;
  /// Training through final metrics (sum of the stage times).
  double wall_time_s = 0.0;
  std::optional<DetectionQuality> detection;
  std::size_t anomaly_requested = 0;
  std::size_t anomaly_actual = 0;
  std::size_t flagged_count = 0;
  std::size_t poisoned_count = 0;
  std::size_t selected_count = 0;
  Ablation ablation = Ablation::none;
  World world = World::closed;
  std::uint64_t config_hash = 0;
  Seeds seeds;
};

/// Stage timings in seconds; kept out of the report so reports stay
/// byte-comparable across runs.
struct StageTimes {
  double train_s = 0.0;
  double detect_s = 0.0;
  double unlearn_s = 0.0;
  double evaluate_s = 0.0;
};

/// Fraction of samples whose prediction equals the reference label.
double accuracy(const ModelState& m, std::span<const Trace> samples);

/// Both-empty counts as perfect; empty flags against a non-empty truth
/// scores zero precision.
DetectionQuality detection_quality(std::span<const std::size_t> flagged,
                                   std::span<const std::size_t> truth);

/// Evaluation sets built from the test split.
struct TestSets {
  std::vector<Trace> clean;      // D_te
  std::vector<Trace> triggered;  // D'_te, original labels
  std::vector<Trace> mixed;      // triggered_fraction of D_te triggered, rest clean
  std::vector<bool> mixed_is_triggered;
};

TestSets build_test_sets(const Dataset& ds, const ExperimentConfig& cfg, bool poisoning_active);

Metrics evaluate(const ModelState& m, const TestSets& sets);

/// Up to `count` triggered test points the model mispredicts, in seeded
/// random order, labeled per `label_mode`.
std::vector<Trace> build_anomaly_set(const ModelState& m, const Dataset& ds,
                                     const TriggerSpec& trigger, std::size_t count,
                                     AnomalyLabel label_mode, std::uint64_t seed);

/// Everything one experiment produces, for the CLI to persist.
struct ExperimentArtifacts {
  Dataset clean_dataset;
  PoisonOutcome poisoned;
  ModelState poisoned_model;
  std::vector<Trace> anomalies;
  std::optional<InfluenceReport> influence;
  std::vector<std::size_t> forget_indices;
  UnlearnResult unlearned;
  MetricsReport report;
  StageTimes times;
};

/// Dataset with split roles, before poisoning.
Dataset prepare_data(const ExperimentConfig& cfg);
PoisonOutcome apply_poison(const Dataset& ds, const ExperimentConfig& cfg);
Architecture architecture_for(const ExperimentConfig& cfg, const Dataset& ds);
ModelState train_poisoned(const Dataset& poisoned, const ExperimentConfig& cfg);
InfluenceOptions influence_options(const ExperimentConfig& cfg, std::size_t train_size);

/// Runs D_fo detection (or takes the oracle set) on the train split.
std::vector<std::size_t> run_detection(const ModelState& m, const PoisonOutcome& poisoned,
                                       std::span<const Trace> anomalies,
                                       const ExperimentConfig& cfg,
                                       std::optional<InfluenceReport>* report_out = nullptr);

UnlearnResult run_unlearning(const ModelState& m, const Dataset& poisoned,
                             std::span<const std::size_t> forget, const ExperimentConfig& cfg);

/// Full pipeline: data, poisoning, training, anomaly set, detection,
/// unlearning, and metrics for both the unlearned and the poisoned model.
ExperimentArtifacts run_experiment_full(const ExperimentConfig& cfg);
MetricsReport run_experiment(const ExperimentConfig& cfg);

/// Reuses data, model and forget set from `base`; redoes unlearning and
/// metrics under `cfg` (typically a different ablation). wall_time_s still
/// counts the reused training and detection stages.
ExperimentArtifacts rerun_unlearning(const ExperimentArtifacts& base, const ExperimentConfig& cfg);

/// Same as run_experiment with `ablation` forced. Throws for Ablation::none.
MetricsReport run_ablation(ExperimentConfig cfg, Ablation ablation);

/// Trains a fresh model on `retained` only with the experiment's train
/// config and seeds; wall_time_s covers that training.
MetricsReport retrain_oracle(const ExperimentConfig& cfg, const Dataset& poisoned,
                             std::span<const std::size_t> retained, ModelState* model_out = nullptr);

/// Element-wise mean over per-seed reports (counts from the first).
MetricsReport mean_report(std::span<const MetricsReport> reports);

/// Reference rows from the published evaluation, for the text tables.
struct ReferenceRow {
  const char* setting;
  const char* method;
  double poisoned_acc, clean_acc, test_acc, time_s;
};
std::span<const ReferenceRow> reference_rows();

}  // namespace unlearnwf
