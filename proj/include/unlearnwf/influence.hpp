#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "unlearnwf/model.hpp"
#include "unlearnwf/rng.hpp"
#include "unlearnwf/trace.hpp"

namespace unlearnwf {

enum class Estimator {
  grad_dot,        // identity-Hessian approximation
  damped_hessian,  // exact (H + mu I)^-1, small models only
};

struct InfluenceOptions {
  Estimator estimator = Estimator::grad_dot;
  double damping = 0.01;
  /// Restrict gradients to the final dense layer's parameters.
  bool last_layer_only = false;
};

/// Precomputes the test-side vector of an influence query so that scoring
/// each training point costs one gradient and one dot product.
///
/// score(z) = -<v, grad L(z)> with v = sum of test gradients (grad_dot) or
/// v = (H + mu I)^-1 * sum of test gradients (damped_hessian), where H is the
/// Hessian of the mean training loss over `hessian_data`.
class InfluenceScorer {
 public:
  InfluenceScorer(const ModelState& m, std::span<const Trace> testset,
                  const InfluenceOptions& opts = {}, std::span<const Trace> hessian_data = {});

  double score(const Trace& z) const;
  const Eigen::VectorXd& test_direction() const { return direction_; }

 private:
  Eigen::VectorXd restricted_grad(const Trace& t) const;

  const ModelState* model_;
  InfluenceOptions opts_;
  std::size_t begin_ = 0;
  std::size_t end_ = 0;
  Eigen::VectorXd direction_;
};

/// One-shot form of InfluenceScorer::score. Throws on an empty test set.
double influence_score(const ModelState& m, const Trace& z, std::span<const Trace> testset,
                       const InfluenceOptions& opts = {}, std::span<const Trace> hessian_data = {});

/// Hessian of the mean loss over `data`, by central differences of the exact
/// gradient, symmetrized. O(K) gradient passes: small models only.
Eigen::MatrixXd loss_hessian(const ModelState& m, std::span<const Trace> data, double step = 1e-5);

struct AugmentConfig {
  double p_insert = 0.25;
  double p_split = 0.25;
  double p_merge = 0.25;
  double p_flip = 0.25;
  /// Zero resolves to max(4, n/64).
  std::size_t ops_per_point = 0;
  double label_rematch_fraction = 0.5;
  std::uint64_t seed = 0;

  void check() const;
  std::size_t resolved_ops(std::size_t n) const;
};

enum class AugmentOp { insert, split, merge, flip };

/// Applies one edit to the unpadded prefix `raw` at `site`. Merge removes the
/// second cell of the same-direction pair starting at `site`; it is a no-op
/// when that pair does not exist. Returns false for no-ops.
bool apply_augment_op(std::vector<Direction>& raw, AugmentOp op, std::size_t site);

/// Random trace augmentation plus optional label rematch. `num_labels` is the
/// classifier's output dimension.
Trace augment_test_point(const Trace& z, const AugmentConfig& cfg, int num_labels, Rng& rng);

struct ThresholdPolicy {
  enum class Kind { otsu, percentile, fixed };
  Kind kind = Kind::otsu;
  double value = 0.0;  // percentile p in [0,100], or the fixed threshold

  static ThresholdPolicy otsu() { return {Kind::otsu, 0.0}; }
  static ThresholdPolicy percentile(double p) { return {Kind::percentile, p}; }
  static ThresholdPolicy fixed(double v) { return {Kind::fixed, v}; }
};

/// Threshold over |diff|. Otsu maximizes between-class variance and returns
/// the midpoint of the best gap; percentile uses nearest rank.
double calibrate_threshold(std::span<const double> diffs, const ThresholdPolicy& policy);

struct InfluenceRecord {
  std::size_t index = 0;  // dataset index of the training point
  double score_before = 0.0;
  double score_after = 0.0;
  double diff = 0.0;
  bool flagged = false;
  bool unstable = false;
};

struct InfluenceReport {
  std::vector<InfluenceRecord> records;
  double threshold = 0.0;
  std::vector<std::size_t> flagged;  // ascending dataset indices
  std::vector<Trace> augmented_anomalies;

  /// Re-flags against another threshold; unstable ratios stay flagged.
  std::vector<std::size_t> flags_at(double threshold) const;
};

inline constexpr double kRatioEpsilon = 1e-12;

/// Relative influence change score_before / score_after - 1, guarded by
/// kRatioEpsilon in the denominator.
double relative_change(double before, double after);

/// Scores every training point against the anomaly set and its augmented
/// copy (built once per call), then flags |diff| above the calibrated
/// threshold. `train_indices` gives the dataset index of each entry of
/// `train`.
InfluenceReport detect_poison(const ModelState& m, std::span<const Trace> train,
                              std::span<const std::size_t> train_indices,
                              std::span<const Trace> anomalies, const AugmentConfig& cfg,
                              const ThresholdPolicy& policy, const InfluenceOptions& opts = {});

/// CSV: index,score_before,score_after,diff,flagged,unstable
void save_influence_report(const InfluenceReport& r, const std::filesystem::path& path);
InfluenceReport load_influence_report(const std::filesystem::path& path);

}  // namespace unlearnwf
