#include "unlearnwf/influence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "unlearnwf/parallel.hpp"

namespace unlearnwf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

InfluenceScorer::InfluenceScorer(const ModelState& m, std::span<const Trace> testset,
                                 const InfluenceOptions& opts, std::span<const Trace> hessian_data)
    : model_(&m), opts_(opts) {
  if (testset.empty()) throw std::invalid_argument("influence: empty test set");
  if (opts_.last_layer_only) {
    std::tie(begin_, end_) = m.last_layer_range();
  } else {
    begin_ = 0;
    end_ = m.param_count();
  }
  direction_ = VectorXd::Zero(static_cast<Eigen::Index>(end_ - begin_));
  for (const Trace& t : testset) direction_ += restricted_grad(t);
  if (!direction_.allFinite()) throw std::runtime_error("influence: non-finite test gradient");

  if (opts_.estimator == Estimator::damped_hessian) {
    if (hessian_data.empty()) {
      throw std::invalid_argument("influence: damped_hessian needs training data for H");
    }
    const MatrixXd full = loss_hessian(m, hessian_data);
    const auto b = static_cast<Eigen::Index>(begin_);
    const auto n = static_cast<Eigen::Index>(end_ - begin_);
    MatrixXd h = full.block(b, b, n, n);
    h.diagonal().array() += opts_.damping;
    direction_ = h.colPivHouseholderQr().solve(direction_);
  }
}

VectorXd InfluenceScorer::restricted_grad(const Trace& t) const {
  const VectorXd g = grad(*model_, t);
  return g.segment(static_cast<Eigen::Index>(begin_), static_cast<Eigen::Index>(end_ - begin_));
}

double InfluenceScorer::score(const Trace& z) const {
  const VectorXd g = restricted_grad(z);
  if (!g.allFinite()) throw std::runtime_error("influence: non-finite training gradient");
  return -direction_.dot(g);
}

double influence_score(const ModelState& m, const Trace& z, std::span<const Trace> testset,
                       const InfluenceOptions& opts, std::span<const Trace> hessian_data) {
  return InfluenceScorer(m, testset, opts, hessian_data).score(z);
}

MatrixXd loss_hessian(const ModelState& m, std::span<const Trace> data, double step) {
  const auto k = static_cast<Eigen::Index>(m.param_count());
  MatrixXd h(k, k);
  ModelState probe = m;
  for (Eigen::Index j = 0; j < k; ++j) {
    const double orig = probe.theta()[j];
    probe.theta()[j] = orig + step;
    const VectorXd up = batch_grad(probe, data);
    probe.theta()[j] = orig - step;
    const VectorXd down = batch_grad(probe, data);
    probe.theta()[j] = orig;
    h.col(j) = (up - down) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentConfig::check() const {
  for (double p : {p_insert, p_split, p_merge, p_flip, label_rematch_fraction}) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("augment: probabilities must be in [0,1]");
  }
}

std::size_t AugmentConfig::resolved_ops(std::size_t n) const {
  return ops_per_point > 0 ? ops_per_point : std::max<std::size_t>(4, n / 64);
}

bool apply_augment_op(std::vector<Direction>& raw, AugmentOp op, std::size_t site) {
  if (site >= raw.size()) return false;
  const auto at = raw.begin() + static_cast<std::ptrdiff_t>(site);
  switch (op) {
    case AugmentOp::insert:
      raw.insert(at + 1, *at);
      return true;
    case AugmentOp::split: {
      const auto opposite = static_cast<Direction>(-*at);
      raw.insert(at + 1, opposite);
      return true;
    }
    case AugmentOp::merge:
      if (site + 1 >= raw.size() || raw[site] != raw[site + 1]) return false;
      raw.erase(at + 1);
      return true;
    case AugmentOp::flip:
      *at = static_cast<Direction>(-*at);
      return true;
  }
  return false;
}

Trace augment_test_point(const Trace& z, const AugmentConfig& cfg, int num_labels, Rng& rng) {
  const std::size_t n = z.dirs.size();
  std::vector<Direction> raw(z.dirs.begin(), std::find(z.dirs.begin(), z.dirs.end(), Direction{0}));

  const double probs[4] = {cfg.p_insert, cfg.p_split, cfg.p_merge, cfg.p_flip};
  const double total = probs[0] + probs[1] + probs[2] + probs[3];
  const double norm = total > 1.0 ? total : 1.0;
  const std::size_t draws = cfg.resolved_ops(n);

  for (std::size_t d = 0; d < draws; ++d) {
    const double u = rng.uniform() * norm;
    double acc = 0.0;
    int chosen = -1;
    for (int k = 0; k < 4; ++k) {
      acc += probs[k];
      if (u < acc) {
        chosen = k;
        break;
      }
    }
    if (chosen < 0 || raw.empty()) continue;
    const auto op = static_cast<AugmentOp>(chosen);
    if (op == AugmentOp::merge) {
      std::vector<std::size_t> pairs;
      for (std::size_t i = 0; i + 1 < raw.size(); ++i) {
        if (raw[i] == raw[i + 1]) pairs.push_back(i);
      }
      if (pairs.empty()) continue;
      apply_augment_op(raw, op, pairs[rng.below(pairs.size())]);
    } else {
      apply_augment_op(raw, op, static_cast<std::size_t>(rng.below(raw.size())));
    }
  }

  Trace out{normalize(raw, n), z.label};
  if (num_labels > 1 && rng.bernoulli(cfg.label_rematch_fraction)) {
    auto other = static_cast<Label>(rng.below(static_cast<std::uint64_t>(num_labels - 1)));
    if (other >= z.label) ++other;
    out.label = other;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Thresholds and detection

double calibrate_threshold(std::span<const double> diffs, const ThresholdPolicy& policy) {
  if (policy.kind == ThresholdPolicy::Kind::fixed) return policy.value;
  if (diffs.empty()) throw std::invalid_argument("calibrate_threshold: empty diffs");
  std::vector<double> v;
  v.reserve(diffs.size());
  for (double d : diffs) v.push_back(std::abs(d));
  std::sort(v.begin(), v.end());

  if (policy.kind == ThresholdPolicy::Kind::percentile) {
    if (policy.value < 0.0 || policy.value > 100.0) {
      throw std::invalid_argument("calibrate_threshold: percentile must be in [0,100]");
    }
    const double rank = std::ceil(policy.value / 100.0 * static_cast<double>(v.size()));
    const std::size_t idx = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
    return v[std::min(idx, v.size() - 1)];
  }

  // Otsu: maximize w0 * w1 * (mu0 - mu1)^2 over cut points between distinct values.
  const double n = static_cast<double>(v.size());
  double total = 0.0;
  for (double x : v) total += x;
  double left = 0.0;
  double best = -1.0;
  double threshold = v.back();
  for (std::size_t k = 1; k < v.size(); ++k) {
    left += v[k - 1];
    if (v[k - 1] == v[k]) continue;
    const double w0 = static_cast<double>(k) / n;
    const double w1 = 1.0 - w0;
    const double mu0 = left / static_cast<double>(k);
    const double mu1 = (total - left) / (n - static_cast<double>(k));
    const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (between > best) {
      best = between;
      threshold = 0.5 * (v[k - 1] + v[k]);
    }
  }
  return threshold;
}

double relative_change(double before, double after) {
  const double sign = after < 0.0 ? -1.0 : 1.0;
  return before / (after + kRatioEpsilon * sign) - 1.0;
}

std::vector<std::size_t> InfluenceReport::flags_at(double t) const {
  std::vector<std::size_t> out;
  for (const auto& r : records) {
    if (r.unstable || std::abs(r.diff) > t) out.push_back(r.index);
  }
  std::sort(out.begin(), out.end());
  return out;
}

InfluenceReport detect_poison(const ModelState& m, std::span<const Trace> train,
                              std::span<const std::size_t> train_indices,
                              std::span<const Trace> anomalies, const AugmentConfig& cfg,
                              const ThresholdPolicy& policy, const InfluenceOptions& opts) {
  if (anomalies.empty()) throw std::invalid_argument("detect_poison: empty anomaly set");
  if (train.size() != train_indices.size()) {
    throw std::invalid_argument("detect_poison: train/index size mismatch");
  }
  cfg.check();

  InfluenceReport report;
  Rng rng(cfg.seed);
  const int labels = m.arch().output_dim();
  for (const Trace& z : anomalies) {
    report.augmented_anomalies.push_back(augment_test_point(z, cfg, labels, rng));
  }

  const InfluenceScorer before(m, anomalies, opts, train);
  const InfluenceScorer after(m, report.augmented_anomalies, opts, train);

  report.records.resize(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    InfluenceRecord& r = report.records[i];
    r.index = train_indices[i];
    r.score_before = before.score(train[i]);
    r.score_after = after.score(train[i]);
    r.diff = relative_change(r.score_before, r.score_after);
    r.unstable = std::abs(r.score_after) < kRatioEpsilon;
  });

  std::vector<double> stable;
  for (const auto& r : report.records) {
    if (!r.unstable) stable.push_back(r.diff);
  }
  report.threshold = stable.empty() && policy.kind != ThresholdPolicy::Kind::fixed
                         ? std::numeric_limits<double>::infinity()
                         : calibrate_threshold(stable, policy);
  for (auto& r : report.records) r.flagged = r.unstable || std::abs(r.diff) > report.threshold;
  report.flagged = report.flags_at(report.threshold);
  return report;
}

void save_influence_report(const InfluenceReport& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "index,score_before,score_after,diff,flagged,unstable\n";
  for (const auto& rec : r.records) {
    out << rec.index << ',' << rec.score_before << ',' << rec.score_after << ',' << rec.diff << ','
        << (rec.flagged ? 1 : 0) << ',' << (rec.unstable ? 1 : 0) << '\n';
  }
}

InfluenceReport load_influence_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("influence report not found: " + path.string());
  InfluenceReport r;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string f[6];
    for (auto& x : f) {
      if (!std::getline(ss, x, ',')) throw std::runtime_error(path.string() + ": malformed row");
    }
    InfluenceRecord rec{std::stoul(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]),
                        f[4] == "1", f[5] == "1"};
    if (rec.flagged) r.flagged.push_back(rec.index);
    r.records.push_back(rec);
  }
  std::sort(r.flagged.begin(), r.flagged.end());
  return r;
}

}  // namespace unlearnwf
