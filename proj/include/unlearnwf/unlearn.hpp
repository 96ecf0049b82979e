#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unlearnwf/model.hpp"

namespace unlearnwf {

enum class ImportanceSource { retained, forgotten, training };

/// Diagonal of the empirical Fisher information for one dataset.
struct ImportanceVector {
  Eigen::VectorXd values;
  ImportanceSource source = ImportanceSource::training;
  std::size_t sample_count = 0;
};

/// Top-K size: a fraction of K in (0,1], or an absolute count.
struct TopK {
  enum class Kind { fraction, count };
  Kind kind = Kind::fraction;
  double value = 0.02;

  static TopK fraction(double f) { return {Kind::fraction, f}; }
  static TopK count(std::size_t c) { return {Kind::count, static_cast<double>(c)}; }
  std::size_t resolve(std::size_t param_count) const;
};

enum class Ablation { none, no_selection, no_inhibition };

const char* to_string(Ablation a);
Ablation ablation_from_string(const std::string& s);

struct UnlearnConfig {
  TopK k = TopK::fraction(0.02);
  double alpha = 1.0;   // selection gate: imp_fo > alpha * imp_re
  double lambda = 1.0;  // dampening strength
  Ablation ablation = Ablation::none;

  void check() const;
};

inline constexpr double kImportanceEpsilon = 1e-12;

/// Mean squared per-sample gradient, accumulated in sample order.
ImportanceVector fim_diag(const ModelState& m, std::span<const Trace> data,
                          ImportanceSource source = ImportanceSource::training);

/// Sample-weighted mean of the importances of two disjoint sets.
ImportanceVector merge_importance(const ImportanceVector& a, const ImportanceVector& b,
                                  ImportanceSource source);

/// Indices j with imp_fo[j] > alpha * imp_re[j], ranked by
/// imp_fo / (imp_re + eps), best K' returned in ascending index order.
std::vector<std::size_t> select_topk(const ImportanceVector& imp_fo, const ImportanceVector& imp_re,
                                     const UnlearnConfig& cfg);

/// Every index with imp_fo > 0 (the no-selection ablation).
std::vector<std::size_t> select_all_active(const ImportanceVector& imp_fo);

/// beta = min(1, lambda * imp_tr / (imp_fo + eps)).
double dampening_factor(double imp_tr, double imp_fo, double lambda);

/// Scales each selected parameter by its dampening factor (or by zero when
/// `zero_out`). Everything else is copied bit-for-bit.
ModelState dampen(const ModelState& m, std::span<const std::size_t> selected,
                  const ImportanceVector& imp_fo, const ImportanceVector& imp_tr, double lambda,
                  bool zero_out = false);

struct UnlearnResult {
  ModelState model;
  ImportanceVector imp_re;
  ImportanceVector imp_fo;
  ImportanceVector imp_tr;
  std::vector<std::size_t> selected;
  std::vector<double> beta;  // per selected index
};

/// Fisher-guided Top-K dampening. No optimizer steps are taken. An empty
/// forget set returns the input model unchanged; an empty retain set throws.
UnlearnResult unlearn(const ModelState& m, std::span<const Trace> retained,
                      std::span<const Trace> forgotten, const UnlearnConfig& cfg);

/// CSV: index,imp_re,imp_fo,imp_tr,selected,beta
void save_unlearn_audit(const UnlearnResult& r, const std::filesystem::path& path);

}  // namespace unlearnwf
