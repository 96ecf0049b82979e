#include "unlearnwf/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "unlearnwf/parallel.hpp"

namespace unlearnwf {

using Eigen::VectorXd;

std::size_t TopK::resolve(std::size_t param_count) const {
  if (kind == Kind::count) return static_cast<std::size_t>(value);
  return static_cast<std::size_t>(std::floor(value * static_cast<double>(param_count) + 1e-9));
}

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_selection: return "no_selection";
    case Ablation::no_inhibition: return "no_inhibition";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "no_selection") return Ablation::no_selection;
  if (s == "no_inhibition") return Ablation::no_inhibition;
  throw std::invalid_argument("unknown ablation '" + s + "'");
}

void UnlearnConfig::check() const {
  if (k.kind == TopK::Kind::fraction && !(k.value >= 0.0 && k.value <= 1.0)) {
    throw std::invalid_argument("unlearn: k fraction must be in [0,1]");
  }
  if (k.value < 0.0) throw std::invalid_argument("unlearn: k must be non-negative");
  if (!(alpha >= 0.0)) throw std::invalid_argument("unlearn: alpha must be >= 0");
  if (!(lambda > 0.0)) throw std::invalid_argument("unlearn: lambda must be > 0");
}

ImportanceVector fim_diag(const ModelState& m, std::span<const Trace> data, ImportanceSource source) {
  if (data.empty()) throw std::invalid_argument("fim_diag: empty data");
  const auto k = static_cast<Eigen::Index>(m.param_count());
  // Per-sample squares go to fixed slots, then reduce in index order so
  // the sum does not depend on the worker count.
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (data.size() + kChunk - 1) / kChunk;
  std::vector<VectorXd> partial(chunks, VectorXd::Zero(k));
  parallel_for(chunks, [&](std::size_t c) {
    VectorXd g(k);
    const std::size_t end = std::min(data.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      g.setZero();
      accumulate_grad(m, data[i], g);
      partial[c].array() += g.array().square();
    }
  });
  VectorXd sum = VectorXd::Zero(k);
  for (const auto& p : partial) sum += p;
  if (!sum.allFinite()) throw std::runtime_error("fim_diag: non-finite gradient");
  return {sum / static_cast<double>(data.size()), source, data.size()};
}

ImportanceVector merge_importance(const ImportanceVector& a, const ImportanceVector& b,
                                  ImportanceSource source) {
  const double na = static_cast<double>(a.sample_count);
  const double nb = static_cast<double>(b.sample_count);
  if (na + nb == 0.0) throw std::invalid_argument("merge_importance: no samples");
  return {(na * a.values + nb * b.values) / (na + nb), source, a.sample_count + b.sample_count};
}

std::vector<std::size_t> select_topk(const ImportanceVector& imp_fo, const ImportanceVector& imp_re,
                                     const UnlearnConfig& cfg) {
  const auto k = static_cast<std::size_t>(imp_fo.values.size());
  if (static_cast<std::size_t>(imp_re.values.size()) != k) {
    throw std::invalid_argument("select_topk: importance length mismatch");
  }
  std::vector<std::size_t> eligible;
  for (std::size_t j = 0; j < k; ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    if (imp_fo.values[i] > cfg.alpha * imp_re.values[i]) eligible.push_back(j);
  }
  const std::size_t take = std::min(cfg.k.resolve(k), eligible.size());
  auto ratio = [&](std::size_t j) {
    const auto i = static_cast<Eigen::Index>(j);
    return imp_fo.values[i] / (imp_re.values[i] + kImportanceEpsilon);
  };
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) { return ratio(a) > ratio(b); });
  eligible.resize(take);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

std::vector<std::size_t> select_all_active(const ImportanceVector& imp_fo) {
  std::vector<std::size_t> out;
  for (Eigen::Index j = 0; j < imp_fo.values.size(); ++j) {
    if (imp_fo.values[j] > 0.0) out.push_back(static_cast<std::size_t>(j));
  }
  return out;
}

double dampening_factor(double imp_tr, double imp_fo, double lambda) {
  return std::min(1.0, lambda * imp_tr / (imp_fo + kImportanceEpsilon));
}

ModelState dampen(const ModelState& m, std::span<const std::size_t> selected,
                  const ImportanceVector& imp_fo, const ImportanceVector& imp_tr, double lambda,
                  bool zero_out) {
  ModelState out = m;
  for (std::size_t j : selected) {
    if (j >= m.param_count()) throw std::out_of_range("dampen: index outside theta");
    const auto i = static_cast<Eigen::Index>(j);
    const double beta = zero_out ? 0.0 : dampening_factor(imp_tr.values[i], imp_fo.values[i], lambda);
    out.theta()[i] = beta * m.theta()[i];
  }
  return out;
}

UnlearnResult unlearn(const ModelState& m, std::span<const Trace> retained,
                      std::span<const Trace> forgotten, const UnlearnConfig& cfg) {
  cfg.check();
  if (retained.empty()) throw std::invalid_argument("unlearn: empty retain set");
  if (forgotten.empty()) {
    return {m, {}, {}, {}, {}, {}};
  }
  UnlearnResult r{m, fim_diag(m, retained, ImportanceSource::retained),
                  fim_diag(m, forgotten, ImportanceSource::forgotten), {}, {}, {}};
  // D_tr = D_re + D_fo, so its importance follows without a third pass.
  r.imp_tr = merge_importance(r.imp_re, r.imp_fo, ImportanceSource::training);

  r.selected = cfg.ablation == Ablation::no_selection ? select_all_active(r.imp_fo)
                                                      : select_topk(r.imp_fo, r.imp_re, cfg);
  const bool zero_out = cfg.ablation == Ablation::no_inhibition;
  r.model = dampen(m, r.selected, r.imp_fo, r.imp_tr, cfg.lambda, zero_out);
  r.beta.reserve(r.selected.size());
  for (std::size_t j : r.selected) {
    const auto i = static_cast<Eigen::Index>(j);
    r.beta.push_back(zero_out ? 0.0 : dampening_factor(r.imp_tr.values[i], r.imp_fo.values[i], cfg.lambda));
  }
  return r;
}

void save_unlearn_audit(const UnlearnResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "index,imp_re,imp_fo,imp_tr,selected,beta\n";
  const auto k = r.imp_fo.values.size();
  std::size_t s = 0;
  for (Eigen::Index j = 0; j < k; ++j) {
    const bool sel = s < r.selected.size() && r.selected[s] == static_cast<std::size_t>(j);
    out << j << ',' << r.imp_re.values[j] << ',' << r.imp_fo.values[j] << ',' << r.imp_tr.values[j]
        << ',' << (sel ? 1 : 0) << ',' << (sel ? r.beta[s] : 1.0) << '\n';
    if (sel) ++s;
  }
}

}  // namespace unlearnwf
