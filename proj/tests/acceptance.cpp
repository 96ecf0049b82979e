// Acceptance run: one PASS/FAIL line per criterion on the default desk
// configuration (20 sites, 200 traces/site, 512 cells, 5% poison, 30
// anomalous test points, seeds 1-3). Exit status is nonzero on any FAIL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "unlearnwf/eval.hpp"

using namespace unlearnwf;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void verdict(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s  %2d  %-28s %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void info(const std::string& line) {
  std::printf("          %s\n", line.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

ExperimentConfig desk_config(World world, std::uint64_t seed) {
  ExperimentConfig cfg = default_config(world);
  cfg.seeds.reset_to(seed);
  return cfg;
}

struct SeedRun {
  ExperimentArtifacts detected;
  ExperimentArtifacts oracle;  // same model, ground-truth forget set
};

SeedRun run_seed(World world, std::uint64_t seed) {
  ExperimentConfig cfg = desk_config(world, seed);
  SeedRun r;
  if (world == World::closed) {
    r.detected = run_experiment_full(cfg);
    ExperimentArtifacts base = r.detected;
    base.forget_indices = base.poisoned.poisoned_indices;
    cfg.detect.oracle_forget_set = true;
    r.oracle = rerun_unlearning(base, cfg);
  } else {
    cfg.detect.oracle_forget_set = true;
    r.oracle = run_experiment_full(cfg);
  }
  return r;
}

double triggered(const Metrics& m) { return m.poisoned_acc.value_or(0.0); }

std::string strip_wall_time(const fs::path& p) {
  std::ifstream in(p);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.find("\"wall_time_s\"") == std::string::npos) out += line + "\n";
  }
  return out;
}

}  // namespace

int main() {
  std::printf("acceptance: default desk configuration, seeds 1 2 3\n");

  // --- closed-world runs shared by criteria 1, 2, 4, 5, 6, 9 and 11
  std::vector<SeedRun> cw;
  for (std::uint64_t s : kSeeds) {
    const auto t = Clock::now();
    cw.push_back(run_seed(World::closed, s));
    info(fmt("closed world seed %llu finished in %.1f s", static_cast<unsigned long long>(s), since(t)));
  }
  const ModelState& trained = cw.front().detected.poisoned_model;
  const std::vector<Trace> train1 = cw.front().detected.poisoned.dataset.select(Split::train);

  // 1. Gradients against central differences on the trained default model.
  {
    const auto t = Clock::now();
    double worst = 0.0;
    std::size_t coords = 0;
    const std::vector<Trace> test = cw.front().detected.clean_dataset.select(Split::test);
    for (std::size_t i = 0; i < 3; ++i) {
      const oracle::FdResult r = oracle::finite_difference_check(trained, test[i], 20, 100 + i, 1e-4);
      worst = std::max(worst, r.max_rel_error);
      coords += r.checked;
    }
    const double secs = since(t);
    verdict(1, "gradient correctness", worst < 1e-4 && secs < 10.0,
            fmt("max rel err %.2e over %zu coords (20 per segment, 3 traces), %.2f s", worst, coords, secs));
  }

  // 2. Fisher diagonal against the per-sample brute force.
  {
    const std::span<const Trace> slice(train1.data(), 200);
    const Eigen::VectorXd fast = fim_diag(trained, slice).values;
    const double err = (fast - oracle::brute_force_fim(trained, slice)).cwiseAbs().maxCoeff();
    const std::span<const Trace> a(train1.data(), 80);
    const std::span<const Trace> b(train1.data() + 80, 120);
    const ImportanceVector merged =
        merge_importance(fim_diag(trained, a), fim_diag(trained, b), ImportanceSource::training);
    const double lin = (merged.values - fast).cwiseAbs().maxCoeff();
    verdict(2, "FIM oracle", err <= 1e-10 && lin <= 1e-9,
            fmt("brute-force max diff %.2e, union linearity max diff %.2e", err, lin));
  }

  // 3. Influence sign against leave-one-out refits.
  {
    const auto t = Clock::now();
    bool ok = true;
    std::string detail;
    for (std::uint64_t s : kSeeds) {
      const oracle::TinyProblem p = oracle::make_tiny_problem(s);
      InfluenceOptions opts;
      opts.estimator = Estimator::damped_hessian;
      opts.damping = p.weight_decay;
      const InfluenceScorer scorer(p.fitted, p.test, opts, p.train);
      std::vector<double> scores;
      for (const Trace& z : p.train) scores.push_back(scorer.score(z));
      const oracle::LooOutcome r = oracle::loo_sign_agreement(p.fitted, p.train, p.test, scores, p.weight_decay, 5);
      ok = ok && r.agree >= 4;
      detail += fmt("%d/%d ", r.agree, r.checked);
    }
    const double secs = since(t);
    verdict(3, "influence vs leave-one-out", ok && secs < 120.0,
            fmt("top-5 sign agreement %s(K=27, 40 train, 3 problems), %.2f s", detail.c_str(), secs));
  }

  // 4. The attack itself.
  {
    std::vector<double> clean, trig;
    for (const SeedRun& r : cw) {
      clean.push_back(r.detected.report.baseline_no_unlearn.clean_acc);
      trig.push_back(triggered(r.detected.report.baseline_no_unlearn));
      info(fmt("poisoned model: clean %.3f, triggered %.3f", clean.back(), trig.back()));
    }
    verdict(4, "attack reproduction", mean(clean) >= 0.90 && mean(trig) <= 0.20,
            fmt("mean clean acc %.3f (>= 0.90), mean triggered acc %.3f (<= 0.20)", mean(clean), mean(trig)));
  }

  // 5. Detection quality under the default policy.
  {
    std::vector<double> p, r;
    for (const SeedRun& run : cw) {
      const DetectionQuality q = run.detected.report.detection.value_or(DetectionQuality{0.0, 0.0});
      p.push_back(q.precision);
      r.push_back(q.recall);
      info(fmt("flagged %zu of %zu train points (%zu poisoned): precision %.3f, recall %.3f",
               run.detected.report.flagged_count, run.detected.poisoned.dataset.indices(Split::train).size(),
               run.detected.report.poisoned_count, q.precision, q.recall));
    }
    verdict(5, "detection", mean(p) >= 0.8 && mean(r) >= 0.8,
            fmt("mean precision %.3f, mean recall %.3f (both >= 0.8)", mean(p), mean(r)));
  }

  // 6. Closed-world detox with the detected forget set.
  {
    std::vector<double> trig, drop;
    for (const SeedRun& r : cw) {
      const MetricsReport& rep = r.detected.report;
      trig.push_back(triggered(rep.unlearned));
      drop.push_back(rep.baseline_no_unlearn.clean_acc - rep.unlearned.clean_acc);
      info(fmt("detected forget set: triggered %.3f, clean %.3f (was %.3f)", trig.back(), rep.unlearned.clean_acc,
               rep.baseline_no_unlearn.clean_acc));
    }
    bool spread_ok = true;
    for (double x : trig) spread_ok = spread_ok && std::abs(x - mean(trig)) <= 0.10;
    verdict(6, "detox trend (closed world)", mean(trig) >= 0.70 && mean(drop) <= 0.05 && spread_ok,
            fmt("mean triggered %.3f (>= 0.70), mean clean drop %.3f (<= 0.05), per-seed spread %s", mean(trig),
                mean(drop), spread_ok ? "ok" : "exceeds 0.10"));
    std::vector<double> otrig, odrop;
    for (const SeedRun& r : cw) {
      otrig.push_back(triggered(r.oracle.report.unlearned));
      odrop.push_back(r.oracle.report.baseline_no_unlearn.clean_acc - r.oracle.report.unlearned.clean_acc);
    }
    info(fmt("with the true poisoned set as forget set: mean triggered %.3f, mean clean drop %.3f", mean(otrig),
             mean(odrop)));
  }

  // --- open-world runs for criteria 7 and 8, true poisoned set as forget set
  std::vector<SeedRun> ow;
  for (std::uint64_t s : kSeeds) {
    const auto t = Clock::now();
    ow.push_back(run_seed(World::open, s));
    info(fmt("open world seed %llu finished in %.1f s", static_cast<unsigned long long>(s), since(t)));
  }

  // 7. Open-world degradation relative to closed world.
  {
    std::vector<double> c, o;
    for (const SeedRun& r : cw) c.push_back(triggered(r.oracle.report.unlearned));
    for (const SeedRun& r : ow) {
      o.push_back(triggered(r.oracle.report.unlearned));
      info(fmt("open world: poisoned model clean %.3f triggered %.3f; unlearned clean %.3f triggered %.3f",
               r.oracle.report.baseline_no_unlearn.clean_acc, triggered(r.oracle.report.baseline_no_unlearn),
               r.oracle.report.unlearned.clean_acc, o.back()));
    }
    verdict(7, "open-world trend", mean(c) - mean(o) <= 0.10,
            fmt("triggered after unlearning: closed %.3f, open %.3f, degradation %.3f (<= 0.10)", mean(c), mean(o),
                mean(c) - mean(o)));
  }

  // 8. Ablation ordering on the open-world runs.
  {
    std::vector<double> base, no_inh, no_sel;
    for (const SeedRun& r : ow) {
      ExperimentConfig cfg = desk_config(World::open, r.oracle.report.seeds.master);
      cfg.detect.oracle_forget_set = true;
      base.push_back(triggered(r.oracle.report.unlearned));
      cfg.unlearn.ablation = Ablation::no_inhibition;
      no_inh.push_back(triggered(rerun_unlearning(r.oracle, cfg).report.unlearned));
      cfg.unlearn.ablation = Ablation::no_selection;
      no_sel.push_back(triggered(rerun_unlearning(r.oracle, cfg).report.unlearned));
      info(fmt("seed %llu: baseline %.3f, no_inhibition %.3f, no_selection %.3f",
               static_cast<unsigned long long>(r.oracle.report.seeds.master), base.back(), no_inh.back(),
               no_sel.back()));
    }
    verdict(8, "ablation ordering", mean(base) > mean(no_inh) && mean(no_inh) > mean(no_sel),
            fmt("mean triggered: baseline %.3f > no_inhibition %.3f > no_selection %.3f", mean(base), mean(no_inh),
                mean(no_sel)));
  }

  // 9. Unlearning against retraining from scratch.
  {
    const ExperimentArtifacts& art = cw.front().detected;
    const std::vector<std::size_t> train_idx = art.poisoned.dataset.indices(Split::train);
    std::vector<std::size_t> retain;
    std::vector<std::size_t> forget = art.forget_indices;
    std::sort(forget.begin(), forget.end());
    for (std::size_t i : train_idx) {
      if (!std::binary_search(forget.begin(), forget.end(), i)) retain.push_back(i);
    }
    const MetricsReport re = retrain_oracle(desk_config(World::closed, 1), art.poisoned.dataset, retain);
    verdict(9, "speed", art.times.unlearn_s <= 0.5 * re.wall_time_s,
            fmt("unlearn %.3f s vs retrain %.3f s (ratio %.3f, <= 0.5)", art.times.unlearn_s, re.wall_time_s,
                art.times.unlearn_s / re.wall_time_s));
  }

  // 10. Two CLI pipeline runs with the same master seed.
  {
    const fs::path dir = fs::temp_directory_path() / "unlearnwf_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    int rc = 0;
    for (const char* name : {"a", "b"}) {
      const std::string cmd = std::string("\"") + UNLEARNWF_CLI + "\" pipeline --seed 1 --out \"" +
                              (dir / name).string() + "\" > /dev/null 2>&1";
      rc |= std::system(cmd.c_str());
    }
    const std::string a = strip_wall_time(dir / "a" / "report.json");
    const std::string b = strip_wall_time(dir / "b" / "report.json");
    verdict(10, "determinism", rc == 0 && !a.empty() && a == b,
            fmt("exit status %d, reports %s (%zu bytes without wall_time_s)", rc, a == b ? "identical" : "differ",
                a.size()));
    fs::remove_all(dir);
  }

  // 11. No-op and identity cases.
  {
    std::vector<std::string> broken;
    auto expect = [&](bool ok, const char* what) {
      if (!ok) broken.push_back(what);
    };

    ExperimentConfig zero = desk_config(World::closed, 1);
    zero.poison.count = 0;
    const ExperimentArtifacts z = run_experiment_full(zero);
    expect(z.poisoned.poisoned_indices.empty(), "poisoned set not empty");
    expect(z.forget_indices.empty(), "forget set not empty");
    expect(z.unlearned.model.theta() == z.poisoned_model.theta(), "zero poison changed the model");
    expect(z.report.selected_count == 0, "zero poison selected parameters");
    expect(!z.report.unlearned.poisoned_acc, "poisoned_acc present without poison");
    expect(z.report.unlearned.clean_acc == z.report.unlearned.test_acc, "clean != test without poison");
    expect(z.report.unlearned.correct_triggered == 0, "triggered hits without poison");
    expect(!z.report.detection, "detection reported without poison");
    expect(z.report.unlearned.clean_acc == z.report.baseline_no_unlearn.clean_acc, "baseline differs");

    ExperimentConfig empty_sel = desk_config(World::closed, 1);
    empty_sel.unlearn.k = TopK::count(0);
    const ExperimentArtifacts e = rerun_unlearning(cw.front().detected, empty_sel);
    expect(e.unlearned.selected.empty(), "k = 0 selected parameters");
    expect(e.unlearned.model.theta() == e.poisoned_model.theta(), "empty selection changed the model");

    std::size_t monotone_checks = 0;
    for (const SeedRun& r : cw) {
      if (!r.detected.influence) continue;
      const InfluenceReport& rep = *r.detected.influence;
      std::vector<double> levels{0.0, rep.threshold / 4, rep.threshold / 2, rep.threshold, 2 * rep.threshold, 1e300};
      for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
        const auto lo = rep.flags_at(levels[i]);
        const auto hi = rep.flags_at(levels[i + 1]);
        expect(std::includes(lo.begin(), lo.end(), hi.begin(), hi.end()), "flag sets not monotone");
        ++monotone_checks;
      }
      expect(rep.flags_at(rep.threshold) == rep.flagged, "flags_at(threshold) != flagged");
    }
    expect(monotone_checks > 0, "no influence report to check");

    std::string detail = broken.empty() ? "all invariants hold" : broken.front();
    for (std::size_t i = 1; i < broken.size(); ++i) detail += "; " + broken[i];
    verdict(11, "identity and no-op cases", broken.empty(),
            fmt("%s (%zu threshold-monotonicity checks)", detail.c_str(), monotone_checks));
  }

  std::printf("acceptance: %d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
