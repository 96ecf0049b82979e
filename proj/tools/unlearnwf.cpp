// Command-line driver: pipeline stages as subcommands over one output directory.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "unlearnwf/config.hpp"
#include "unlearnwf/log.hpp"
#include "unlearnwf/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace unlearnwf;

namespace {

// Thrown for a stage failure; the message already names the stage.
struct StageFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  std::string world;
  std::string ablation;
};

namespace artifact {
const char* const config = "config.json";
const char* const manifest = "manifest.json";
const char* const dataset = "dataset.txt";
const char* const roles = "roles.csv";
const char* const poisoned = "poisoned.txt";
const char* const poisoned_roles = "poisoned_roles.csv";
const char* const model_po = "model_po.bin";
const char* const anomalies = "anomalies.txt";
const char* const influence = "influence.csv";
const char* const forget = "forget.txt";
const char* const model_unlearned = "model_unlearned.bin";
const char* const audit = "unlearn_audit.csv";
const char* const report = "report.json";
const char* const timing = "timing.json";
const char* const table = "table.txt";
const char* const ablation = "ablation.json";
const char* const ablation_table = "ablation_table.txt";
}  // namespace artifact

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

class Run {
 public:
  explicit Run(const Options& opt) : opt_(opt), dir_(opt.out) {}

  const fs::path& dir() const { return dir_; }
  fs::path at(const char* name) const { return dir_ / name; }

  // Resolves the config: explicit --config, else the one saved by an earlier
  // stage, else defaults. Flags are applied on top.
  void load_config() {
    std::string text = "{}";
    if (!opt_.config.empty()) {
      if (!fs::exists(opt_.config)) throw ConfigError("config file not found: " + opt_.config);
      text = read_text(opt_.config);
      config_path_ = opt_.config;
    } else if (fs::exists(at(artifact::config))) {
      text = read_text(at(artifact::config));
      config_path_ = at(artifact::config).string();
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(config_path_ + ": invalid JSON: " + e.what());
    }
    if (!opt_.world.empty() && j.value("world", std::string("closed")) != opt_.world) {
      j["world"] = opt_.world;
      // A resolved config carries the other world's defaults; let them re-resolve.
      if (opt_.config.empty()) {
        if (j.contains("data")) j["data"].erase("background_sites");
        if (j.contains("train")) j["train"].erase("epochs");
      }
    }
    if (!opt_.ablation.empty()) j["unlearn"]["ablation"] = opt_.ablation;
    cfg_ = config_from_json_text(j.dump());
    if (opt_.seed) cfg_.seeds.reset_to(*opt_.seed);
    fs::create_directories(dir_);
    write_text(at(artifact::config), config_to_json_text(cfg_));
  }

  const ExperimentConfig& cfg() const { return cfg_; }

  void require(const char* name, const char* stage) const {
    if (!fs::exists(at(name))) {
      throw StageFailure(std::string(stage) + ": missing artifact " + at(name).string());
    }
  }

  Dataset load_data(const char* traces, const char* roles) const {
    Dataset ds = load_dataset(at(traces), cfg_.data.synth.length, cfg_.data.synth.sites,
                              cfg_.world == World::open);
    load_roles(ds, at(roles));
    return ds;
  }

  void record(const std::string& stage, std::initializer_list<const char*> files) {
    ordered_json m;
    if (fs::exists(at(artifact::manifest))) m = ordered_json::parse(read_text(at(artifact::manifest)));
    m["config_path"] = config_path_;
    m["config_hash"] = hash_hex(config_hash(cfg_));
    m["output_dir"] = dir_.string();
    m["seeds"] = ordered_json::parse(report_seeds());
    if (!m.contains("stages")) m["stages"] = ordered_json::array();
    m["stages"].push_back(stage);
    if (!m.contains("artifacts")) m["artifacts"] = ordered_json::object();
    m["artifacts"][artifact::config] = at(artifact::config).string();
    for (const char* f : files) m["artifacts"][f] = at(f).string();
    write_text(at(artifact::manifest), m.dump(2) + "\n");
  }

  // Per-stage timings accumulate across separate invocations.
  StageTimes load_times() const {
    StageTimes t;
    if (!fs::exists(at(artifact::timing))) return t;
    const auto j = nlohmann::json::parse(read_text(at(artifact::timing)));
    t.train_s = j.value("train_s", 0.0);
    t.detect_s = j.value("detect_s", 0.0);
    t.unlearn_s = j.value("unlearn_s", 0.0);
    t.evaluate_s = j.value("evaluate_s", 0.0);
    return t;
  }
  void save_times(const StageTimes& t) const { write_text(at(artifact::timing), times_to_json_text(t)); }

 private:
  std::string report_seeds() const {
    MetricsReport r;
    r.seeds = cfg_.seeds;
    return ordered_json::parse(report_to_json_text(r))["seeds"].dump();
  }

  Options opt_;
  fs::path dir_;
  std::string config_path_;
  ExperimentConfig cfg_;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

PoisonOutcome outcome_from(Dataset ds) {
  PoisonOutcome po;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.roles[i].split != Split::train) continue;
    (ds.roles[i].is_poisoned_truth ? po.poisoned_indices : po.clean_indices).push_back(i);
  }
  po.dataset = std::move(ds);
  return po;
}

void save_indices(const std::vector<std::size_t>& idx, const fs::path& p) {
  std::ofstream out(p);
  for (std::size_t i : idx) out << i << "\n";
}

std::vector<std::size_t> load_indices(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (in >> i) out.push_back(i);
  return out;
}

void save_traces(const std::vector<Trace>& traces, const Run& run, const fs::path& p) {
  Dataset ds;
  ds.traces = traces;
  ds.roles.assign(traces.size(), Role{false, Split::test});
  ds.length = run.cfg().data.synth.length;
  ds.num_labels = run.cfg().data.synth.sites;
  ds.open_world = run.cfg().world == World::open;
  save_dataset(ds, p);
}

// ---------------------------------------------------------------------------
// Stages

void stage_gen(Run& run) {
  const Dataset ds = prepare_data(run.cfg());
  save_dataset(ds, run.at(artifact::dataset));
  save_roles(ds, run.at(artifact::roles));
  run.record("gen", {artifact::dataset, artifact::roles});
  std::printf("%zu traces, %d labels -> %s\n", ds.size(), ds.output_dim(),
              run.at(artifact::dataset).c_str());
}

void stage_poison(Run& run) {
  run.require(artifact::dataset, "poison");
  run.require(artifact::roles, "poison");
  const Dataset ds = run.load_data(artifact::dataset, artifact::roles);
  const PoisonOutcome po = apply_poison(ds, run.cfg());
  save_dataset(po.dataset, run.at(artifact::poisoned));
  save_roles(po.dataset, run.at(artifact::poisoned_roles));
  run.record("poison", {artifact::poisoned, artifact::poisoned_roles});
  std::printf("poisoned %zu of %zu train traces\n", po.poisoned_indices.size(),
              po.poisoned_indices.size() + po.clean_indices.size());
}

void stage_train(Run& run) {
  run.require(artifact::poisoned, "train");
  run.require(artifact::poisoned_roles, "train");
  const Dataset ds = run.load_data(artifact::poisoned, artifact::poisoned_roles);
  const auto t0 = Clock::now();
  const ModelState m = train_poisoned(ds, run.cfg());
  StageTimes times = run.load_times();
  times.train_s = since(t0);
  run.save_times(times);
  save_model(m, run.at(artifact::model_po));
  run.record("train", {artifact::model_po, artifact::timing});
  std::printf("trained %zu parameters in %.2f s\n", m.param_count(), times.train_s);
}

void stage_detect(Run& run) {
  run.require(artifact::model_po, "detect");
  run.require(artifact::poisoned, "detect");
  run.require(artifact::poisoned_roles, "detect");
  const ExperimentConfig& cfg = run.cfg();
  const ModelState m = load_model(run.at(artifact::model_po));
  const PoisonOutcome po = outcome_from(run.load_data(artifact::poisoned, artifact::poisoned_roles));
  const auto t0 = Clock::now();
  std::vector<Trace> anomalies;
  if (!po.poisoned_indices.empty()) {
    anomalies = build_anomaly_set(m, po.dataset, cfg.poison.trigger(), cfg.detect.anomaly_count,
                                  cfg.detect.anomaly_label, cfg.seeds.anomaly_seed());
    if (anomalies.size() < cfg.detect.anomaly_count) {
      log::warn("only ", anomalies.size(), " of ", cfg.detect.anomaly_count,
                " requested anomalous test points available");
    }
  }
  std::optional<InfluenceReport> rep;
  const auto forget = run_detection(m, po, anomalies, cfg, &rep);
  StageTimes times = run.load_times();
  times.detect_s = since(t0);
  run.save_times(times);
  save_traces(anomalies, run, run.at(artifact::anomalies));
  save_indices(forget, run.at(artifact::forget));
  if (rep) {
    save_influence_report(*rep, run.at(artifact::influence));
    run.record("detect", {artifact::anomalies, artifact::forget, artifact::influence, artifact::timing});
  } else {
    run.record("detect", {artifact::anomalies, artifact::forget, artifact::timing});
  }
  std::printf("%zu anomalous test points, %zu training points flagged\n", anomalies.size(),
              forget.size());
}

void stage_unlearn(Run& run) {
  run.require(artifact::model_po, "unlearn");
  run.require(artifact::forget, "unlearn");
  run.require(artifact::poisoned, "unlearn");
  run.require(artifact::poisoned_roles, "unlearn");
  const ModelState m = load_model(run.at(artifact::model_po));
  const Dataset ds = run.load_data(artifact::poisoned, artifact::poisoned_roles);
  const auto forget = load_indices(run.at(artifact::forget));
  const auto t0 = Clock::now();
  const UnlearnResult r = run_unlearning(m, ds, forget, run.cfg());
  StageTimes times = run.load_times();
  times.unlearn_s = since(t0);
  run.save_times(times);
  save_model(r.model, run.at(artifact::model_unlearned));
  save_unlearn_audit(r, run.at(artifact::audit));
  run.record("unlearn", {artifact::model_unlearned, artifact::audit, artifact::timing});
  std::printf("dampened %zu of %zu parameters (%s)\n", r.selected.size(), m.param_count(),
              to_string(run.cfg().unlearn.ablation));
}

std::string table_label(const ExperimentConfig& cfg) { return cfg.world == World::closed ? "CW" : "OW"; }

void stage_eval(Run& run) {
  for (const char* a : {artifact::model_po, artifact::model_unlearned, artifact::dataset, artifact::roles,
                        artifact::poisoned_roles, artifact::forget}) {
    run.require(a, "eval");
  }
  const ExperimentConfig& cfg = run.cfg();
  const Dataset clean = run.load_data(artifact::dataset, artifact::roles);
  Dataset roles_only = clean;
  load_roles(roles_only, run.at(artifact::poisoned_roles));
  const PoisonOutcome po = outcome_from(std::move(roles_only));
  const ModelState before = load_model(run.at(artifact::model_po));
  const ModelState after = load_model(run.at(artifact::model_unlearned));
  const auto forget = load_indices(run.at(artifact::forget));

  const auto t0 = Clock::now();
  const bool active = !po.poisoned_indices.empty();
  const TestSets sets = build_test_sets(clean, cfg, active);
  MetricsReport rep;
  rep.unlearned = evaluate(after, sets);
  StageTimes times = run.load_times();
  times.evaluate_s = since(t0);
  run.save_times(times);
  rep.baseline_no_unlearn = evaluate(before, sets);
  rep.wall_time_s = times.train_s + times.detect_s + times.unlearn_s + times.evaluate_s;
  if (active && (fs::exists(run.at(artifact::influence)) || cfg.detect.oracle_forget_set)) {
    rep.detection = detection_quality(forget, po.poisoned_indices);
  }
  rep.anomaly_requested = active ? cfg.detect.anomaly_count : 0;
  if (fs::exists(run.at(artifact::anomalies))) {
    std::ifstream in(run.at(artifact::anomalies));
    std::string line;
    while (std::getline(in, line)) rep.anomaly_actual += line.empty() ? 0 : 1;
  }
  rep.flagged_count = forget.size();
  rep.poisoned_count = po.poisoned_indices.size();
  rep.selected_count = 0;
  for (std::size_t k = 0; k < before.param_count(); ++k) {
    rep.selected_count += before.theta()[static_cast<Eigen::Index>(k)] !=
                                  after.theta()[static_cast<Eigen::Index>(k)]
                              ? 1
                              : 0;
  }
  rep.ablation = cfg.unlearn.ablation;
  rep.world = cfg.world;
  rep.config_hash = config_hash(cfg);
  rep.seeds = cfg.seeds;

  write_text(run.at(artifact::report), report_to_json_text(rep));
  const std::pair<std::string, MetricsReport> rows[] = {{"this run", rep}};
  const std::string table = results_table(rows, table_label(cfg));
  write_text(run.at(artifact::table), table);
  run.record("eval", {artifact::report, artifact::table});
  std::fputs(table.c_str(), stdout);
}

void write_pipeline_artifacts(Run& run, const ExperimentArtifacts& art) {
  save_dataset(art.clean_dataset, run.at(artifact::dataset));
  save_roles(art.clean_dataset, run.at(artifact::roles));
  save_dataset(art.poisoned.dataset, run.at(artifact::poisoned));
  save_roles(art.poisoned.dataset, run.at(artifact::poisoned_roles));
  save_model(art.poisoned_model, run.at(artifact::model_po));
  save_traces(art.anomalies, run, run.at(artifact::anomalies));
  save_indices(art.forget_indices, run.at(artifact::forget));
  if (art.influence) save_influence_report(*art.influence, run.at(artifact::influence));
  save_model(art.unlearned.model, run.at(artifact::model_unlearned));
  save_unlearn_audit(art.unlearned, run.at(artifact::audit));
  run.save_times(art.times);
}

void stage_pipeline(Run& run) {
  const ExperimentArtifacts art = run_experiment_full(run.cfg());
  write_pipeline_artifacts(run, art);
  write_text(run.at(artifact::report), report_to_json_text(art.report));
  const std::pair<std::string, MetricsReport> rows[] = {{"this run", art.report}};
  const std::string table = results_table(rows, table_label(run.cfg()));
  write_text(run.at(artifact::table), table);
  std::initializer_list<const char*> files = {
      artifact::dataset, artifact::roles,          artifact::poisoned, artifact::poisoned_roles,
      artifact::model_po, artifact::anomalies,     artifact::forget,   artifact::model_unlearned,
      artifact::audit,    artifact::report,        artifact::timing,   artifact::table};
  run.record("pipeline", files);
  if (art.influence) run.record("pipeline", {artifact::influence});
  std::fputs(table.c_str(), stdout);
}

void stage_ablate(Run& run) {
  ExperimentConfig cfg = run.cfg();
  cfg.unlearn.ablation = Ablation::none;
  const ExperimentArtifacts base = run_experiment_full(cfg);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  rows.emplace_back("baseline", base.report);
  for (Ablation ab : {Ablation::no_selection, Ablation::no_inhibition}) {
    ExperimentConfig c = cfg;
    c.unlearn.ablation = ab;
    rows.emplace_back(to_string(ab), rerun_unlearning(base, c).report);
  }
  ordered_json j = ordered_json::object();
  for (const auto& [name, rep] : rows) j[name] = ordered_json::parse(report_to_json_text(rep));
  write_text(run.at(artifact::ablation), j.dump(2) + "\n");
  const std::string table = results_table(rows, table_label(cfg) + " ablation");
  write_text(run.at(artifact::ablation_table), table);
  run.record("ablate", {artifact::ablation, artifact::ablation_table});
  std::fputs(table.c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor detection and unlearning for website-fingerprinting classifiers"};
  app.require_subcommand(1, 1);
  Options opt;

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(Run&);
  };
  const Command commands[] = {
      {"gen", "generate or load the corpus and assign splits", stage_gen},
      {"poison", "inject the trigger into the train split", stage_poison},
      {"train", "train the classifier on the poisoned corpus", stage_train},
      {"detect", "influence-based detection of poisoned training points", stage_detect},
      {"unlearn", "Fisher-guided dampening of the poisoned model", stage_unlearn},
      {"eval", "metrics for the poisoned and unlearned models", stage_eval},
      {"pipeline", "run every stage end to end", stage_pipeline},
      {"ablate", "baseline, no_selection and no_inhibition side by side", stage_ablate},
  };
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "output directory")->capture_default_str();
    sub->add_option("--seed", opt.seed, "master seed (overrides every config seed)");
    sub->add_option("--jobs", opt.jobs, "worker threads (0 = default)")->check(CLI::NonNegativeNumber);
    sub->add_option("--world", opt.world, "closed or open")->check(CLI::IsMember({"closed", "open"}));
    sub->add_option("--ablation", opt.ablation, "none, no_selection or no_inhibition")
        ->check(CLI::IsMember({"none", "no_selection", "no_inhibition"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const Command* chosen = nullptr;
  for (const Command& c : commands) {
    if (app.got_subcommand(c.name)) chosen = &c;
  }
  set_jobs(opt.jobs);
  Run run(opt);
  try {
    run.load_config();
  } catch (const std::exception& e) {
    std::cerr << "unlearnwf: " << chosen->name << " failed: " << e.what() << "\n";
    return 1;
  }
  try {
    chosen->fn(run);
  } catch (const StageFailure& e) {
    std::cerr << "unlearnwf: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unlearnwf: " << chosen->name << " failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
