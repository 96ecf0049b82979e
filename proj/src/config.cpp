#include "unlearnwf/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "unlearnwf/rng.hpp"

namespace unlearnwf {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(World w) { return w == World::closed ? "closed" : "open"; }

World world_from_string(const std::string& s) {
  if (s == "closed") return World::closed;
  if (s == "open") return World::open;
  throw ConfigError("unknown world '" + s + "' (expected closed|open)");
}

namespace {

// Walks one JSON object, remembering which keys were read so leftovers can
// be reported as unknown.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) && !obj_.at(key).is_null();
  }

  bool present(const char* key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  Reader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    if (!obj_.contains(key)) return Reader(empty, key_path(key));
    return Reader(obj_.at(key), key_path(key));
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!has(key)) return;
    out = as<T>(key);
  }

  template <class T>
  void get_opt(const char* key, std::optional<T>& out) {
    if (!present(key)) return;
    if (obj_.at(key).is_null()) {
      out.reset();
    } else {
      out = as<T>(key);
    }
  }

  template <class T>
  T as(const char* key) {
    const json& v = obj_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("expected an integer");
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
            v.get<std::int64_t>() < 0) {
          throw ConfigError("expected a non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("expected a string");
      }
      return v.get<T>();
    } catch (const ConfigError& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ConfigError(key_path(key) + ": " + e.what());
    }
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + key_path(k) + "'");
    }
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void rethrow_at(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::vector<Direction> parse_pattern(const json& v, const std::string& path) {
  std::vector<Direction> out;
  if (v.is_string()) {
    for (char c : v.get<std::string>()) {
      if (c == '+') {
        out.push_back(1);
      } else if (c == '-') {
        out.push_back(-1);
      } else {
        throw ConfigError(path + ": pattern characters must be '+' or '-'");
      }
    }
  } else if (v.is_array()) {
    for (const json& e : v) {
      if (!e.is_number_integer() || (e.get<int>() != 1 && e.get<int>() != -1)) {
        throw ConfigError(path + ": pattern entries must be +1 or -1");
      }
      out.push_back(static_cast<Direction>(e.get<int>()));
    }
  } else {
    throw ConfigError(path + ": expected a '+-' string or an array of +1/-1");
  }
  if (out.empty()) throw ConfigError(path + ": pattern is empty");
  return out;
}

std::string pattern_text(const std::vector<Direction>& p) {
  std::string s;
  for (Direction d : p) s.push_back(d > 0 ? '+' : '-');
  return s;
}

const char* to_string(TargetMode m) { return m == TargetMode::all_to_one ? "all_to_one" : "all_to_random"; }
const char* to_string(AnomalyLabel l) { return l == AnomalyLabel::original ? "original" : "predicted"; }
const char* to_string(Estimator e) { return e == Estimator::grad_dot ? "grad_dot" : "damped_hessian"; }

const char* to_string(ThresholdPolicy::Kind k) {
  switch (k) {
    case ThresholdPolicy::Kind::otsu: return "otsu";
    case ThresholdPolicy::Kind::percentile: return "percentile";
    case ThresholdPolicy::Kind::fixed: return "fixed";
  }
  return "?";
}

template <class E, std::size_t N>
E enum_from(const std::string& s, const std::string& path, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  std::string allowed;
  for (const auto& [name, value] : table) allowed += std::string(allowed.empty() ? "" : "|") + name;
  throw ConfigError(path + ": unknown value '" + s + "' (expected " + allowed + ")");
}

void read_seed_override(Reader& r, const char* key, std::optional<std::uint64_t>& dst) {
  if (r.present(key)) r.get_opt(key, dst);
}

ExperimentConfig from_json(const json& j) {
  Reader root(j, "");
  const World world = root.has("world") ? world_from_string(root.as<std::string>("world")) : World::closed;
  ExperimentConfig cfg = default_config(world);

  {
    Reader r = root.child("data");
    r.get("path", cfg.data.path);
    r.get("sites", cfg.data.synth.sites);
    r.get("traces_per_site", cfg.data.synth.traces_per_site);
    r.get("length", cfg.data.synth.length);
    r.get("noise_rate", cfg.data.synth.noise_rate);
    r.get("background_sites", cfg.data.synth.background_sites);
    if (r.has("fractions")) {
      const json& f = r.raw("fractions");
      if (!f.is_array() || f.size() != 3) {
        throw ConfigError(r.key_path("fractions") + ": expected [train, val, test]");
      }
      for (std::size_t i = 0; i < 3; ++i) {
        if (!f[i].is_number()) throw ConfigError(r.key_path("fractions") + ": expected numbers");
        cfg.data.fractions[i] = f[i].get<double>();
      }
    }
    r.get_opt("seed", cfg.seeds.data);
    r.finish();
  }
  {
    Reader r = root.child("model");
    r.get("layers", cfg.layers);
    r.finish();
  }
  {
    Reader r = root.child("trigger");
    if (r.has("pattern")) cfg.poison.pattern = parse_pattern(r.raw("pattern"), r.key_path("pattern"));
    r.get_opt("offset", cfg.poison.offset);
    r.finish();
  }
  {
    Reader r = root.child("poison");
    r.get_opt("count", cfg.poison.count);
    r.get("fraction", cfg.poison.fraction);
    if (r.has("mode")) {
      static constexpr std::pair<const char*, TargetMode> modes[] = {
          {"all_to_one", TargetMode::all_to_one}, {"all_to_random", TargetMode::all_to_random}};
      cfg.poison.mode = enum_from(r.as<std::string>("mode"), r.key_path("mode"), modes);
    }
    r.get("target_label", cfg.poison.target_label);
    read_seed_override(r, "seed", cfg.seeds.poison);
    r.finish();
  }
  {
    Reader r = root.child("train");
    r.get("epochs", cfg.train.epochs);
    r.get("batch_size", cfg.train.batch_size);
    r.get("learning_rate", cfg.train.learning_rate);
    r.get("momentum", cfg.train.momentum);
    r.get("weight_decay", cfg.train.weight_decay);
    read_seed_override(r, "seed", cfg.seeds.train);
    read_seed_override(r, "init_seed", cfg.seeds.init);
    r.finish();
  }
  {
    Reader r = root.child("augment");
    r.get("p_insert", cfg.augment.p_insert);
    r.get("p_split", cfg.augment.p_split);
    r.get("p_merge", cfg.augment.p_merge);
    r.get("p_flip", cfg.augment.p_flip);
    r.get("ops_per_point", cfg.augment.ops_per_point);
    r.get("label_rematch_fraction", cfg.augment.label_rematch_fraction);
    read_seed_override(r, "seed", cfg.seeds.augment);
    r.finish();
  }
  {
    Reader r = root.child("detect");
    r.get("anomaly_count", cfg.detect.anomaly_count);
    if (r.has("anomaly_label")) {
      static constexpr std::pair<const char*, AnomalyLabel> labels[] = {
          {"original", AnomalyLabel::original}, {"predicted", AnomalyLabel::predicted}};
      cfg.detect.anomaly_label = enum_from(r.as<std::string>("anomaly_label"), r.key_path("anomaly_label"), labels);
    }
    if (r.has("threshold")) {
      Reader t = r.child("threshold");
      if (t.has("policy")) {
        static constexpr std::pair<const char*, ThresholdPolicy::Kind> kinds[] = {
            {"otsu", ThresholdPolicy::Kind::otsu},
            {"percentile", ThresholdPolicy::Kind::percentile},
            {"fixed", ThresholdPolicy::Kind::fixed}};
        cfg.detect.threshold.kind = enum_from(t.as<std::string>("policy"), t.key_path("policy"), kinds);
      }
      t.get("value", cfg.detect.threshold.value);
      t.finish();
    }
    if (r.has("estimator")) {
      static constexpr std::pair<const char*, Estimator> ests[] = {
          {"grad_dot", Estimator::grad_dot}, {"damped_hessian", Estimator::damped_hessian}};
      cfg.detect.estimator = enum_from(r.as<std::string>("estimator"), r.key_path("estimator"), ests);
    }
    r.get("damping", cfg.detect.damping);
    r.get_opt("last_layer_only", cfg.detect.last_layer_only);
    r.get("oracle_forget_set", cfg.detect.oracle_forget_set);
    read_seed_override(r, "anomaly_seed", cfg.seeds.anomaly);
    r.finish();
  }
  {
    Reader r = root.child("unlearn");
    const bool frac = r.has("k_fraction");
    const bool count = r.has("k_count");
    if (frac && count) throw ConfigError("unlearn: give k_fraction or k_count, not both");
    if (frac) cfg.unlearn.k = TopK::fraction(r.as<double>("k_fraction"));
    if (count) cfg.unlearn.k = TopK::count(r.as<std::size_t>("k_count"));
    r.get("alpha", cfg.unlearn.alpha);
    r.get("lambda", cfg.unlearn.lambda);
    if (r.has("ablation")) {
      const std::string key = r.key_path("ablation");
      rethrow_at(key, [&] { cfg.unlearn.ablation = ablation_from_string(r.as<std::string>("ablation")); });
    }
    r.finish();
  }
  {
    Reader r = root.child("eval");
    r.get("triggered_fraction", cfg.triggered_fraction);
    read_seed_override(r, "mix_seed", cfg.seeds.mix);
    r.finish();
  }
  {
    Reader r = root.child("seeds");
    r.get("master", cfg.seeds.master);
    r.get_opt("data", cfg.seeds.data);
    r.get_opt("split", cfg.seeds.split);
    r.get_opt("poison", cfg.seeds.poison);
    r.get_opt("init", cfg.seeds.init);
    r.get_opt("train", cfg.seeds.train);
    r.get_opt("anomaly", cfg.seeds.anomaly);
    r.get_opt("augment", cfg.seeds.augment);
    r.get_opt("mix", cfg.seeds.mix);
    r.finish();
  }
  root.finish();

  rethrow_at("config", [&] { cfg.check(); });
  return cfg;
}

template <class T>
ordered_json opt(const std::optional<T>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

ordered_json to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["world"] = to_string(cfg.world);
  j["data"] = {{"path", cfg.data.path},
               {"sites", cfg.data.synth.sites},
               {"traces_per_site", cfg.data.synth.traces_per_site},
               {"length", cfg.data.synth.length},
               {"noise_rate", cfg.data.synth.noise_rate},
               {"background_sites", cfg.data.synth.background_sites},
               {"fractions", cfg.data.fractions}};
  j["model"] = {{"layers", cfg.layers}};
  j["trigger"] = {{"pattern", pattern_text(cfg.poison.pattern)}, {"offset", opt(cfg.poison.offset)}};
  j["poison"] = {{"count", opt(cfg.poison.count)},
                 {"fraction", cfg.poison.fraction},
                 {"mode", to_string(cfg.poison.mode)},
                 {"target_label", cfg.poison.target_label}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay}};
  j["augment"] = {{"p_insert", cfg.augment.p_insert},
                  {"p_split", cfg.augment.p_split},
                  {"p_merge", cfg.augment.p_merge},
                  {"p_flip", cfg.augment.p_flip},
                  {"ops_per_point", cfg.augment.ops_per_point},
                  {"label_rematch_fraction", cfg.augment.label_rematch_fraction}};
  j["detect"] = {{"anomaly_count", cfg.detect.anomaly_count},
                 {"anomaly_label", to_string(cfg.detect.anomaly_label)},
                 {"threshold",
                  {{"policy", to_string(cfg.detect.threshold.kind)}, {"value", cfg.detect.threshold.value}}},
                 {"estimator", to_string(cfg.detect.estimator)},
                 {"damping", cfg.detect.damping},
                 {"last_layer_only", opt(cfg.detect.last_layer_only)},
                 {"oracle_forget_set", cfg.detect.oracle_forget_set}};
  ordered_json u;
  if (cfg.unlearn.k.kind == TopK::Kind::fraction) {
    u["k_fraction"] = cfg.unlearn.k.value;
  } else {
    u["k_count"] = static_cast<std::size_t>(cfg.unlearn.k.value);
  }
  u["alpha"] = cfg.unlearn.alpha;
  u["lambda"] = cfg.unlearn.lambda;
  u["ablation"] = to_string(cfg.unlearn.ablation);
  j["unlearn"] = u;
  j["eval"] = {{"triggered_fraction", cfg.triggered_fraction}};
  const Seeds& s = cfg.seeds;
  j["seeds"] = {{"master", s.master},   {"data", opt(s.data)},       {"split", opt(s.split)},
                {"poison", opt(s.poison)}, {"init", opt(s.init)},     {"train", opt(s.train)},
                {"anomaly", opt(s.anomaly)}, {"augment", opt(s.augment)}, {"mix", opt(s.mix)}};
  return j;
}

ordered_json metrics_json(const Metrics& m) {
  ordered_json j;
  j["poisoned_acc"] = opt(m.poisoned_acc);
  j["clean_acc"] = m.clean_acc;
  j["test_acc"] = m.test_acc;
  j["correct_triggered"] = m.correct_triggered;
  j["correct_clean"] = m.correct_clean;
  j["mixed_total"] = m.mixed_total;
  return j;
}

ordered_json seeds_json(const Seeds& s) {
  return {{"master", s.master},
          {"data", s.data_seed()},
          {"split", s.split_seed()},
          {"poison", s.poison_seed()},
          {"init", s.init_seed()},
          {"train", s.train_seed()},
          {"anomaly", s.anomaly_seed()},
          {"augment", s.augment_seed()},
          {"mix", s.mix_seed()}};
}

std::string percent(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  return from_json(j);
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_json_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_to_json_text(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(to_json(cfg).dump()); }

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::string report_to_json_text(const MetricsReport& r) {
  ordered_json j = metrics_json(r.unlearned);
  j["wall_time_s"] = r.wall_time_s;
  if (r.detection) {
    j["detection"] = {{"precision", r.detection->precision}, {"recall", r.detection->recall}};
  } else {
    j["detection"] = nullptr;
  }
  j["baseline_no_unlearn"] = metrics_json(r.baseline_no_unlearn);
  j["anomaly_requested"] = r.anomaly_requested;
  j["anomaly_actual"] = r.anomaly_actual;
  j["flagged_count"] = r.flagged_count;
  j["poisoned_count"] = r.poisoned_count;
  j["selected_count"] = r.selected_count;
  j["ablation"] = to_string(r.ablation);
  j["world"] = to_string(r.world);
  j["config_hash"] = hash_hex(r.config_hash);
  j["seeds"] = seeds_json(r.seeds);
  return j.dump(2) + "\n";
}

std::string times_to_json_text(const StageTimes& t) {
  ordered_json j = {{"train_s", t.train_s},
                    {"detect_s", t.detect_s},
                    {"unlearn_s", t.unlearn_s},
                    {"evaluate_s", t.evaluate_s}};
  return j.dump(2) + "\n";
}

std::string results_table(std::span<const std::pair<std::string, MetricsReport>> rows,
                          const std::string& setting) {
  std::ostringstream out;
  char line[160];
  const char* fmt = "%-28s %14s %11s %10s %10s\n";
  std::snprintf(line, sizeof line, fmt, "Method", "Poisoned acc.", "Clean acc.", "Test acc.", "Time (s)");
  out << setting << "\n" << line;
  out << std::string(77, '-') << "\n";
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof line, fmt, name.c_str(), percent(r.unlearned.poisoned_acc).c_str(),
                  percent(r.unlearned.clean_acc).c_str(), percent(r.unlearned.test_acc).c_str(),
                  fixed2(r.wall_time_s).c_str());
    out << line;
  }
  bool header = false;
  for (const ReferenceRow& ref : reference_rows()) {
    if (setting != ref.setting) continue;
    if (!header) {
      out << "published full-scale reference:\n";
      header = true;
    }
    std::snprintf(line, sizeof line, fmt, ref.method, fixed2(ref.poisoned_acc).c_str(),
                  fixed2(ref.clean_acc).c_str(), fixed2(ref.test_acc).c_str(), fixed2(ref.time_s).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace unlearnwf
