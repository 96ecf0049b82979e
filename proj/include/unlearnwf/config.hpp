#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>

#include "unlearnwf/eval.hpp"

namespace unlearnwf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const char* to_string(World w);
World world_from_string(const std::string& s);

/// Parses a JSON config. Missing keys take defaults; unknown keys and type
/// mismatches throw ConfigError naming the dotted key path.
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig parse_config(const std::filesystem::path& path);

/// Fully resolved config as pretty-printed JSON; parses back to an equal config.
std::string config_to_json_text(const ExperimentConfig& cfg);

/// FNV-1a over the compact resolved-config JSON.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

/// Report JSON. Timing-sensitive data is limited to `wall_time_s`.
std::string report_to_json_text(const MetricsReport& r);
std::string times_to_json_text(const StageTimes& t);

/// Plain-text results table: one row per (label, report) plus the published
/// reference rows for `setting` ("CW", "OW", "CW ablation", "OW ablation").
std::string results_table(std::span<const std::pair<std::string, MetricsReport>> rows,
                          const std::string& setting);

}  // namespace unlearnwf
