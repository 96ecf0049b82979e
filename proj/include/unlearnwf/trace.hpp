#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unlearnwf {

/// Tor cell direction: +1 toward the server, -1 toward the client, 0 padding.
using Direction = std::int8_t;
using Label = int;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Trace {
  std::vector<Direction> dirs;
  Label label = 0;

  bool operator==(const Trace&) const = default;
};

enum class Split : std::uint8_t { train, val, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct Role {
  bool is_poisoned_truth = false;
  Split split = Split::train;

  bool operator==(const Role&) const = default;
};

/// Ordered trace collection. Indices are stable for the lifetime of the
/// experiment: nothing reorders `traces` in place.
struct Dataset {
  std::vector<Trace> traces;
  std::vector<Role> roles;
  std::size_t length = 0;
  int num_labels = 0;
  bool open_world = false;

  std::size_t size() const { return traces.size(); }

  /// Label count seen by a classifier: M, or M+1 with the background class.
  int output_dim() const { return num_labels + (open_world ? 1 : 0); }

  std::vector<std::size_t> indices(Split s) const;
  std::vector<Trace> select(std::span<const std::size_t> idx) const;
  std::vector<Trace> select(Split s) const { return select(indices(s)); }

  bool operator==(const Dataset&) const = default;
};

/// Throws DataError naming the first trace that violates a Trace invariant.
void validate(const Dataset& ds);

/// Pads with 0 on the right or truncates to the first `n` cells.
std::vector<Direction> normalize(std::span<const Direction> dirs, std::size_t n);

Dataset load_dataset(const std::filesystem::path& path, std::size_t n,
                     int num_labels, bool open_world);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

/// Sidecar for roles: `index,split,poisoned` per line.
void save_roles(const Dataset& ds, const std::filesystem::path& path);
void load_roles(Dataset& ds, const std::filesystem::path& path);

struct SynthSpec {
  int sites = 20;
  int traces_per_site = 200;
  std::size_t length = 512;
  double noise_rate = 0.05;
  /// Unmonitored sites, all labeled `sites`. Zero for closed world.
  int background_sites = 0;

  void check() const;
};

/// Per-site Markov burst corpus. Every site owns a seeded template of
/// alternating bursts; traces are jittered copies with random cell flips.
Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

/// Seeded stratified assignment of split roles. Sizes follow
/// largest-remainder rounding of the fractions; each label's share of every
/// split is within one trace of its exact proportion.
Dataset split(Dataset ds, std::array<double, 3> fractions, std::uint64_t seed);

}  // namespace unlearnwf
