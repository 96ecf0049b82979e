#include "unlearnwf/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "unlearnwf/rng.hpp"

namespace unlearnwf {

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i].split == s) out.push_back(i);
  }
  return out;
}

std::vector<Trace> Dataset::select(std::span<const std::size_t> idx) const {
  std::vector<Trace> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(traces.at(i));
  return out;
}

void validate(const Dataset& ds) {
  if (ds.roles.size() != ds.traces.size()) {
    throw DataError("roles/traces size mismatch");
  }
  for (std::size_t i = 0; i < ds.traces.size(); ++i) {
    const Trace& t = ds.traces[i];
    const std::string where = "trace " + std::to_string(i) + ": ";
    if (t.dirs.size() != ds.length) throw DataError(where + "wrong length");
    bool in_padding = false;
    for (Direction d : t.dirs) {
      if (d != 0 && d != 1 && d != -1) throw DataError(where + "bad symbol");
      if (d == 0) {
        in_padding = true;
      } else if (in_padding) {
        throw DataError(where + "padding is not a suffix");
      }
    }
    const bool background_ok = ds.open_world && t.label == ds.num_labels;
    if (t.label < 0 || (t.label >= ds.num_labels && !background_ok)) {
      throw DataError(where + "label out of range");
    }
  }
}

std::vector<Direction> normalize(std::span<const Direction> dirs, std::size_t n) {
  std::vector<Direction> out(n, 0);
  std::copy_n(dirs.begin(), std::min(n, dirs.size()), out.begin());
  return out;
}

Dataset load_dataset(const std::filesystem::path& path, std::size_t n,
                     int num_labels, bool open_world) {
  std::ifstream in(path);
  if (!in) throw DataError("file not found: " + path.string());

  Dataset ds;
  ds.length = n;
  ds.num_labels = num_labels;
  ds.open_world = open_world;
  const int label_limit = num_labels + (open_world ? 1 : 0);

  std::string line;
  std::size_t line_no = 0;
  std::vector<Direction> raw;
  while (std::getline(in, line)) {
    ++line_no;
    auto fail = [&](const std::string& why) {
      return DataError(path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    const auto comma = line.find(',');
    if (comma == std::string::npos || comma == 0) throw fail("expected '<label>,<dirs>'");
    Label label = 0;
    const char* first = line.data();
    auto [ptr, ec] = std::from_chars(first, first + comma, label);
    if (ec != std::errc{} || ptr != first + comma || label < 0) {
      throw fail("bad label");
    }
    if (label >= label_limit) throw fail("label " + std::to_string(label) + " out of range");

    raw.clear();
    std::string_view rest(line.data() + comma + 1, line.size() - comma - 1);
    while (!rest.empty()) {
      const auto sp = rest.find(' ');
      const std::string_view tok = rest.substr(0, sp);
      if (tok == "1") {
        raw.push_back(1);
      } else if (tok == "-1") {
        raw.push_back(-1);
      } else {
        throw fail("bad direction '" + std::string(tok) + "'");
      }
      if (sp == std::string_view::npos) break;
      rest.remove_prefix(sp + 1);
      if (rest.empty()) throw fail("trailing space");
    }
    ds.traces.push_back({normalize(raw, n), label});
  }
  ds.roles.assign(ds.traces.size(), Role{});
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Trace& t : ds.traces) {
    out << t.label << ',';
    bool first = true;
    for (Direction d : t.dirs) {
      if (d == 0) break;
      if (!first) out << ' ';
      out << (d > 0 ? "1" : "-1");
      first = false;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

void save_roles(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "index,split,poisoned\n";
  for (std::size_t i = 0; i < ds.roles.size(); ++i) {
    out << i << ',' << to_string(ds.roles[i].split) << ','
        << (ds.roles[i].is_poisoned_truth ? 1 : 0) << '\n';
  }
}

void load_roles(Dataset& ds, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("file not found: " + path.string());
  std::string line;
  std::getline(in, line);  // header
  std::vector<Role> roles;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string idx, split_name, poisoned;
    if (!std::getline(ss, idx, ',') || !std::getline(ss, split_name, ',') ||
        !std::getline(ss, poisoned)) {
      throw DataError(path.string() + ": malformed role line '" + line + "'");
    }
    if (std::stoul(idx) != roles.size()) throw DataError(path.string() + ": index gap");
    roles.push_back({poisoned == "1", split_from_string(split_name)});
  }
  if (roles.size() != ds.size()) {
    throw DataError(path.string() + ": role count does not match dataset");
  }
  ds.roles = std::move(roles);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthSpec::check() const {
  if (sites < 1) throw DataError("synth: sites must be >= 1");
  if (traces_per_site < 0) throw DataError("synth: traces_per_site must be >= 0");
  if (length < 8) throw DataError("synth: length must be >= 8");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw DataError("synth: noise_rate must be in [0,1]");
  }
  if (background_sites < 0) throw DataError("synth: background_sites must be >= 0");
}

namespace {

struct SiteProfile {
  std::vector<int> bursts;  // alternating, first burst outgoing (+1)
  double length_scale;      // nominal trace length relative to n
};

int geometric_burst(Rng& rng, double mean, int min_len) {
  // Shifted geometric with the requested mean.
  const double p = 1.0 / std::max(1.0, mean - min_len + 1.0);
  int len = min_len;
  while (!rng.bernoulli(p) && len < 64) ++len;
  return len;
}

SiteProfile make_profile(std::uint64_t site_seed, std::size_t n) {
  Rng rng(site_seed);
  SiteProfile p;
  const double mean_out = rng.uniform(1.0, 3.0);
  const double mean_in = rng.uniform(4.0, 14.0);
  p.length_scale = rng.uniform(0.6, 1.6);
  const auto cells = static_cast<std::size_t>(2.2 * static_cast<double>(n)) + 64;
  std::size_t total = 0;
  bool outgoing = true;
  while (total < cells) {
    const int len = outgoing ? geometric_burst(rng, mean_out, 1)
                             : geometric_burst(rng, mean_in, 3);
    p.bursts.push_back(len);
    total += static_cast<std::size_t>(len);
    outgoing = !outgoing;
  }
  return p;
}

Trace sample_trace(const SiteProfile& prof, Label label, std::size_t n,
                   double noise_rate, std::uint64_t trace_seed) {
  Rng rng(trace_seed);
  const double scale = prof.length_scale * rng.uniform(0.9, 1.1);
  const auto target = static_cast<std::size_t>(scale * static_cast<double>(n));

  std::vector<Direction> raw;
  raw.reserve(target);
  Direction dir = 1;
  for (int nominal : prof.bursts) {
    int len = nominal;
    const double u = rng.uniform();
    if (u < 0.15) {
      len -= 1;
    } else if (u < 0.30) {
      len += 1;
    }
    // Keep incoming bursts >= 3 so jitter never fabricates runs of two.
    len = std::max(len, dir > 0 ? 1 : 3);
    for (int k = 0; k < len && raw.size() < target; ++k) raw.push_back(dir);
    dir = static_cast<Direction>(-dir);
    if (raw.size() >= target) break;
  }
  for (auto& d : raw) {
    if (rng.bernoulli(noise_rate)) d = static_cast<Direction>(-d);
  }
  return {normalize(raw, n), label};
}

}  // namespace

Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  spec.check();
  Dataset ds;
  ds.length = spec.length;
  ds.num_labels = spec.sites;
  ds.open_world = spec.background_sites > 0;

  auto emit_site = [&](std::uint64_t site_seed, Label label) {
    const SiteProfile prof = make_profile(site_seed, spec.length);
    for (int i = 0; i < spec.traces_per_site; ++i) {
      ds.traces.push_back(sample_trace(prof, label, spec.length, spec.noise_rate,
                                       substream(site_seed, static_cast<std::uint64_t>(i))));
    }
  };

  const std::uint64_t monitored = substream(seed, "monitored");
  for (int s = 0; s < spec.sites; ++s) {
    emit_site(substream(monitored, static_cast<std::uint64_t>(s)), s);
  }
  const std::uint64_t background = substream(seed, "background");
  for (int s = 0; s < spec.background_sites; ++s) {
    emit_site(substream(background, static_cast<std::uint64_t>(s)), spec.sites);
  }
  ds.roles.assign(ds.traces.size(), Role{});
  return ds;
}

// ---------------------------------------------------------------------------
// Stratified split

namespace {

/// Largest-remainder apportionment of `total` by `fractions`; ties go to the
/// lower index.
std::array<std::size_t, 3> apportion(std::size_t total, const std::array<double, 3>& fractions) {
  std::array<std::size_t, 3> out{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(total);
    out[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(out[s]);
    used += out[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < total; ++k, ++used) out[order[k % 3]] += 1;
  return out;
}

/// Unit-capacity bipartite assignment of leftover traces (per label) to
/// leftover split slots. Preference order is by fractional part; augmenting
/// paths repair greedy dead ends.
class LeftoverAssigner {
 public:
  LeftoverAssigner(std::vector<std::size_t> label_need, std::array<std::size_t, 3> split_need,
                   std::vector<std::array<double, 3>> frac)
      : label_need_(std::move(label_need)),
        split_need_(split_need),
        frac_(std::move(frac)),
        assigned_(label_need_.size(), {false, false, false}) {}

  std::vector<std::array<bool, 3>> solve() {
    for (std::size_t l = 0; l < label_need_.size(); ++l) {
      while (label_need_[l] > 0) {
        std::vector<bool> seen(label_need_.size(), false);
        if (!augment(l, seen)) throw DataError("split: stratified assignment infeasible");
        --label_need_[l];
      }
    }
    return assigned_;
  }

 private:
  std::array<int, 3> order(std::size_t l) const {
    std::array<int, 3> o{0, 1, 2};
    std::stable_sort(o.begin(), o.end(), [&](int a, int b) { return frac_[l][a] > frac_[l][b]; });
    return o;
  }

  // Finds a split slot for one more trace of label l, possibly moving
  // another label's assignment to a different split.
  bool augment(std::size_t l, std::vector<bool>& seen) {
    if (seen[l]) return false;
    seen[l] = true;
    for (int s : order(l)) {
      if (assigned_[l][s] || split_need_[s] == 0) continue;
      assigned_[l][s] = true;
      --split_need_[s];
      return true;
    }
    for (int s : order(l)) {
      if (assigned_[l][s]) continue;
      for (std::size_t other = 0; other < label_need_.size(); ++other) {
        if (other == l || !assigned_[other][s]) continue;
        // Free split s by moving `other` elsewhere.
        assigned_[other][s] = false;
        ++split_need_[s];
        if (augment(other, seen)) {
          assigned_[l][s] = true;
          --split_need_[s];
          return true;
        }
        assigned_[other][s] = true;
        --split_need_[s];
      }
    }
    return false;
  }

  std::vector<std::size_t> label_need_;
  std::array<std::size_t, 3> split_need_;
  std::vector<std::array<double, 3>> frac_;
  std::vector<std::array<bool, 3>> assigned_;
};

}  // namespace

Dataset split(Dataset ds, std::array<double, 3> fractions, std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw DataError("split: fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DataError("split: fractions must sum to 1");

  const std::size_t total = ds.size();
  const auto target = apportion(total, fractions);
  const int positive = static_cast<int>(std::count_if(fractions.begin(), fractions.end(),
                                                      [](double f) { return f > 0.0; }));
  for (int s = 0; s < 3; ++s) {
    if (fractions[s] > 0.0 && target[s] == 0 && total >= static_cast<std::size_t>(positive)) {
      throw DataError(std::string("split: ") + to_string(static_cast<Split>(s)) +
                      " split would be empty");
    }
  }

  // Group indices by label in index order.
  Label max_label = 0;
  for (const Trace& t : ds.traces) max_label = std::max(max_label, t.label);
  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(max_label) + 1);
  for (std::size_t i = 0; i < total; ++i) {
    by_label[static_cast<std::size_t>(ds.traces[i].label)].push_back(i);
  }

  const std::size_t labels = by_label.size();
  std::vector<std::array<std::size_t, 3>> alloc(labels);
  std::vector<std::array<double, 3>> frac(labels);
  std::vector<std::size_t> label_need(labels);
  std::array<std::size_t, 3> split_need = target;
  for (std::size_t l = 0; l < labels; ++l) {
    const double count = static_cast<double>(by_label[l].size());
    std::size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = fractions[s] * count;
      alloc[l][s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      frac[l][s] = exact - static_cast<double>(alloc[l][s]);
      used += alloc[l][s];
      split_need[s] -= alloc[l][s];
    }
    label_need[l] = by_label[l].size() - used;
  }
  const auto extra = LeftoverAssigner(label_need, split_need, frac).solve();

  for (std::size_t l = 0; l < labels; ++l) {
    auto& idx = by_label[l];
    Rng rng(substream(seed, static_cast<std::uint64_t>(l)));
    rng.shuffle(std::span<std::size_t>(idx));
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      const std::size_t take = alloc[l][s] + (extra[l][s] ? 1 : 0);
      for (std::size_t k = 0; k < take; ++k) ds.roles[idx[pos++]].split = static_cast<Split>(s);
    }
  }
  return ds;
}

}  // namespace unlearnwf
