#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "unlearnwf/model.hpp"
#include "unlearnwf/rng.hpp"
#include "unlearnwf/trace.hpp"

namespace testutil {

using namespace unlearnwf;

// Random unpadded-prefix trace of length n with `pad` trailing zeros.
inline Trace random_trace(Rng& rng, std::size_t n, int labels, std::size_t pad = 0) {
  Trace t;
  t.dirs.assign(n, 0);
  for (std::size_t i = 0; i + pad < n; ++i) t.dirs[i] = rng.bernoulli(0.5) ? 1 : -1;
  t.label = static_cast<Label>(rng.below(static_cast<std::uint64_t>(labels)));
  return t;
}

inline std::vector<Trace> random_traces(std::uint64_t seed, std::size_t count, std::size_t n, int labels) {
  Rng rng(seed);
  std::vector<Trace> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_trace(rng, n, labels, rng.below(n / 4)));
  return out;
}

inline Dataset make_dataset(std::vector<Trace> traces, std::size_t n, int labels, bool open = false) {
  Dataset ds;
  ds.length = n;
  ds.num_labels = labels;
  ds.open_world = open;
  ds.roles.assign(traces.size(), Role{});
  ds.traces = std::move(traces);
  return ds;
}

// Small convnet covering every layer type.
inline Architecture small_arch(std::size_t n = 32, int outputs = 3) {
  return Architecture{n,
                      {Layer::conv1d(1, 3, 4, 2), Layer::relu(), Layer::conv1d(3, 4, 3, 2), Layer::relu(),
                       Layer::global_avg_pool(), Layer::dense(4, outputs)}};
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("unlearnwf_test_" + tag + "_" + std::to_string(mix64(reinterpret_cast<std::uintptr_t>(this)) % 100000));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace testutil
