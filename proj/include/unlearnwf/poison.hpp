#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "unlearnwf/trace.hpp"

namespace unlearnwf {

/// Backdoor trigger: a short direction pattern spliced into a trace.
class TriggerSpec {
 public:
  /// `offset` empty means a uniformly random offset inside the non-padding
  /// prefix. Throws DataError for an empty pattern or symbols other than +-1.
  TriggerSpec(std::vector<Direction> pattern, std::optional<std::size_t> offset);

  /// Alternating pairs [+1,+1,-1,-1,...] of length 16 at offset 8.
  static TriggerSpec standard();

  const std::vector<Direction>& pattern() const { return pattern_; }
  const std::optional<std::size_t>& offset() const { return offset_; }

  /// Throws when the pattern is longer than a quarter of the trace length.
  void check_fits(std::size_t n) const;

 private:
  std::vector<Direction> pattern_;
  std::optional<std::size_t> offset_;
};

enum class TargetMode { all_to_one, all_to_random };

struct PoisonPlan {
  TriggerSpec trigger = TriggerSpec::standard();
  std::size_t count = 0;
  TargetMode mode = TargetMode::all_to_one;
  Label target_label = 0;
  std::uint64_t seed = 0;
};

struct PoisonOutcome {
  Dataset dataset;
  std::vector<std::size_t> poisoned_indices;  // ascending
  std::vector<std::size_t> clean_indices;     // rest of the train split
};

/// Offset actually used for `t`: the fixed offset clamped to the end of the
/// non-padding prefix, or a seeded draw in [0, prefix]. Either way it is
/// capped at n - L so the whole pattern survives re-truncation.
std::size_t resolve_offset(const Trace& t, const TriggerSpec& trig, std::uint64_t seed);

/// Splices the pattern in at the resolved offset and re-truncates to the
/// trace's length. Label is untouched.
Trace inject_trigger(const Trace& t, const TriggerSpec& trig, std::uint64_t seed);

/// Poisons `plan.count` training traces, sampled without replacement.
/// Throws DataError if the count exceeds the train split, or if a target
/// label would equal the original label.
PoisonOutcome poison_dataset(const Dataset& ds, const PoisonPlan& plan);

/// Triggered copies of `test` that keep their original, correct labels.
std::vector<Trace> poison_test_set(std::span<const Trace> test, const TriggerSpec& trig,
                                   std::uint64_t seed);

/// True if `dirs` holds `pattern` contiguously starting at `offset`.
bool contains_at(std::span<const Direction> dirs, std::span<const Direction> pattern,
                 std::size_t offset);

}  // namespace unlearnwf
