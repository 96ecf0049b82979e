#include "unlearnwf/poison.hpp"

#include <algorithm>
#include <string>

#include "unlearnwf/rng.hpp"

namespace unlearnwf {

TriggerSpec::TriggerSpec(std::vector<Direction> pattern, std::optional<std::size_t> offset)
    : pattern_(std::move(pattern)), offset_(offset) {
  if (pattern_.empty()) throw DataError("trigger pattern must not be empty");
  for (Direction d : pattern_) {
    if (d != 1 && d != -1) throw DataError("trigger pattern symbols must be +1/-1");
  }
}

TriggerSpec TriggerSpec::standard() {
  std::vector<Direction> p(16);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (i / 2) % 2 == 0 ? 1 : -1;
  return TriggerSpec(std::move(p), 8);
}

void TriggerSpec::check_fits(std::size_t n) const {
  if (pattern_.size() * 4 > n) {
    throw DataError("trigger length " + std::to_string(pattern_.size()) +
                    " exceeds n/4 for n=" + std::to_string(n));
  }
}

namespace {

std::size_t prefix_length(const Trace& t) {
  const auto it = std::find(t.dirs.begin(), t.dirs.end(), Direction{0});
  return static_cast<std::size_t>(it - t.dirs.begin());
}

}  // namespace

std::size_t resolve_offset(const Trace& t, const TriggerSpec& trig, std::uint64_t seed) {
  // Capped at n - L so re-truncation never cuts into the pattern.
  const std::size_t n = t.dirs.size();
  const std::size_t len = trig.pattern().size();
  const std::size_t last = std::min(prefix_length(t), n >= len ? n - len : 0);
  if (trig.offset()) return std::min(*trig.offset(), last);
  Rng rng(seed);
  return static_cast<std::size_t>(rng.below(last + 1));
}

Trace inject_trigger(const Trace& t, const TriggerSpec& trig, std::uint64_t seed) {
  const std::size_t at = resolve_offset(t, trig, seed);
  const std::size_t prefix = prefix_length(t);
  std::vector<Direction> raw;
  raw.reserve(prefix + trig.pattern().size());
  raw.insert(raw.end(), t.dirs.begin(), t.dirs.begin() + static_cast<std::ptrdiff_t>(at));
  raw.insert(raw.end(), trig.pattern().begin(), trig.pattern().end());
  raw.insert(raw.end(), t.dirs.begin() + static_cast<std::ptrdiff_t>(at),
             t.dirs.begin() + static_cast<std::ptrdiff_t>(prefix));
  return {normalize(raw, t.dirs.size()), t.label};
}

PoisonOutcome poison_dataset(const Dataset& ds, const PoisonPlan& plan) {
  plan.trigger.check_fits(ds.length);
  const std::vector<std::size_t> train_split = ds.indices(Split::train);
  if (plan.count > train_split.size()) {
    throw DataError("poison count " + std::to_string(plan.count) + " exceeds train split size " +
                    std::to_string(train_split.size()));
  }
  const int labels = ds.output_dim();
  if (plan.mode == TargetMode::all_to_one &&
      (plan.target_label < 0 || plan.target_label >= labels)) {
    throw DataError("poison target label " + std::to_string(plan.target_label) + " out of range");
  }

  // All-to-one can only flip traces that are not already the target.
  std::vector<std::size_t> train;
  for (std::size_t i : train_split) {
    if (plan.mode != TargetMode::all_to_one || ds.traces[i].label != plan.target_label) {
      train.push_back(i);
    }
  }
  if (plan.count > train.size()) {
    throw DataError("poison count " + std::to_string(plan.count) +
                    " exceeds the train traces eligible for the target label");
  }

  // Partial Fisher-Yates: the first `count` entries are the sample.
  Rng pick(substream(plan.seed, "select"));
  for (std::size_t i = 0; i < plan.count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(pick.below(train.size() - i));
    std::swap(train[i], train[j]);
  }
  std::vector<std::size_t> chosen(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(plan.count));
  std::sort(chosen.begin(), chosen.end());

  PoisonOutcome out{ds, chosen, {}};
  const std::uint64_t inject_seed = substream(plan.seed, "inject");
  const std::uint64_t target_seed = substream(plan.seed, "target");
  for (std::size_t i : chosen) {
    const Trace& original = ds.traces[i];
    Label target = plan.target_label;
    if (plan.mode == TargetMode::all_to_random) {
      if (labels < 2) throw DataError("all_to_random needs at least two labels");
      Rng rng(substream(target_seed, static_cast<std::uint64_t>(i)));
      target = static_cast<Label>(rng.below(static_cast<std::uint64_t>(labels - 1)));
      if (target >= original.label) ++target;
    }
    if (target == original.label) {
      throw DataError("poison target equals original label " + std::to_string(target) +
                      " for trace " + std::to_string(i));
    }
    Trace poisoned = inject_trigger(original, plan.trigger,
                                    substream(inject_seed, static_cast<std::uint64_t>(i)));
    poisoned.label = target;
    out.dataset.traces[i] = std::move(poisoned);
    out.dataset.roles[i].is_poisoned_truth = true;
  }
  for (std::size_t i : train_split) {
    if (!std::binary_search(chosen.begin(), chosen.end(), i)) out.clean_indices.push_back(i);
  }
  return out;
}

std::vector<Trace> poison_test_set(std::span<const Trace> test, const TriggerSpec& trig,
                                   std::uint64_t seed) {
  std::vector<Trace> out;
  out.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    out.push_back(inject_trigger(test[i], trig, substream(seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

bool contains_at(std::span<const Direction> dirs, std::span<const Direction> pattern,
                 std::size_t offset) {
  if (offset + pattern.size() > dirs.size()) return false;
  return std::equal(pattern.begin(), pattern.end(), dirs.begin() + static_cast<std::ptrdiff_t>(offset));
}

}  // namespace unlearnwf
