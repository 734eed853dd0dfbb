#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace bwcache {

enum class Action { computed, reused };

const char* to_string(Action action);

/// Outcome of one denoising step. Distances are present only on computed
/// steps that had an earlier computed step to compare against.
struct StepDecision {
  int step = 0;
  Action action = Action::computed;
  std::optional<std::vector<double>> per_block_l1;
  std::optional<double> mean_l1;
  std::optional<double> arl1;

  friend bool operator==(const StepDecision&, const StepDecision&) = default;
};

struct RunTrace {
  int n_blocks = 0;
  std::vector<StepDecision> decisions;  // execution order, steps T-1 .. 0
  std::vector<double> timings;          // wall seconds per step
  std::uint64_t config_fingerprint = 0;
  double wall_seconds = 0.0;

  int steps() const { return static_cast<int>(decisions.size()); }
  /// Throws std::logic_error unless steps run T-1 down to 0.
  void validate() const;
};

/// Per-step block distances in execution order, as recorded by a run or
/// loaded from a heatmap CSV. A missing row means no distances were
/// recorded for that step.
struct DistanceTrace {
  int n_blocks = 0;
  std::vector<int> steps;
  std::vector<std::optional<std::vector<double>>> rows;

  int size() const { return static_cast<int>(rows.size()); }
  /// From per-step means with one block, steps numbered T-1 .. 0.
  static DistanceTrace from_means(const std::vector<double>& means);
};

}  // namespace bwcache
