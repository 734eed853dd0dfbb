#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bwcache/errors.hpp"
#include "bwcache/model.hpp"
#include "bwcache/tensor.hpp"
#include "bwcache/trace.hpp"

namespace bwcache {

enum class PolicyKind { none, bwcache, static_interval };

const char* to_string(PolicyKind kind);

/// Length of the protected tail once caching triggers at step k.
///
/// Fraction rules cover ceil(f * (k + 1)) steps, i.e. a fraction of the
/// steps remaining at the trigger counted inclusively; fixed rules cover m.
/// A step s is protected when s < tail_size(k).
class TailRule {
 public:
  static TailRule third() { return TailRule(1, 3, 0); }
  static TailRule half() { return TailRule(1, 2, 0); }
  static TailRule two_thirds() { return TailRule(2, 3, 0); }
  static TailRule fixed(int steps);

  bool is_fixed() const { return denominator_ == 0; }
  int tail_size(int trigger_step) const;
  /// CLI spelling: third, half, twothirds, fixed:<m>.
  std::string name() const;
  static TailRule parse(const std::string& text);

  friend bool operator==(const TailRule&, const TailRule&) = default;

 private:
  TailRule(int num, int den, int fixed) : numerator_(num), denominator_(den), fixed_(fixed) {}
  int numerator_;
  int denominator_;
  int fixed_;
};

struct CachePolicyConfig {
  PolicyKind kind = PolicyKind::bwcache;
  double delta = 0.15;
  int reuse_interval = 3;
  TailRule tail = TailRule::half();
  int static_stride = 2;

  /// delta = 0.15, R = ceil(0.10 * steps), tail = half.
  static CachePolicyConfig defaults_for(int steps);
  static int default_reuse_interval(int steps);

  void validate(int total_steps) const;

  friend bool operator==(const CachePolicyConfig&, const CachePolicyConfig&) = default;
};

enum class CacheMode { computing, caching };

/// Scheduling half of the per-run cache state. Pure value; decide() maps
/// one state to the next.
struct SchedulerState {
  CacheMode mode = CacheMode::computing;
  std::optional<int> trigger_step;
  int reuse_run_length = 0;
  int computed_steps = 0;
  std::optional<int> last_step;
  std::optional<Action> last_action;
};

/// Per-run cache: the scheduler plus the block features of the most
/// recent computed step.
template <typename Scalar>
struct BlockCacheState {
  SchedulerState scheduler;
  std::vector<Tensor<Scalar>> cached_outputs;
  std::optional<int> cached_at_step;
};

struct Decision {
  Action action;
  SchedulerState next;
};

/// ||current - previous||_1 / ||previous||_1, accumulated in double.
template <typename Scalar>
double relative_l1(const Tensor<Scalar>& current, const Tensor<Scalar>& previous);

struct AggregateDistance {
  double arl1;
  double mean;
};

AggregateDistance aggregate_distances(std::span<const double> per_block);

/// One step of the caching state machine.
///
/// Steps arrive in execution order T-1, T-2, ..., 0. `mean_l1` is the mean
/// block distance measured at the previous step; it must be present when
/// that step was computed and was not the first computed step.
Decision decide(const SchedulerState& state, std::optional<double> mean_l1, int step, int total_steps,
                const CachePolicyConfig& policy);

/// Called once per step with the block features the step used: fresh on
/// computed steps, the cached set on reused steps.
template <typename Scalar>
using StepObserver = std::function<void(const StepDecision&, std::span<const Tensor<Scalar>>)>;

template <typename Scalar>
struct RunResult {
  Tensor<Scalar> final_latent;
  RunTrace trace;
};

/// Full denoising loop under `policy`, starting from `x_T`.
template <typename Scalar>
RunResult<Scalar> run_policy(const Model<Scalar>& model, const Tensor<Scalar>& x_T, const CachePolicyConfig& policy,
                             const StepObserver<Scalar>& observer = {});

/// Starts from the model's seeded initial noise.
template <typename Scalar>
RunResult<Scalar> run_policy(const Model<Scalar>& model, const CachePolicyConfig& policy,
                             const StepObserver<Scalar>& observer = {});

/// Drives decide() over recorded distances without a model. Row values on
/// reused steps are ignored.
std::vector<StepDecision> replay_trace(const DistanceTrace& trace, const CachePolicyConfig& policy);

std::uint64_t config_fingerprint(const ModelConfig& model, const CachePolicyConfig& policy);

}  // namespace bwcache
