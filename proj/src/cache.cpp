#include "bwcache/cache.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>

namespace bwcache {

const char* to_string(Action action) { return action == Action::computed ? "computed" : "reused"; }

const char* to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::none:
      return "none";
    case PolicyKind::bwcache:
      return "bwcache";
    case PolicyKind::static_interval:
      return "static";
  }
  return "?";
}

void RunTrace::validate() const {
  const int T = steps();
  for (int i = 0; i < T; ++i) {
    if (decisions[i].step != T - 1 - i) {
      throw std::logic_error("run trace step order broken at position " + std::to_string(i));
    }
  }
  if (!timings.empty() && static_cast<int>(timings.size()) != T) {
    throw std::logic_error("run trace has " + std::to_string(timings.size()) + " timings for " + std::to_string(T) +
                           " steps");
  }
}

DistanceTrace DistanceTrace::from_means(const std::vector<double>& means) {
  DistanceTrace t;
  t.n_blocks = 1;
  const int T = static_cast<int>(means.size());
  for (int i = 0; i < T; ++i) {
    t.steps.push_back(T - 1 - i);
    t.rows.emplace_back(std::vector<double>{means[i]});
  }
  return t;
}

TailRule TailRule::fixed(int steps) {
  if (steps < 0) throw std::invalid_argument("fixed tail length must be >= 0");
  return TailRule(0, 0, steps);
}

int TailRule::tail_size(int trigger_step) const {
  if (is_fixed()) return fixed_;
  const int remaining = trigger_step + 1;
  return (numerator_ * remaining + denominator_ - 1) / denominator_;
}

std::string TailRule::name() const {
  if (is_fixed()) return "fixed:" + std::to_string(fixed_);
  if (numerator_ == 1 && denominator_ == 3) return "third";
  if (numerator_ == 1 && denominator_ == 2) return "half";
  return "twothirds";
}

TailRule TailRule::parse(const std::string& text) {
  if (text == "third") return third();
  if (text == "half") return half();
  if (text == "twothirds") return two_thirds();
  const std::string prefix = "fixed:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string digits = text.substr(prefix.size());
    std::size_t used = 0;
    int m = -1;
    try {
      m = std::stoi(digits, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == digits.size() && !digits.empty() && m >= 0) return fixed(m);
  }
  throw std::invalid_argument("unknown tail rule '" + text + "' (expected third, half, twothirds or fixed:<m>)");
}

int CachePolicyConfig::default_reuse_interval(int steps) {
  // ceil(0.10 * steps) without floating point.
  return std::max(1, (steps + 9) / 10);
}

CachePolicyConfig CachePolicyConfig::defaults_for(int steps) {
  CachePolicyConfig p;
  p.reuse_interval = default_reuse_interval(steps);
  return p;
}

void CachePolicyConfig::validate(int total_steps) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid cache policy: " + what); };
  if (!(delta >= 0.0)) fail("delta must be >= 0");
  if (reuse_interval < 1) fail("reuse interval must be >= 1");
  if (static_stride < 1) fail("static stride must be >= 1");
  if (tail.is_fixed() && tail.tail_size(0) >= total_steps) {
    fail("fixed tail " + std::to_string(tail.tail_size(0)) + " must be < steps " + std::to_string(total_steps));
  }
}

template <typename Scalar>
double relative_l1(const Tensor<Scalar>& current, const Tensor<Scalar>& previous) {
  if (current.shape() != previous.shape()) {
    throw DimensionError("relative_l1 shape mismatch: " + shape_string(current.shape()) + " vs " +
                         shape_string(previous.shape()));
  }
  const auto cur = current.data().template cast<double>().array();
  const auto prev = previous.data().template cast<double>().array();
  const double denom = prev.abs().sum();
  if (!(denom > 0.0)) throw DegenerateError("relative_l1: previous features have zero L1 norm");
  return (cur - prev).abs().sum() / denom;
}

AggregateDistance aggregate_distances(std::span<const double> per_block) {
  if (per_block.empty()) throw std::invalid_argument("aggregate_distances: no block distances");
  double sum = 0.0;
  for (double v : per_block) sum += v;
  return {sum, sum / static_cast<double>(per_block.size())};
}

Decision decide(const SchedulerState& state, std::optional<double> mean_l1, int step, int total_steps,
                const CachePolicyConfig& policy) {
  if (step < 0 || step >= total_steps) {
    throw ProtocolError("decide: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  const int expected = state.last_step ? *state.last_step - 1 : total_steps - 1;
  if (step != expected) {
    throw ProtocolError("decide: expected step " + std::to_string(expected) + ", got " + std::to_string(step));
  }

  Decision d{Action::computed, state};
  d.next.last_step = step;
  auto finish = [&](Action action) {
    d.action = action;
    d.next.last_action = action;
    if (action == Action::computed) ++d.next.computed_steps;
    return d;
  };

  switch (policy.kind) {
    case PolicyKind::none:
      return finish(Action::computed);
    case PolicyKind::static_interval:
      return finish((total_steps - 1 - step) % policy.static_stride == 0 ? Action::computed : Action::reused);
    case PolicyKind::bwcache:
      break;
  }

  const bool measured = state.last_action == Action::computed && state.computed_steps >= 2;
  if (measured && !mean_l1) {
    throw ProtocolError("decide: step " + std::to_string(step) + " needs the distance measured at the previous step");
  }

  // No distance exists until two steps have been computed.
  if (state.computed_steps < 2) return finish(Action::computed);

  // Protected tail, frozen at the first trigger; before that the current step is the candidate.
  const int k = state.trigger_step.value_or(step);
  if (step < policy.tail.tail_size(k)) {
    d.next.mode = CacheMode::computing;
    d.next.reuse_run_length = 0;
    return finish(Action::computed);
  }

  if (state.mode == CacheMode::computing) {
    if (*mean_l1 < policy.delta) {
      d.next.mode = CacheMode::caching;
      if (!d.next.trigger_step) d.next.trigger_step = step;
      d.next.reuse_run_length = 1;
      return finish(Action::reused);
    }
    return finish(Action::computed);
  }

  // Caching. A computed previous step was a refresh: re-check the indicator.
  if (state.last_action == Action::computed) {
    if (*mean_l1 >= policy.delta) {
      d.next.mode = CacheMode::computing;
      d.next.reuse_run_length = 0;
      return finish(Action::computed);
    }
    d.next.reuse_run_length = 1;
    return finish(Action::reused);
  }
  if (state.reuse_run_length >= policy.reuse_interval) {
    d.next.reuse_run_length = 0;
    return finish(Action::computed);
  }
  ++d.next.reuse_run_length;
  return finish(Action::reused);
}

namespace {

void fill_distances(StepDecision& rec, std::vector<double> per_block) {
  const AggregateDistance agg = aggregate_distances(per_block);
  rec.per_block_l1 = std::move(per_block);
  rec.arl1 = agg.arl1;
  rec.mean_l1 = agg.mean;
}

}  // namespace

template <typename Scalar>
RunResult<Scalar> run_policy(const Model<Scalar>& model, const Tensor<Scalar>& x_T, const CachePolicyConfig& policy,
                             const StepObserver<Scalar>& observer) {
  using clock = std::chrono::steady_clock;
  const int T = model.schedule.steps();
  policy.validate(T);
  if (x_T.shape() != model.config.latent_shape()) {
    throw DimensionError("run_policy: initial latent " + shape_string(x_T.shape()) + " does not match " +
                         shape_string(model.config.latent_shape()));
  }

  RunResult<Scalar> result;
  RunTrace& trace = result.trace;
  trace.n_blocks = static_cast<int>(model.blocks.size());
  trace.config_fingerprint = config_fingerprint(model.config, policy);
  trace.decisions.reserve(static_cast<std::size_t>(T));
  trace.timings.reserve(static_cast<std::size_t>(T));

  BlockCacheState<Scalar> cache;
  Tensor<Scalar> x = x_T;
  std::optional<double> pending_mean;
  const auto run_start = clock::now();
  for (int s = T - 1; s >= 0; --s) {
    const auto step_start = clock::now();
    const Decision d = decide(cache.scheduler, pending_mean, s, T, policy);
    cache.scheduler = d.next;

    StepDecision rec;
    rec.step = s;
    rec.action = d.action;
    Tensor<Scalar> eps;
    if (d.action == Action::computed) {
      DenoiserOutput<Scalar> out = denoiser_forward(x, s, model);
      if (!cache.cached_outputs.empty()) {
        // Compared against the last computed step, which may be several steps stale.
        std::vector<double> per_block;
        per_block.reserve(out.block_outputs.size());
        for (std::size_t i = 0; i < out.block_outputs.size(); ++i) {
          per_block.push_back(relative_l1(out.block_outputs[i], cache.cached_outputs[i]));
        }
        fill_distances(rec, std::move(per_block));
      }
      cache.cached_outputs = std::move(out.block_outputs);
      cache.cached_at_step = s;
      eps = std::move(out.eps_pred);
    } else {
      eps = model.read_out(cache.cached_outputs.back());
    }
    if (observer) observer(rec, cache.cached_outputs);
    pending_mean = rec.mean_l1;
    x = reverse_step(x, eps, s, model.schedule);
    trace.decisions.push_back(std::move(rec));
    trace.timings.push_back(std::chrono::duration<double>(clock::now() - step_start).count());
  }
  trace.wall_seconds = std::chrono::duration<double>(clock::now() - run_start).count();
  result.final_latent = std::move(x);
  return result;
}

template <typename Scalar>
RunResult<Scalar> run_policy(const Model<Scalar>& model, const CachePolicyConfig& policy,
                             const StepObserver<Scalar>& observer) {
  return run_policy(model, model.initial_noise(), policy, observer);
}

std::vector<StepDecision> replay_trace(const DistanceTrace& trace, const CachePolicyConfig& policy) {
  const int T = trace.size();
  if (T < 2) throw FormatError("replay needs at least 2 steps, trace has " + std::to_string(T));
  if (trace.n_blocks < 1) throw FormatError("replay trace has no blocks");
  if (static_cast<int>(trace.steps.size()) != T) throw FormatError("replay trace step list length mismatch");
  for (int i = 0; i < T; ++i) {
    if (trace.steps[i] != T - 1 - i) {
      throw FormatError("trace row " + std::to_string(i) + " has step " + std::to_string(trace.steps[i]) +
                        ", expected " + std::to_string(T - 1 - i));
    }
    if (trace.rows[i] && static_cast<int>(trace.rows[i]->size()) != trace.n_blocks) {
      throw FormatError("ragged trace: step " + std::to_string(trace.steps[i]) + " has " +
                        std::to_string(trace.rows[i]->size()) + " values, expected " +
                        std::to_string(trace.n_blocks));
    }
  }
  policy.validate(T);

  std::vector<StepDecision> out;
  out.reserve(static_cast<std::size_t>(T));
  SchedulerState state;
  std::optional<double> pending_mean;
  for (int i = 0; i < T; ++i) {
    const int s = trace.steps[i];
    const Decision d = decide(state, pending_mean, s, T, policy);
    const bool had_prior_computed = state.computed_steps > 0;
    state = d.next;
    StepDecision rec;
    rec.step = s;
    rec.action = d.action;
    if (d.action == Action::computed && had_prior_computed) {
      if (!trace.rows[i]) {
        throw FormatError("step " + std::to_string(s) + " is recomputed under this policy but the trace has no "
                          "distances for it");
      }
      fill_distances(rec, *trace.rows[i]);
    }
    pending_mean = rec.mean_l1;
    out.push_back(std::move(rec));
  }
  return out;
}

std::uint64_t config_fingerprint(const ModelConfig& model, const CachePolicyConfig& policy) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "blocks=%d;dim=%d;heads=%d;frames=%d;tokens=%d;steps=%d;seed=%llu;policy=%s;delta=%.17g;"
                "reuse=%d;tail=%s;stride=%d",
                model.n_blocks, model.hidden_dim, model.n_heads, model.frames, model.tokens_per_frame, model.steps,
                static_cast<unsigned long long>(model.seed), to_string(policy.kind), policy.delta,
                policy.reuse_interval, policy.tail.name().c_str(), policy.static_stride);
  // FNV-1a, 64 bit.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* p = buf; *p; ++p) {
    h ^= static_cast<unsigned char>(*p);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template double relative_l1<float>(const Tensor<float>&, const Tensor<float>&);
template double relative_l1<double>(const Tensor<double>&, const Tensor<double>&);
template RunResult<float> run_policy<float>(const Model<float>&, const Tensor<float>&, const CachePolicyConfig&,
                                            const StepObserver<float>&);
template RunResult<double> run_policy<double>(const Model<double>&, const Tensor<double>&, const CachePolicyConfig&,
                                              const StepObserver<double>&);
template RunResult<float> run_policy<float>(const Model<float>&, const CachePolicyConfig&, const StepObserver<float>&);
template RunResult<double> run_policy<double>(const Model<double>&, const CachePolicyConfig&,
                                              const StepObserver<double>&);

}  // namespace bwcache
