// Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bwcache/cache.hpp"
#include "bwcache/experiment.hpp"
#include "bwcache/metrics.hpp"
#include "bwcache/traceio.hpp"
#include "json.hpp"

using namespace bwcache;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

int g_failures = 0;

void criterion(const char* name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (o.ok && elapsed > budget_seconds) {
    o.ok = false;
    o.detail = "took " + std::to_string(elapsed) + " s, budget " + std::to_string(budget_seconds) + " s";
  }
  if (!o.ok) ++g_failures;
  std::printf("%s  %-44s %7.2fs  %s\n", o.ok ? "PASS" : "FAIL", name, elapsed, o.detail.c_str());
  std::fflush(stdout);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("bwcache_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bwcache");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

ModelConfig toy(std::uint64_t seed) {
  ModelConfig c;  // N = 8, d = 64, F = 4, S = 16, T = 30
  c.seed = seed;
  return c;
}

int reused_count(const RunTrace& t) {
  int n = 0;
  for (const auto& d : t.decisions) n += d.action == Action::reused ? 1 : 0;
  return n;
}

// Skipped block evaluations times the analytic cost of each skipped block.
std::uint64_t expected_flops_saved(const RunTrace& t, const ModelConfig& c) {
  std::uint64_t per_step = 0;
  for (int i = 0; i < t.n_blocks; ++i) per_step += block_flops(c, i % 2 == 0 ? Axis::spatial : Axis::temporal);
  return static_cast<std::uint64_t>(reused_count(t)) * per_step;
}

// Everything in a generated directory, as (name, bytes) pairs.
std::vector<std::pair<std::string, std::string>> directory_bytes(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::directory_iterator(dir)) out.emplace_back(e.path().filename().string(), slurp(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<int> first_reused_step(const std::vector<StepDecision>& ds) {
  for (const auto& d : ds)
    if (d.action == Action::reused) return d.step;
  return std::nullopt;
}

std::string fixture(const std::string& name) { return std::string(BWCACHE_FIXTURE_DIR) + "/" + name; }

// ---- criteria ----

Outcome zero_threshold_equivalence() {
  Outcome o;
  const auto dir = scratch("zero");
  for (int seed = 0; seed < 20 && o.ok; ++seed) {
    const std::string s = std::to_string(seed);
    const auto a = dir / "none", b = dir / "zero";
    o.require(cli({"generate", "--seed", s, "--policy", "none", "--deterministic", "--out", a.string(),
                   "--dump-latent", (dir / "none.bin").string()}) == kExitOk,
              "generate --policy none failed");
    o.require(cli({"generate", "--seed", s, "--delta", "0", "--deterministic", "--out", b.string(), "--dump-latent",
                   (dir / "zero.bin").string()}) == kExitOk,
              "generate --delta 0 failed");
    o.require(read_file_bytes(dir / "none.bin") == read_file_bytes(dir / "zero.bin"), "latent differs, seed " + s);
    o.require(slurp(a / "heatmap.csv") == slurp(b / "heatmap.csv"), "distance trace differs, seed " + s);
    o.require(slurp(a / "reuse_profile.csv") == slurp(b / "reuse_profile.csv"), "decisions differ, seed " + s);
    const auto js = nlohmann::json::parse(slurp(b / "summary.json"));
    o.require(js["flops_saved"] == 0 && js["reuse_rate_blocks"] == 0.0, "nonzero reuse at delta 0, seed " + s);
  }
  fs::remove_all(dir);
  if (o.ok) o.detail = "20 seeds, latents and traces byte-identical";
  return o;
}

struct SweepRun {
  ModelConfig config;
  CachePolicyConfig policy;
  RunResult<float> result;
  bool features_match = true;
  std::string mismatch;
};

// Shared by the cache fidelity, run-length / tail and FLOPs criteria.
std::vector<SweepRun>& sweep() {
  static std::vector<SweepRun> runs = [] {
    const TailRule tails[] = {TailRule::third(), TailRule::half(), TailRule::two_thirds(), TailRule::fixed(5),
                              TailRule::fixed(8)};
    Rng rng(20250101);
    std::vector<SweepRun> out;
    for (int i = 0; i < 20; ++i) {
      SweepRun r;
      r.config = toy(rng.next_u64() % 1000);
      r.policy.delta = 0.05 + 0.45 * rng.next_unit();
      r.policy.reuse_interval = 1 + static_cast<int>(rng.next_u64() % 8);
      r.policy.tail = tails[i % 5];
      const auto model = Model<float>::build(r.config);
      std::vector<Tensor<float>> last_computed;
      const StepObserver<float> observer = [&](const StepDecision& d, std::span<const Tensor<float>> feats) {
        if (d.action == Action::computed) {
          last_computed.assign(feats.begin(), feats.end());
          return;
        }
        bool same = feats.size() == last_computed.size();
        for (std::size_t b = 0; same && b < feats.size(); ++b) same = feats[b] == last_computed[b];
        if (!same && r.features_match) {
          r.features_match = false;
          r.mismatch = "step " + std::to_string(d.step);
        }
      };
      r.result = run_policy(model, r.policy, observer);
      out.push_back(std::move(r));
    }
    return out;
  }();
  return runs;
}

Outcome cache_fidelity() {
  Outcome o;
  int reused = 0;
  for (const auto& r : sweep()) {
    o.require(r.features_match, "stale features differ from the cache, seed " + std::to_string(r.config.seed) +
                                    " " + r.mismatch);
    reused += reused_count(r.result.trace);
  }
  o.require(reused > 0, "sweep never reused a step");
  if (o.ok) o.detail = "20 runs, " + std::to_string(reused) + " reused steps checked";
  return o;
}

Outcome run_length_and_tail() {
  Outcome o;
  std::vector<std::string> rules;
  for (const auto& r : sweep()) {
    const auto& ds = r.result.trace.decisions;
    int run = 0;
    for (const auto& d : ds) {
      run = d.action == Action::reused ? run + 1 : 0;
      o.require(run <= r.policy.reuse_interval, "reuse run longer than R at step " + std::to_string(d.step));
    }
    if (const auto k = first_reused_step(ds)) {
      const int tail = r.policy.tail.tail_size(*k);
      for (const auto& d : ds) {
        o.require(!(d.step < tail && d.action == Action::reused),
                  "reuse inside the tail (" + r.policy.tail.name() + ") at step " + std::to_string(d.step));
      }
      rules.push_back(r.policy.tail.name());
    }
  }
  std::sort(rules.begin(), rules.end());
  rules.erase(std::unique(rules.begin(), rules.end()), rules.end());
  o.require(rules.size() == 5, "not every tail rule triggered caching in the sweep");
  if (o.ok) o.detail = "20 runs, tail rules third/half/twothirds/fixed:5/fixed:8 all triggered";
  return o;
}

Outcome replay_golden() {
  Outcome o;
  CachePolicyConfig p;
  p.delta = 0.15;
  p.reuse_interval = 10;
  p.tail = TailRule::fixed(1);
  const auto ds = replay_trace(load_distance_trace(fixture("u_shape_trace.csv")), p);
  std::string pattern;
  for (const auto& d : ds) pattern += d.action == Action::computed ? 'C' : 'R';
  o.require(pattern == "CCCRRRC", "decision pattern " + pattern);
  std::ostringstream os;
  write_decisions(ds, os);
  o.require(os.str() == slurp(fixture("u_shape_decisions.csv")), "decision CSV differs from the golden file");
  if (o.ok) o.detail = "CCCRRRC matches the golden decisions";
  return o;
}

// U-shaped mean distance with per-block noise.
DistanceTrace random_u_trace(std::uint64_t seed) {
  Rng rng(seed);
  DistanceTrace t;
  t.n_blocks = 8;
  const int T = 30;
  for (int i = 0; i < T; ++i) {
    const double x = static_cast<double>(i) / (T - 1);
    const double base = 0.08 + 0.5 * (x - 0.45) * (x - 0.45) + 0.1 * rng.next_unit();
    std::vector<double> row;
    for (int b = 0; b < 8; ++b) row.push_back(base * (0.7 + 0.6 * rng.next_unit()));
    t.steps.push_back(T - 1 - i);
    t.rows.emplace_back(std::move(row));
  }
  return t;
}

Outcome trigger_monotonicity() {
  Outcome o;
  std::ostringstream triggers;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto trace = random_u_trace(seed);
    int prev = std::numeric_limits<int>::max();
    for (double delta : {0.25, 0.20, 0.15}) {
      auto p = CachePolicyConfig::defaults_for(30);
      p.delta = delta;
      const int k = first_reused_step(replay_trace(trace, p)).value_or(-1);
      // Steps count down, so "no later" means a step index at least as large.
      o.require(k <= prev, "trace " + std::to_string(seed) + ": trigger under delta " + std::to_string(delta) +
                               " precedes a larger delta's");
      prev = k;
      triggers << k << (delta == 0.15 ? ' ' : '/');
    }
  }
  if (o.ok) o.detail = "first triggers (0.25/0.20/0.15): " + triggers.str();
  return o;
}

Outcome flops_exactness() {
  Outcome o;
  int runs = 0;
  for (const auto& r : sweep()) {
    const auto s = summarize(r.result.trace, r.config);
    o.require(s.flops_saved == expected_flops_saved(r.result.trace, r.config),
              "flops_saved mismatch, seed " + std::to_string(r.config.seed));
    ++runs;
  }
  // The zero-threshold runs: nothing skipped.
  for (int seed = 0; seed < 20; ++seed) {
    const auto model = Model<float>::build(toy(static_cast<std::uint64_t>(seed)));
    CachePolicyConfig p;
    p.delta = 0.0;
    const auto run = run_policy(model, p);
    o.require(summarize(run.trace, model.config).flops_saved == expected_flops_saved(run.trace, model.config),
              "flops_saved mismatch at delta 0");
    ++runs;
  }
  if (o.ok) o.detail = std::to_string(runs) + " runs exact";
  return o;
}

Outcome quality_trend() {
  Outcome o;
  const double deltas[] = {0.05, 0.15, 0.30};
  double psnr_sum[3] = {0, 0, 0};
  double reuse_sum[3] = {0, 0, 0};
  for (int seed = 0; seed < 10; ++seed) {
    const auto model = Model<float>::build(toy(static_cast<std::uint64_t>(100 + seed)));
    CachePolicyConfig none;
    none.kind = PolicyKind::none;
    const auto ref = run_policy(model, none).final_latent;
    for (int i = 0; i < 3; ++i) {
      auto p = CachePolicyConfig::defaults_for(model.config.steps);
      p.delta = deltas[i];
      const auto run = run_policy(model, p);
      const auto s = summarize(run.trace, model, run.final_latent, &ref);
      psnr_sum[i] += *s.psnr_db;
      reuse_sum[i] += s.reuse_rate_blocks;
    }
  }
  char buf[200];
  std::snprintf(buf, sizeof buf, "PSNR %.2f > %.2f > %.2f dB, reuse %.3f < %.3f < %.3f", psnr_sum[0] / 10,
                psnr_sum[1] / 10, psnr_sum[2] / 10, reuse_sum[0] / 10, reuse_sum[1] / 10, reuse_sum[2] / 10);
  o.require(psnr_sum[0] > psnr_sum[1] && psnr_sum[1] > psnr_sum[2], std::string("PSNR not decreasing: ") + buf);
  o.require(reuse_sum[0] < reuse_sum[1] && reuse_sum[1] < reuse_sum[2], std::string("reuse not increasing: ") + buf);
  o.detail = buf;
  return o;
}

Outcome wall_clock_speedup() {
  Outcome o;
  ModelConfig c = toy(0);
  c.hidden_dim = 256;
  const auto model = Model<float>::build(c, MatmulMode::blocked);
  CachePolicyConfig none;
  none.kind = PolicyKind::none;
  auto cached = CachePolicyConfig::defaults_for(c.steps);
  cached.reuse_interval = 6;
  double best_none = std::numeric_limits<double>::infinity();
  double best_cached = best_none;
  double reuse = 0.0;
  for (int rep = 0; rep < 3; ++rep) {
    best_none = std::min(best_none, run_policy(model, none).trace.wall_seconds);
    const auto run = run_policy(model, cached);
    best_cached = std::min(best_cached, run.trace.wall_seconds);
    reuse = summarize(run.trace, c).reuse_rate_blocks;
  }
  const double speedup = best_none / best_cached;
  char buf[160];
  std::snprintf(buf, sizeof buf, "d=256, R=6: reuse %.3f, none %.3fs, cached %.3fs, speedup %.2fx", reuse, best_none,
                best_cached, speedup);
  o.require(reuse >= 0.4, std::string("reuse rate below 0.4: ") + buf);
  o.require(speedup >= 1.2, std::string("speedup below 1.2x: ") + buf);
  o.detail = buf;
  return o;
}

Outcome metric_identities() {
  Outcome o;
  Rng rng(99);
  const auto a = rand_normal<double>(rng, {8, 6});
  o.require(psnr(a, a) == kPsnrIdentical, "identical PSNR is not the infinity sentinel");

  // MSE equal to R^2: shift every element by the reference range.
  const double R = a.data().maxCoeff() - a.data().minCoeff();
  Tensor<double> shifted = a;
  shifted.data().array() += R;
  o.require(std::abs(psnr(a, shifted)) <= 1e-9, "MSE = R^2 is not 0 dB");
  o.require(std::abs(ssim_global(a, a) - 1.0) <= 1e-9, "SSIM identity is not 1");

  for (int i = 0; i < 100; ++i) {
    const auto x = rand_normal<double>(rng, {6, 5});
    auto y = rand_normal<double>(rng, {6, 5});
    y.data() += 0.5 * x.data();
    o.require(std::abs(ssim_global(x, y) - ssim_global(y, x)) <= 1e-12, "SSIM not symmetric");

    const double scale = std::exp(8.0 * (rng.next_unit() - 0.5));
    Tensor<double> sx = x, sy = y;
    sx.data() *= scale;
    sy.data() *= scale;
    const double base = relative_l1(x, y);
    o.require(std::abs(relative_l1(sx, sy) - base) <= 1e-6 * base, "relative_l1 not scale invariant");
  }
  if (o.ok) o.detail = "sentinel, 0 dB, SSIM 1, 100 symmetric / scale-invariant pairs";
  return o;
}

Outcome round_trip_and_determinism() {
  Outcome o;
  const auto dir = scratch("roundtrip");
  const std::vector<std::string> flags = {"generate", "--seed", "7", "--delta", "0.3", "--quality", "--deterministic"};
  auto with_out = [&](const fs::path& out) {
    auto f = flags;
    for (const std::string& s : {std::string("--out"), out.string(), std::string("--dump-latent"),
                                 (out / "latent.bin").string()})
      f.push_back(s);
    return f;
  };
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  o.require(cli(with_out(dir / "a")) == kExitOk && cli(with_out(dir / "b")) == kExitOk, "generate failed");
  const auto fa = directory_bytes(dir / "a");
  const auto fb = directory_bytes(dir / "b");
  o.require(fa.size() == 4, "expected 4 output files");
  o.require(fa == fb, "repeated runs produced different bytes");

  // Export -> ingest preserves every distance to 9 significant digits.
  const auto model = Model<double>::build(toy(7));
  const auto run = run_policy(model, CachePolicyConfig::defaults_for(30));
  std::ostringstream os;
  write_heatmap(run.trace, os);
  std::istringstream is(os.str());
  const auto back = read_distance_trace(is);
  int values = 0;
  for (int i = 0; i < run.trace.steps(); ++i) {
    const auto& want = run.trace.decisions[i].per_block_l1;
    o.require(want.has_value() == back.rows[i].has_value(), "distance presence changed");
    if (!want) continue;
    for (std::size_t b = 0; b < want->size(); ++b) {
      const double w = (*want)[b], g = (*back.rows[i])[b];
      o.require(std::abs(w - g) <= 5e-9 * std::abs(w), "distance lost precision");
      ++values;
    }
  }
  fs::remove_all(dir);
  if (o.ok) o.detail = "4 files byte-identical, " + std::to_string(values) + " distances round-tripped";
  return o;
}

}  // namespace

int main() {
  criterion("zero threshold matches the uncached sampler", 30, zero_threshold_equivalence);
  criterion("reused features equal the cache", 60, cache_fidelity);
  criterion("reuse runs bounded, protected tail honoured", 60, run_length_and_tail);
  criterion("U-shaped trace replay golden", 5, replay_golden);
  criterion("larger threshold triggers no later", 5, trigger_monotonicity);
  criterion("flops_saved is exact", 60, flops_exactness);
  criterion("quality falls and reuse rises with threshold", 300, quality_trend);
  criterion("wall-clock speedup at d=256", 120, wall_clock_speedup);
  criterion("metric identities", 5, metric_identities);
  criterion("round trip and byte determinism", 10, round_trip_and_determinism);
  std::printf("%d of 10 criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
