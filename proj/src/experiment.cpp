#include "bwcache/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "bwcache/metrics.hpp"
#include "bwcache/traceio.hpp"
#include "json.hpp"

namespace bwcache {

namespace {

using json = nlohmann::json;

// Raised for bad flags or config content; maps to kExitUsage.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

PolicyKind parse_policy_kind(const std::string& name) {
  if (name == "none") return PolicyKind::none;
  if (name == "bwcache") return PolicyKind::bwcache;
  if (name == "static") return PolicyKind::static_interval;
  throw UsageError("unknown policy '" + name + "' (expected none, bwcache or static)");
}

Artifact parse_artifact(const std::string& name) {
  if (name == "heatmap") return Artifact::heatmap;
  if (name == "reuse_profile") return Artifact::reuse_profile;
  if (name == "summary") return Artifact::summary;
  throw UsageError("unknown --emit value '" + name + "' (expected heatmap, reuse_profile or summary)");
}

struct PolicyFlags {
  std::string kind = "bwcache";
  double delta = 0.15;
  std::optional<int> reuse_interval;
  std::string tail = "half";
  int static_stride = 2;

  CachePolicyConfig resolve(int steps) const {
    CachePolicyConfig p;
    p.kind = parse_policy_kind(kind);
    p.delta = delta;
    p.reuse_interval = reuse_interval.value_or(CachePolicyConfig::default_reuse_interval(steps));
    try {
      p.tail = TailRule::parse(tail);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    p.static_stride = static_stride;
    return p;
  }
};

struct CommonFlags {
  ModelConfig model;
  PolicyFlags policy;
  std::string out;
  std::vector<std::string> emit;
  std::string dump_latent;
  bool deterministic = false;
};

void add_model_options(CLI::App* app, ModelConfig& m) {
  app->add_option("--steps", m.steps, "Denoising steps T")->capture_default_str();
  app->add_option("--blocks", m.n_blocks, "DiT blocks N")->capture_default_str();
  app->add_option("--dim", m.hidden_dim, "Hidden width d")->capture_default_str();
  app->add_option("--heads", m.n_heads, "Attention heads")->capture_default_str();
  app->add_option("--frames", m.frames, "Frames F")->capture_default_str();
  app->add_option("--tokens", m.tokens_per_frame, "Tokens per frame S")->capture_default_str();
  app->add_option("--seed", m.seed, "Seed for weights and initial noise")->capture_default_str();
}

void add_policy_options(CLI::App* app, PolicyFlags& p) {
  app->add_option("--policy", p.kind, "none | bwcache | static")->capture_default_str();
  app->add_option("--delta", p.delta, "Similarity threshold")->capture_default_str();
  app->add_option("--reuse-interval", p.reuse_interval, "Max consecutive reused steps (default ceil(0.1 T))");
  app->add_option("--tail", p.tail, "third | half | twothirds | fixed:<m>")->capture_default_str();
  app->add_option("--static-stride", p.static_stride, "Recompute stride of the static policy")
      ->capture_default_str();
}

void add_output_options(CLI::App* app, CommonFlags& f) {
  app->add_option("--out", f.out, "Output directory (fallback: $BWCACHE_OUT_DIR)");
  app->add_option("--emit", f.emit, "heatmap,reuse_profile,summary")->delimiter(',');
  app->add_option("--dump-latent", f.dump_latent, "Write the final latent in binary form");
  app->add_flag("--deterministic", f.deterministic,
                "Ordered matmul reductions; wall-clock fields written as 0 for byte-stable output");
}

std::filesystem::path resolve_output_dir(const std::string& flag) {
  std::filesystem::path dir;
  if (!flag.empty()) {
    dir = flag;
  } else if (const char* env = std::getenv("BWCACHE_OUT_DIR"); env && *env) {
    dir = env;
  } else {
    throw UsageError("no output directory: pass --out or set BWCACHE_OUT_DIR");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  return dir;
}

std::set<Artifact> resolve_emit(const std::vector<std::string>& names) {
  if (names.empty()) return {Artifact::heatmap, Artifact::reuse_profile, Artifact::summary};
  std::set<Artifact> out;
  for (const auto& n : names) out.insert(parse_artifact(n));
  return out;
}

void validate_or_usage(const ModelConfig& model, const CachePolicyConfig& policy) {
  try {
    model.validate();
    policy.validate(model.steps);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json summary_object(const RunSummary& s) { return json::parse(summary_json(s)); }

json policy_object(const CachePolicyConfig& p) {
  return {{"kind", to_string(p.kind)},
          {"delta", p.delta},
          {"reuse_interval", p.reuse_interval},
          {"tail", p.tail.name()},
          {"static_stride", p.static_stride}};
}

MatmulMode mode_for(bool deterministic) { return deterministic ? MatmulMode::deterministic : MatmulMode::blocked; }

int cmd_generate(const CommonFlags& f, bool quality, std::ostream& out) {
  ExperimentConfig cfg;
  cfg.model = f.model;
  cfg.policy = f.policy.resolve(f.model.steps);
  validate_or_usage(cfg.model, cfg.policy);
  cfg.emit = resolve_emit(f.emit);
  cfg.output_dir = resolve_output_dir(f.out);

  const auto model = Model<float>::build(cfg.model, mode_for(f.deterministic));
  const auto result = run_policy(model, cfg.policy);
  std::optional<Tensor<float>> reference;
  if (quality) reference = run_policy(model, CachePolicyConfig{PolicyKind::none}).final_latent;
  RunSummary summary = summarize(result.trace, model, result.final_latent, reference ? &*reference : nullptr);
  if (f.deterministic) summary.wall_seconds = 0.0;

  if (cfg.emit.contains(Artifact::heatmap)) export_heatmap(result.trace, cfg.output_dir / "heatmap.csv");
  if (cfg.emit.contains(Artifact::reuse_profile)) {
    export_reuse_profile(result.trace, cfg.output_dir / "reuse_profile.csv");
  }
  if (cfg.emit.contains(Artifact::summary)) export_summary(summary, cfg.output_dir / "summary.json");
  if (!f.dump_latent.empty()) dump_latent(result.final_latent, f.dump_latent);

  out << "policy=" << to_string(cfg.policy.kind) << " reuse_rate=" << format_real(summary.reuse_rate_blocks)
      << " flops_saved=" << summary.flops_saved << " total_flops=" << summary.total_flops << " out="
      << cfg.output_dir.string() << '\n';
  return kExitOk;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_experiment_json(ss.str());
  } catch (const std::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

int cmd_compare(const CommonFlags& f, const std::string& baseline, const std::string& config_a,
                const std::string& config_b, std::ostream& out) {
  ExperimentConfig a;
  ExperimentConfig b;
  if (!config_a.empty() || !config_b.empty()) {
    if (config_a.empty() || config_b.empty()) throw UsageError("--config-a and --config-b go together");
    a = load_experiment(config_a);
    b = load_experiment(config_b);
    if (!(a.model == b.model)) throw UsageError("compare needs identical model configs in both experiments");
  } else {
    b.model = f.model;
    b.policy = f.policy.resolve(f.model.steps);
    a.model = f.model;
    PolicyFlags base = f.policy;
    base.kind = baseline;
    a.policy = base.resolve(f.model.steps);
  }
  validate_or_usage(a.model, a.policy);
  validate_or_usage(b.model, b.policy);
  const auto dir = resolve_output_dir(f.out);

  const auto model = Model<float>::build(a.model, mode_for(f.deterministic));
  const auto run_a = run_policy(model, a.policy);
  const auto run_b = run_policy(model, b.policy);
  RunSummary sa = summarize(run_a.trace, model, run_a.final_latent, &run_a.final_latent);
  RunSummary sb = summarize(run_b.trace, model, run_b.final_latent, &run_a.final_latent);
  if (f.deterministic) sa.wall_seconds = sb.wall_seconds = 0.0;

  json j;
  j["a"] = {{"policy", policy_object(a.policy)}, {"summary", summary_object(sa)}};
  j["b"] = {{"policy", policy_object(b.policy)}, {"summary", summary_object(sb)}};
  j["psnr_db"] = summary_object(sb)["psnr_db"];
  j["ssim"] = *sb.ssim;
  if (f.deterministic || sb.wall_seconds <= 0.0) {
    j["speedup"] = nullptr;
  } else {
    j["speedup"] = sa.wall_seconds / sb.wall_seconds;
  }
  j["flops_speedup"] = static_cast<double>(sa.total_flops) / static_cast<double>(sb.total_flops);
  write_text_file(dir / "compare.json", j.dump(2) + "\n");
  if (!f.dump_latent.empty()) dump_latent(run_b.final_latent, f.dump_latent);

  out << "psnr_db=" << j["psnr_db"].dump() << " ssim=" << format_real(*sb.ssim)
      << " reuse_rate=" << format_real(sb.reuse_rate_blocks) << " speedup=" << j["speedup"].dump() << '\n';
  return kExitOk;
}

int cmd_replay(const CommonFlags& f, const std::string& trace_path, std::ostream& out) {
  DistanceTrace trace;
  try {
    trace = load_distance_trace(trace_path);
  } catch (const FormatError& e) {
    throw UsageError(trace_path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  const int T = trace.size();
  if (T < 2) throw UsageError(trace_path + ": replay needs at least 2 steps");
  const CachePolicyConfig policy = f.policy.resolve(T);
  try {
    policy.validate(T);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto dir = resolve_output_dir(f.out);

  std::vector<StepDecision> decisions;
  try {
    decisions = replay_trace(trace, policy);
  } catch (const FormatError& e) {
    throw UsageError(trace_path + ": " + e.what());
  }
  export_decisions(decisions, dir / "decisions.csv");

  int reused = 0;
  for (const auto& d : decisions) reused += d.action == Action::reused ? 1 : 0;
  std::optional<int> first_reuse;
  for (const auto& d : decisions) {
    if (d.action == Action::reused) {
      first_reuse = d.step;
      break;
    }
  }
  json j;
  j["steps"] = T;
  j["blocks"] = trace.n_blocks;
  j["policy"] = policy_object(policy);
  j["reuse_rate_steps"] = static_cast<double>(reused) / T;
  j["reuse_rate_blocks"] = static_cast<double>(reused) / T;
  j["first_reused_step"] = first_reuse ? json(*first_reuse) : json(nullptr);
  write_text_file(dir / "replay_summary.json", j.dump(2) + "\n");
  out << "steps=" << T << " reused=" << reused << " out=" << dir.string() << '\n';
  return kExitOk;
}

}  // namespace

ExperimentConfig parse_experiment_json(const std::string& text) {
  const json j = json::parse(text);
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cfg.model.n_blocks = m.value("n_blocks", cfg.model.n_blocks);
    cfg.model.hidden_dim = m.value("hidden_dim", cfg.model.hidden_dim);
    cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
    cfg.model.frames = m.value("frames", cfg.model.frames);
    cfg.model.tokens_per_frame = m.value("tokens_per_frame", cfg.model.tokens_per_frame);
    cfg.model.steps = m.value("steps", cfg.model.steps);
    cfg.model.seed = m.value("seed", cfg.model.seed);
  }
  cfg.policy = CachePolicyConfig::defaults_for(cfg.model.steps);
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    cfg.policy.kind = parse_policy_kind(p.value("kind", std::string("bwcache")));
    cfg.policy.delta = p.value("delta", cfg.policy.delta);
    cfg.policy.reuse_interval = p.value("reuse_interval", cfg.policy.reuse_interval);
    cfg.policy.tail = TailRule::parse(p.value("tail", std::string("half")));
    cfg.policy.static_stride = p.value("static_stride", cfg.policy.static_stride);
  }
  return cfg;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-wise feature caching for a toy spatial-temporal DiT sampler"};
  app.require_subcommand(1);

  CommonFlags gen;
  auto* generate = app.add_subcommand("generate", "Run one sampling pass under a cache policy");
  add_model_options(generate, gen.model);
  add_policy_options(generate, gen.policy);
  add_output_options(generate, gen);
  bool quality = false;
  generate->add_flag("--quality", quality, "Also run the uncached sampler and report PSNR / SSIM against it");

  CommonFlags cmp;
  std::string baseline = "none";
  std::string config_a;
  std::string config_b;
  auto* compare = app.add_subcommand("compare", "Run a baseline and a candidate policy on the same model");
  add_model_options(compare, cmp.model);
  add_policy_options(compare, cmp.policy);
  add_output_options(compare, cmp);
  compare->add_option("--baseline", baseline, "Policy kind of run A (other knobs shared)")->capture_default_str();
  compare->add_option("--config-a", config_a, "Experiment JSON for run A");
  compare->add_option("--config-b", config_b, "Experiment JSON for run B");

  CommonFlags rep;
  std::string trace_path;
  auto* replay = app.add_subcommand("replay", "Apply a cache policy to a recorded distance trace");
  replay->add_option("--trace", trace_path, "Heatmap-format CSV (step,block,l1_rel)")->required();
  add_policy_options(replay, rep.policy);
  replay->add_option("--out", rep.out, "Output directory (fallback: $BWCACHE_OUT_DIR)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*generate) return cmd_generate(gen, quality, out);
    if (*compare) return cmd_compare(cmp, baseline, config_a, config_b, out);
    return cmd_replay(rep, trace_path, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace bwcache
