#pragma once

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>

#include "bwcache/cache.hpp"
#include "bwcache/model.hpp"

namespace bwcache {

enum class Artifact { heatmap, reuse_profile, summary };

struct ExperimentConfig {
  ModelConfig model;
  CachePolicyConfig policy;
  std::filesystem::path output_dir;
  std::set<Artifact> emit{Artifact::heatmap, Artifact::reuse_profile, Artifact::summary};
};

/// Parses {"model": {...}, "policy": {...}} experiment files. Missing keys
/// keep their defaults; the reuse interval defaults to ceil(0.10 * steps).
ExperimentConfig parse_experiment_json(const std::string& text);

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `bwcache` tool: `generate`, `compare`, `replay`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bwcache
