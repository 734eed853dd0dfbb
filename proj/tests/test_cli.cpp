#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "bwcache/experiment.hpp"
#include "bwcache/traceio.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace bwcache;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kSmall = " --steps 10 --blocks 2 --dim 8 --heads 2 --frames 2 --tokens 3 --seed 4";

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("bwcache_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Runs the real binary; returns its exit status.
int cli(const std::string& args) {
  const std::string cmd = std::string(BWCACHE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct InProcess {
  int code;
  std::string out;
  std::string err;
};

InProcess run(std::vector<std::string> args) {
  args.insert(args.begin(), "bwcache");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  return {bytes.begin(), bytes.end()};
}

std::string fixture(const std::string& name) { return std::string(BWCACHE_FIXTURE_DIR) + "/" + name; }

}  // namespace

TEST_CASE("generate writes the three artifacts") {
  const auto dir = scratch("gen");
  CHECK(cli("generate" + kSmall + " --out " + dir.string()) == kExitOk);
  CHECK(fs::exists(dir / "heatmap.csv"));
  CHECK(fs::exists(dir / "reuse_profile.csv"));
  const auto s = json::parse(slurp(dir / "summary.json"));
  CHECK(s["psnr_db"].is_null());
  CHECK(s["reuse_rate_blocks"].get<double>() >= 0.0);

  const auto trace = load_distance_trace(dir / "heatmap.csv");
  CHECK(trace.size() == 10);
  CHECK(trace.n_blocks == 2);
  fs::remove_all(dir);
}

TEST_CASE("generate honours --emit and BWCACHE_OUT_DIR") {
  const auto dir = scratch("emit");
  CHECK(cli("generate" + kSmall + " --emit summary --out " + dir.string()) == kExitOk);
  CHECK(fs::exists(dir / "summary.json"));
  CHECK_FALSE(fs::exists(dir / "heatmap.csv"));

  const auto env_dir = scratch("env");
  CHECK(cli("generate" + kSmall) == kExitUsage);  // no --out, no env
  CHECK(std::system(("BWCACHE_OUT_DIR=" + env_dir.string() + " " + BWCACHE_CLI_PATH + " generate" + kSmall +
                     " >/dev/null 2>&1")
                        .c_str()) == 0);
  CHECK(fs::exists(env_dir / "summary.json"));
  fs::remove_all(dir);
  fs::remove_all(env_dir);
}

TEST_CASE("usage errors exit 2") {
  const auto dir = scratch("usage").string();
  CHECK(cli("") == kExitUsage);
  CHECK(cli("frobnicate") == kExitUsage);
  CHECK(cli("generate --steps abc --out " + dir) == kExitUsage);
  CHECK(cli("generate" + kSmall + " --policy lru --out " + dir) == kExitUsage);
  CHECK(cli("generate" + kSmall + " --tail quarter --out " + dir) == kExitUsage);
  CHECK(cli("generate" + kSmall + " --delta -1 --out " + dir) == kExitUsage);
  CHECK(cli("generate" + kSmall + " --reuse-interval 0 --out " + dir) == kExitUsage);
  CHECK(cli("generate" + kSmall + " --emit pictures --out " + dir) == kExitUsage);
  CHECK(cli("generate --steps 10 --dim 8 --heads 3 --frames 2 --tokens 3 --out " + dir) == kExitUsage);
  CHECK(cli("replay --out " + dir) == kExitUsage);
  CHECK(cli("--help") == kExitOk);
  fs::remove_all(dir);
}

TEST_CASE("runtime failures exit 1") {
  const auto dir = scratch("runtime");
  CHECK(cli("generate" + kSmall + " --out " + dir.string() + " --dump-latent " + (dir / "missing/x.bin").string()) ==
        kExitRuntime);
  fs::remove_all(dir);
}

TEST_CASE("defaults: delta 0.15 and interval ceil(0.1 T)") {
  const auto dir = scratch("defaults");
  const auto r = run({"compare", "--steps", "23", "--blocks", "2", "--dim", "8", "--heads", "2", "--frames", "2",
                      "--tokens", "3", "--deterministic", "--out", dir.string()});
  REQUIRE(r.code == kExitOk);
  const auto j = json::parse(slurp(dir / "compare.json"));
  CHECK(j["b"]["policy"]["delta"] == 0.15);
  CHECK(j["b"]["policy"]["reuse_interval"] == 3);
  CHECK(j["b"]["policy"]["tail"] == "half");
  CHECK(j["a"]["policy"]["kind"] == "none");
  CHECK(j["speedup"].is_null());
  fs::remove_all(dir);
}

TEST_CASE("delta 0 reproduces the uncached latent bit for bit") {
  const auto dir = scratch("delta0");
  const auto a = dir / "none.bin";
  const auto b = dir / "zero.bin";
  CHECK(cli("generate" + kSmall + " --policy none --out " + dir.string() + " --dump-latent " + a.string()) == 0);
  CHECK(cli("generate" + kSmall + " --delta 0 --out " + dir.string() + " --dump-latent " + b.string()) == 0);
  CHECK(read_file_bytes(a) == read_file_bytes(b));
  fs::remove_all(dir);
}

TEST_CASE("compare reports quality and speed") {
  const auto dir = scratch("compare");
  const auto r = run({"compare", "--steps", "12", "--blocks", "2", "--dim", "8", "--heads", "2", "--frames", "2",
                      "--tokens", "3", "--delta", "1e9", "--tail", "fixed:1", "--out", dir.string()});
  REQUIRE(r.code == kExitOk);
  const auto j = json::parse(slurp(dir / "compare.json"));
  CHECK(j["a"]["summary"]["psnr_db"] == "inf");
  CHECK(j["psnr_db"].is_number());
  CHECK(j["ssim"].get<double>() < 1.0);
  CHECK(j["flops_speedup"].get<double>() > 1.0);
  CHECK(j["speedup"].is_number());
  CHECK(r.out.find("psnr_db=") != std::string::npos);

  // none vs delta = 0: identical output.
  const auto same = run({"compare", "--steps", "8", "--blocks", "2", "--dim", "8", "--heads", "2", "--frames", "2",
                         "--tokens", "3", "--delta", "0", "--out", dir.string()});
  REQUIRE(same.code == kExitOk);
  const auto js = json::parse(slurp(dir / "compare.json"));
  CHECK(js["psnr_db"] == "inf");
  CHECK(js["ssim"] == 1.0);
  fs::remove_all(dir);
}

TEST_CASE("compare from experiment files") {
  const auto dir = scratch("configs");
  const std::string model = R"("model": {"n_blocks": 2, "hidden_dim": 8, "n_heads": 2, "frames": 2,
                                         "tokens_per_frame": 3, "steps": 10, "seed": 1})";
  write_text_file(dir / "a.json", "{" + model + R"(, "policy": {"kind": "none"}})");
  write_text_file(dir / "b.json", "{" + model + R"(, "policy": {"kind": "static", "static_stride": 2}})");
  write_text_file(dir / "c.json", R"({"model": {"steps": 11}})");
  const std::string base = "compare --out " + dir.string() + " --config-a " + (dir / "a.json").string();
  CHECK(cli(base + " --config-b " + (dir / "b.json").string()) == kExitOk);
  const auto j = json::parse(slurp(dir / "compare.json"));
  CHECK(j["b"]["policy"]["kind"] == "static");
  CHECK(j["b"]["summary"]["reuse_rate_steps"] == 0.5);
  CHECK(cli(base + " --config-b " + (dir / "c.json").string()) == kExitUsage);
  CHECK(cli(base) == kExitUsage);

  const auto parsed = parse_experiment_json(R"({"model": {"steps": 40}})");
  CHECK(parsed.policy.reuse_interval == 4);
  CHECK(parsed.model.hidden_dim == 64);
  fs::remove_all(dir);
}

TEST_CASE("replay matches the golden decisions") {
  const auto dir = scratch("replay");
  CHECK(cli("replay --trace " + fixture("u_shape_trace.csv") +
            " --delta 0.15 --reuse-interval 10 --tail fixed:1 --out " + dir.string()) == kExitOk);
  CHECK(slurp(dir / "decisions.csv") == slurp(fixture("u_shape_decisions.csv")));
  const auto j = json::parse(slurp(dir / "replay_summary.json"));
  CHECK(j["steps"] == 7);
  CHECK(j["first_reused_step"] == 3);
  CHECK(j["reuse_rate_steps"].get<double>() == doctest::Approx(3.0 / 7));
  fs::remove_all(dir);
}

TEST_CASE("replay rejects a ragged trace with exit 2") {
  const auto dir = scratch("ragged");
  const auto r = run({"replay", "--trace", fixture("ragged_trace.csv"), "--out", dir.string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("ragged") != std::string::npos);
  CHECK(cli("replay --trace " + (dir / "nope.csv").string() + " --out " + dir.string()) == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("generate output replays to the same schedule") {
  const auto dir = scratch("roundtrip");
  const std::string policy = " --delta 0.3 --reuse-interval 2 --tail third";
  REQUIRE(cli("generate" + kSmall + policy + " --deterministic --out " + dir.string()) == 0);
  const auto profile = slurp(dir / "reuse_profile.csv");
  const auto rep = dir / "rep";
  REQUIRE(cli("replay --trace " + (dir / "heatmap.csv").string() + policy + " --out " + rep.string()) == 0);
  // Reconstruct a 0/1 profile from decisions.csv and compare row by row.
  std::istringstream dec(slurp(rep / "decisions.csv"));
  std::istringstream prof(profile);
  std::string a, b;
  std::getline(dec, a);
  std::getline(prof, b);
  int rows = 0;
  while (std::getline(dec, a) && std::getline(prof, b)) {
    const bool reused = a.find(",reused,") != std::string::npos;
    CHECK(b == a.substr(0, a.find(',')) + (reused ? ",1" : ",0"));
    ++rows;
  }
  CHECK(rows == 10);
  fs::remove_all(dir);
}
