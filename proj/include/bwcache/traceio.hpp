#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bwcache/metrics.hpp"
#include "bwcache/tensor.hpp"
#include "bwcache/trace.hpp"

namespace bwcache {

/// Reals in CSV output: printf "%.9g".
std::string format_real(double value);

// Heatmap CSV: header `step,block,l1_rel`, one row per (step, block) in
// execution order; l1_rel is empty where no distance was measured.
void write_heatmap(const RunTrace& trace, std::ostream& os);
void export_heatmap(const RunTrace& trace, const std::filesystem::path& path);

/// Parses the heatmap format. Throws FormatError naming the offending line.
DistanceTrace read_distance_trace(std::istream& is);
DistanceTrace load_distance_trace(const std::filesystem::path& path);

// Reuse profile CSV: header `step,reused`, one 0/1 row per step, then a
// final `mean,<fraction of reused steps>` row.
void write_reuse_profile(const std::vector<StepDecision>& decisions, std::ostream& os);
void export_reuse_profile(const RunTrace& trace, const std::filesystem::path& path);

// Decision CSV: header `step,action,mean_l1`.
void write_decisions(const std::vector<StepDecision>& decisions, std::ostream& os);
void export_decisions(const std::vector<StepDecision>& decisions, const std::filesystem::path& path);

/// JSON object with keys reuse_rate_blocks, reuse_rate_steps, total_flops,
/// flops_saved, wall_seconds, psnr_db, ssim. An infinite PSNR is the string
/// "inf"; absent quality metrics are null.
std::string summary_json(const RunSummary& summary);
void export_summary(const RunSummary& summary, const std::filesystem::path& path);
RunSummary parse_summary(const std::string& json_text);

// Latent dump, little-endian:
//   "BWLT" | u32 version (1) | u32 scalar bytes (4 or 8) | u32 rank |
//   rank x u64 dims | IEEE-754 values in row-major order.
template <typename Scalar>
std::vector<unsigned char> encode_latent(const Tensor<Scalar>& tensor);
template <typename Scalar>
Tensor<Scalar> decode_latent_dump(const std::vector<unsigned char>& bytes);
template <typename Scalar>
void dump_latent(const Tensor<Scalar>& tensor, const std::filesystem::path& path);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bwcache
