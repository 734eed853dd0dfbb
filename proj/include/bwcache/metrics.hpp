#pragma once

#include <cstdint>
#include <limits>
#include <optional>

#include "bwcache/model.hpp"
#include "bwcache/tensor.hpp"
#include "bwcache/trace.hpp"

namespace bwcache {

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(R^2 / MSE) with R = max(reference) - min(reference).
/// Returns kPsnrIdentical when MSE is zero.
template <typename Scalar>
double psnr(const Tensor<Scalar>& reference, const Tensor<Scalar>& test);

/// SSIM from global statistics (means, population variances, covariance),
/// one value per frame, averaged over frames. `frames` splits the rows of a
/// 2-D input into equal contiguous groups.
///
/// Stabilizers are C1 = (0.01 R)^2 and C2 = (0.03 R)^2 where R is the larger
/// of the two inputs' ranges (1 when both are constant), which keeps the
/// index symmetric in its arguments.
template <typename Scalar>
double ssim_global(const Tensor<Scalar>& reference, const Tensor<Scalar>& test, Index frames = 1);

/// Matmul FLOPs (2 m k n per product) of one DiT block at the config's shapes:
/// qkv, attention scores and mixing, output projection and the two MLP layers.
/// Attention cost depends on the axis (F groups of S tokens vs S groups of F).
std::uint64_t block_flops(const ModelConfig& config, Axis axis);
/// Block FLOPs summed over `n_blocks` alternating spatial / temporal blocks.
std::uint64_t stack_flops(const ModelConfig& config, int n_blocks);
/// FLOPs that run every step regardless of caching (the eps read-out).
std::uint64_t step_overhead_flops(const ModelConfig& config);

struct RunSummary {
  double reuse_rate_blocks = 0.0;
  double reuse_rate_steps = 0.0;
  std::uint64_t total_flops = 0;
  std::uint64_t flops_saved = 0;
  double wall_seconds = 0.0;
  std::optional<double> psnr_db;
  std::optional<double> ssim;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

/// Efficiency fields from the trace alone.
RunSummary summarize(const RunTrace& trace, const ModelConfig& config);

/// Adds PSNR / SSIM of `output` against `reference`, both decoded through
/// the model's projection stub; frames are averaged for SSIM.
template <typename Scalar>
RunSummary summarize(const RunTrace& trace, const Model<Scalar>& model, const Tensor<Scalar>& output,
                     const Tensor<Scalar>* reference);

}  // namespace bwcache
