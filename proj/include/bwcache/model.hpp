#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bwcache/tensor.hpp"

namespace bwcache {

/// Toy spatial-temporal DiT architecture. Latents are `[frames * tokens_per_frame, hidden_dim]`,
/// frame-major: row `f * tokens_per_frame + p` is spatial position `p` of frame `f`.
struct ModelConfig {
  int n_blocks = 8;
  int hidden_dim = 64;
  int n_heads = 4;
  int frames = 4;
  int tokens_per_frame = 16;
  int steps = 30;
  std::uint64_t seed = 0;

  Index tokens() const { return static_cast<Index>(frames) * tokens_per_frame; }
  Index head_dim() const { return hidden_dim / n_heads; }
  Shape latent_shape() const { return {tokens(), hidden_dim}; }

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Axis { spatial, temporal };

const char* to_string(Axis axis);

template <typename Scalar>
struct DiTBlockWeights {
  Tensor<Scalar> qkv_proj;    // [d, 3d]: columns are q | k | v
  Tensor<Scalar> out_proj;    // [d, d]
  Tensor<Scalar> mlp_in;      // [d, 4d]
  Tensor<Scalar> mlp_out;     // [4d, d]
  Tensor<Scalar> adaln_proj;  // [d_emb, 4d]: shift_attn | scale_attn | shift_mlp | scale_mlp
  Axis axis = Axis::spatial;
};

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;

  /// Linear betas from `beta_start` to `beta_end` over `steps` entries.
  static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 2e-2);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas.size()); }
};

inline constexpr double kWeightStddev = 0.02;
/// Read-out entries are N(0, (gain / sqrt(d))^2). The gain sets the size of the
/// per-step latent update, and with it the typical block distance between steps.
inline constexpr double kReadoutGain = 3.0;

/// Even-index blocks attend spatially, odd-index blocks temporally. Entries
/// are N(0, 0.02^2) drawn from a stream derived from `config.seed`.
template <typename Scalar>
std::vector<DiTBlockWeights<Scalar>> init_weights(const ModelConfig& config);

/// Sinusoidal embedding: for i < d_emb / 2, freq_i = 10000^(-i / (d_emb / 2)),
/// out[i] = sin(t * freq_i), out[d_emb / 2 + i] = cos(t * freq_i).
template <typename Scalar>
Tensor<Scalar> timestep_embedding(int t, Index d_emb);

struct BlockLayout {
  Index frames;
  Index tokens_per_frame;
  Index n_heads;

  static BlockLayout of(const ModelConfig& c) { return {c.frames, c.tokens_per_frame, c.n_heads}; }
};

/// h' = Attention(AdaLN(h)) + h; h'' = MLP(AdaLN(h')) + h'.
template <typename Scalar>
Tensor<Scalar> dit_block_forward(const Tensor<Scalar>& h, const DiTBlockWeights<Scalar>& weights,
                                 const Tensor<Scalar>& t_emb, const BlockLayout& layout,
                                 MatmulMode mode = MatmulMode::deterministic);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <typename Scalar>
Tensor<Scalar> forward_diffuse(const Tensor<Scalar>& x0, int t, const Tensor<Scalar>& eps,
                               const NoiseSchedule& schedule);

/// Deterministic (zero-variance) reverse update. Returns x_{t-1}, or the
/// clean estimate x0_hat when t == 0.
template <typename Scalar>
Tensor<Scalar> reverse_step(const Tensor<Scalar>& x_t, const Tensor<Scalar>& eps_pred, int t,
                            const NoiseSchedule& schedule);

/// Immutable weights + schedule for one sampler configuration.
template <typename Scalar>
struct Model {
  ModelConfig config;
  std::vector<DiTBlockWeights<Scalar>> blocks;
  Tensor<Scalar> readout;  // [d, d], h''_N -> eps_pred
  Tensor<Scalar> decode;   // [d, kDecodeChannels], latent -> "pixels"
  NoiseSchedule schedule;
  std::optional<Tensor<Scalar>> conditioning;  // added to every timestep embedding
  MatmulMode mode = MatmulMode::deterministic;

  static Model build(const ModelConfig& config, MatmulMode mode = MatmulMode::deterministic);

  Tensor<Scalar> embed(int t) const;
  Tensor<Scalar> read_out(const Tensor<Scalar>& last_block) const;
  Tensor<Scalar> decode_latent(const Tensor<Scalar>& latent) const;
  /// Standard normal x_T for this config's seed.
  Tensor<Scalar> initial_noise() const;
};

inline constexpr Index kDecodeChannels = 3;

template <typename Scalar>
struct DenoiserOutput {
  Tensor<Scalar> eps_pred;
  std::vector<Tensor<Scalar>> block_outputs;
};

/// Chains all blocks: block i + 1 consumes block i's output.
template <typename Scalar>
DenoiserOutput<Scalar> denoiser_forward(const Tensor<Scalar>& x_t, int t, const Model<Scalar>& model);

}  // namespace bwcache
