#include "bwcache/model.hpp"

#include <cmath>
#include <stdexcept>

namespace bwcache {

namespace {

// Stream tags for derive_seed; changing them changes every generated model.
constexpr std::uint64_t kWeightStream = 1;
constexpr std::uint64_t kReadoutStream = 2;
constexpr std::uint64_t kDecodeStream = 3;
constexpr std::uint64_t kNoiseStream = 4;

template <typename Scalar>
void check_latent(const Tensor<Scalar>& h, const BlockLayout& layout, Index d, const char* where) {
  if (h.rank() != 2 || h.shape()[0] != layout.frames * layout.tokens_per_frame || h.shape()[1] != d) {
    throw DimensionError(std::string(where) + ": hidden state " + shape_string(h.shape()) + " does not match [" +
                         std::to_string(layout.frames * layout.tokens_per_frame) + "x" + std::to_string(d) + "]");
  }
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* where) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(where) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void check_step(int t, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps()) +
                            ")");
  }
}

// Multi-head self-attention of `x` within groups of rows. Group g holds rows
// first(g) + j * stride for j < group_size.
template <typename Scalar>
RowMatrix<Scalar> grouped_attention(const RowMatrix<Scalar>& qkv, Index d, Index n_heads, Index n_groups,
                                    Index group_size, Index group_step, Index row_stride, MatmulMode mode) {
  const Index head_dim = d / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));
  RowMatrix<Scalar> out(qkv.rows(), d);
  RowMatrix<Scalar> group(group_size, 3 * d);
  for (Index g = 0; g < n_groups; ++g) {
    for (Index j = 0; j < group_size; ++j) group.row(j) = qkv.row(g * group_step + j * row_stride);
    for (Index head = 0; head < n_heads; ++head) {
      const auto q = group.middleCols(head * head_dim, head_dim);
      const auto k = group.middleCols(d + head * head_dim, head_dim);
      const auto v = group.middleCols(2 * d + head * head_dim, head_dim);
      RowMatrix<Scalar> kt = k.transpose();
      RowMatrix<Scalar> scores = gemm<Scalar>(q, kt, mode) * inv_sqrt;
      softmax_rows_inplace<Scalar>(scores);
      RowMatrix<Scalar> mixed = gemm<Scalar>(scores, v, mode);
      for (Index j = 0; j < group_size; ++j) {
        out.row(g * group_step + j * row_stride).segment(head * head_dim, head_dim) = mixed.row(j);
      }
    }
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model config: " + what); };
  if (n_blocks < 2) fail("n_blocks must be >= 2 (got " + std::to_string(n_blocks) + ")");
  if (hidden_dim <= 0) fail("hidden_dim must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (hidden_dim % n_heads != 0) {
    fail("hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (hidden_dim % 2 != 0) fail("hidden_dim must be even (sinusoidal embedding width)");
  if (frames <= 0) fail("frames must be positive");
  if (tokens_per_frame <= 0) fail("tokens_per_frame must be positive");
  if (steps <= 0) fail("steps must be positive");
}

const char* to_string(Axis axis) { return axis == Axis::spatial ? "spatial" : "temporal"; }

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps <= 0) throw std::invalid_argument("noise schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    betas[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (steps - 1);
  }
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.alphas_cumprod.reserve(betas.size());
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0, 1): " + std::to_string(b));
    prod *= 1.0 - b;
    s.alphas_cumprod.push_back(prod);
  }
  s.betas = std::move(betas);
  return s;
}

template <typename Scalar>
std::vector<DiTBlockWeights<Scalar>> init_weights(const ModelConfig& config) {
  config.validate();
  const Index d = config.hidden_dim;
  Rng rng(derive_seed(config.seed, kWeightStream));
  std::vector<DiTBlockWeights<Scalar>> blocks;
  blocks.reserve(static_cast<std::size_t>(config.n_blocks));
  for (int i = 0; i < config.n_blocks; ++i) {
    DiTBlockWeights<Scalar> w;
    w.qkv_proj = rand_normal<Scalar>(rng, {d, 3 * d}, kWeightStddev);
    w.out_proj = rand_normal<Scalar>(rng, {d, d}, kWeightStddev);
    w.mlp_in = rand_normal<Scalar>(rng, {d, 4 * d}, kWeightStddev);
    w.mlp_out = rand_normal<Scalar>(rng, {4 * d, d}, kWeightStddev);
    w.adaln_proj = rand_normal<Scalar>(rng, {d, 4 * d}, kWeightStddev);
    w.axis = i % 2 == 0 ? Axis::spatial : Axis::temporal;
    blocks.push_back(std::move(w));
  }
  return blocks;
}

template <typename Scalar>
Tensor<Scalar> timestep_embedding(int t, Index d_emb) {
  if (t < 0) throw std::out_of_range("negative timestep " + std::to_string(t));
  if (d_emb <= 0 || d_emb % 2 != 0) throw DimensionError("embedding width must be positive and even");
  const Index half = d_emb / 2;
  Vector<Scalar> out(d_emb);
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<Scalar>(std::sin(t * freq));
    out[half + i] = static_cast<Scalar>(std::cos(t * freq));
  }
  return Tensor<Scalar>({d_emb}, std::move(out));
}

template <typename Scalar>
Tensor<Scalar> dit_block_forward(const Tensor<Scalar>& h, const DiTBlockWeights<Scalar>& weights,
                                 const Tensor<Scalar>& t_emb, const BlockLayout& layout, MatmulMode mode) {
  const Index d = weights.out_proj.rows();
  check_latent(h, layout, d, "dit_block_forward");
  if (weights.qkv_proj.shape() != Shape{d, 3 * d} || weights.out_proj.shape() != Shape{d, d} ||
      weights.mlp_in.shape() != Shape{d, 4 * d} || weights.mlp_out.shape() != Shape{4 * d, d} ||
      weights.adaln_proj.rank() != 2 || weights.adaln_proj.shape()[1] != 4 * d) {
    throw DimensionError("dit_block_forward: block weights inconsistent with hidden width " + std::to_string(d));
  }
  if (t_emb.size() != weights.adaln_proj.shape()[0]) {
    throw DimensionError("dit_block_forward: embedding " + shape_string(t_emb.shape()) + " vs adaln_proj " +
                         shape_string(weights.adaln_proj.shape()));
  }
  if (layout.n_heads <= 0 || d % layout.n_heads != 0) throw DimensionError("dit_block_forward: bad head count");

  const RowMatrix<Scalar> modulation = gemm<Scalar>(t_emb.data().transpose(), weights.adaln_proj.matrix(), mode);
  const Vector<Scalar> shift_attn = modulation.row(0).segment(0, d).transpose();
  const Vector<Scalar> scale_attn = modulation.row(0).segment(d, d).transpose();
  const Vector<Scalar> shift_mlp = modulation.row(0).segment(2 * d, d).transpose();
  const Vector<Scalar> scale_mlp = modulation.row(0).segment(3 * d, d).transpose();

  // h' = Attention(AdaLN(h)) + h
  RowMatrix<Scalar> x = h.matrix();
  layer_norm_inplace<Scalar>(x, scale_attn, shift_attn);
  const RowMatrix<Scalar> qkv = gemm<Scalar>(x, weights.qkv_proj.matrix(), mode);
  const Index F = layout.frames;
  const Index S = layout.tokens_per_frame;
  const RowMatrix<Scalar> attn = weights.axis == Axis::spatial
                                     ? grouped_attention<Scalar>(qkv, d, layout.n_heads, F, S, S, 1, mode)
                                     : grouped_attention<Scalar>(qkv, d, layout.n_heads, S, F, 1, S, mode);
  RowMatrix<Scalar> h1 = gemm<Scalar>(attn, weights.out_proj.matrix(), mode);
  h1 += h.matrix();

  // h'' = MLP(AdaLN(h')) + h'
  RowMatrix<Scalar> y = h1;
  layer_norm_inplace<Scalar>(y, scale_mlp, shift_mlp);
  RowMatrix<Scalar> hidden = gemm<Scalar>(y, weights.mlp_in.matrix(), mode);
  gelu_inplace<Scalar>(hidden);
  RowMatrix<Scalar> h2 = gemm<Scalar>(hidden, weights.mlp_out.matrix(), mode);
  h2 += h1;
  require_finite(h2, "dit_block_forward");
  return Tensor<Scalar>::from_matrix(h2);
}

template <typename Scalar>
Tensor<Scalar> forward_diffuse(const Tensor<Scalar>& x0, int t, const Tensor<Scalar>& eps,
                               const NoiseSchedule& schedule) {
  check_same_shape(x0, eps, "forward_diffuse");
  check_step(t, schedule);
  const double abar = schedule.alphas_cumprod[t];
  const Scalar a = static_cast<Scalar>(std::sqrt(abar));
  const Scalar b = static_cast<Scalar>(std::sqrt(1.0 - abar));
  return Tensor<Scalar>(x0.shape(), a * x0.data() + b * eps.data());
}

template <typename Scalar>
Tensor<Scalar> reverse_step(const Tensor<Scalar>& x_t, const Tensor<Scalar>& eps_pred, int t,
                            const NoiseSchedule& schedule) {
  check_same_shape(x_t, eps_pred, "reverse_step");
  check_step(t, schedule);
  const double abar = schedule.alphas_cumprod[t];
  const Scalar noise_coef = static_cast<Scalar>(std::sqrt(1.0 - abar));
  const Scalar inv_signal = static_cast<Scalar>(1.0 / std::sqrt(abar));
  Vector<Scalar> x0_hat = (x_t.data() - noise_coef * eps_pred.data()) * inv_signal;
  if (t == 0) {
    require_finite(x0_hat, "reverse_step");
    return Tensor<Scalar>(x_t.shape(), std::move(x0_hat));
  }
  const double abar_prev = schedule.alphas_cumprod[t - 1];
  const Scalar a = static_cast<Scalar>(std::sqrt(abar_prev));
  const Scalar b = static_cast<Scalar>(std::sqrt(1.0 - abar_prev));
  Vector<Scalar> prev = a * x0_hat + b * eps_pred.data();
  require_finite(prev, "reverse_step");
  return Tensor<Scalar>(x_t.shape(), std::move(prev));
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::build(const ModelConfig& config, MatmulMode mode) {
  config.validate();
  Model m;
  m.config = config;
  m.blocks = init_weights<Scalar>(config);
  const Index d = config.hidden_dim;
  const double fan_in = 1.0 / std::sqrt(static_cast<double>(d));
  Rng readout_rng(derive_seed(config.seed, kReadoutStream));
  m.readout = rand_normal<Scalar>(readout_rng, {d, d}, kReadoutGain * fan_in);
  Rng decode_rng(derive_seed(config.seed, kDecodeStream));
  m.decode = rand_normal<Scalar>(decode_rng, {d, kDecodeChannels}, fan_in);
  m.schedule = NoiseSchedule::linear(config.steps);
  m.mode = mode;
  return m;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::embed(int t) const {
  Tensor<Scalar> e = timestep_embedding<Scalar>(t, config.hidden_dim);
  if (conditioning) {
    if (conditioning->size() != e.size()) throw DimensionError("conditioning vector width mismatch");
    e.data() += conditioning->data();
  }
  return e;
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::read_out(const Tensor<Scalar>& last_block) const {
  return matmul(last_block, readout, mode);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::decode_latent(const Tensor<Scalar>& latent) const {
  return matmul(latent, decode, mode);
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::initial_noise() const {
  Rng rng(derive_seed(config.seed, kNoiseStream));
  return rand_normal<Scalar>(rng, config.latent_shape());
}

template <typename Scalar>
DenoiserOutput<Scalar> denoiser_forward(const Tensor<Scalar>& x_t, int t, const Model<Scalar>& model) {
  if (model.blocks.empty()) throw std::invalid_argument("denoiser_forward: model has no blocks");
  const BlockLayout layout = BlockLayout::of(model.config);
  const Tensor<Scalar> t_emb = model.embed(t);
  DenoiserOutput<Scalar> out;
  out.block_outputs.reserve(model.blocks.size());
  const Tensor<Scalar>* h = &x_t;
  for (const auto& block : model.blocks) {
    out.block_outputs.push_back(dit_block_forward(*h, block, t_emb, layout, model.mode));
    h = &out.block_outputs.back();
  }
  out.eps_pred = model.read_out(out.block_outputs.back());
  return out;
}

#define BWCACHE_INSTANTIATE_MODEL(S)                                                                         \
  template std::vector<DiTBlockWeights<S>> init_weights<S>(const ModelConfig&);                              \
  template Tensor<S> timestep_embedding<S>(int, Index);                                                      \
  template Tensor<S> dit_block_forward<S>(const Tensor<S>&, const DiTBlockWeights<S>&, const Tensor<S>&,     \
                                          const BlockLayout&, MatmulMode);                                   \
  template Tensor<S> forward_diffuse<S>(const Tensor<S>&, int, const Tensor<S>&, const NoiseSchedule&);      \
  template Tensor<S> reverse_step<S>(const Tensor<S>&, const Tensor<S>&, int, const NoiseSchedule&);         \
  template struct Model<S>;                                                                                  \
  template DenoiserOutput<S> denoiser_forward<S>(const Tensor<S>&, int, const Model<S>&);

BWCACHE_INSTANTIATE_MODEL(float)
BWCACHE_INSTANTIATE_MODEL(double)

}  // namespace bwcache
