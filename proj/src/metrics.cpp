#include "bwcache/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace bwcache {

namespace {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* where) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(where) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename Derived>
double value_range(const Eigen::DenseBase<Derived>& x) {
  return static_cast<double>(x.maxCoeff()) - static_cast<double>(x.minCoeff());
}

std::uint64_t mm(Index m, Index k, Index n) {
  return 2ULL * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n);
}

std::uint64_t block_flops_for(const ModelConfig& c, Axis axis) {
  const Index L = c.tokens();
  const Index d = c.hidden_dim;
  const Index F = c.frames;
  const Index S = c.tokens_per_frame;
  const Index dh = c.head_dim();
  // Per group and head: scores [n x dh] x [dh x n], mixing [n x n] x [n x dh].
  const Index groups = axis == Axis::spatial ? F : S;
  const Index n = axis == Axis::spatial ? S : F;
  const std::uint64_t attention =
      static_cast<std::uint64_t>(groups) * static_cast<std::uint64_t>(c.n_heads) * (mm(n, dh, n) + mm(n, n, dh));
  return mm(L, d, 3 * d) + attention + mm(L, d, d) + mm(L, d, 4 * d) + mm(L, 4 * d, d);
}

}  // namespace

template <typename Scalar>
double psnr(const Tensor<Scalar>& reference, const Tensor<Scalar>& test) {
  require_same_shape(reference, test, "psnr");
  if (reference.size() == 0) throw DimensionError("psnr: empty input");
  const double range = value_range(reference.data());
  if (!(range > 0.0)) throw DegenerateError("psnr: reference has zero data range");
  const double mse = (reference.data().template cast<double>() - test.data().template cast<double>())
                         .array()
                         .square()
                         .mean();
  if (mse == 0.0) return kPsnrIdentical;
  return 10.0 * std::log10(range * range / mse);
}

template <typename Scalar>
double ssim_global(const Tensor<Scalar>& reference, const Tensor<Scalar>& test, Index frames) {
  require_same_shape(reference, test, "ssim_global");
  if (reference.size() < 2) throw DimensionError("ssim_global: need at least 2 elements");
  if (frames < 1 || reference.rows() % frames != 0) {
    throw DimensionError("ssim_global: " + std::to_string(reference.rows()) + " rows do not split into " +
                         std::to_string(frames) + " frames");
  }
  double range = std::max(value_range(reference.data()), value_range(test.data()));
  if (!(range > 0.0)) range = 1.0;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);

  const Index rows_per_frame = reference.rows() / frames;
  const RowMatrix<double> a = reference.matrix().template cast<double>();
  const RowMatrix<double> b = test.matrix().template cast<double>();
  double total = 0.0;
  for (Index f = 0; f < frames; ++f) {
    const auto fa = a.middleRows(f * rows_per_frame, rows_per_frame).array();
    const auto fb = b.middleRows(f * rows_per_frame, rows_per_frame).array();
    const double n = static_cast<double>(fa.size());
    const double mu_a = fa.sum() / n;
    const double mu_b = fb.sum() / n;
    const double var_a = (fa - mu_a).square().sum() / n;
    const double var_b = (fb - mu_b).square().sum() / n;
    const double cov = ((fa - mu_a) * (fb - mu_b)).sum() / n;
    total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(frames);
}

std::uint64_t block_flops(const ModelConfig& config, Axis axis) { return block_flops_for(config, axis); }

std::uint64_t stack_flops(const ModelConfig& config, int n_blocks) {
  std::uint64_t total = 0;
  for (int i = 0; i < n_blocks; ++i) total += block_flops_for(config, i % 2 == 0 ? Axis::spatial : Axis::temporal);
  return total;
}

std::uint64_t step_overhead_flops(const ModelConfig& config) {
  return mm(config.tokens(), config.hidden_dim, config.hidden_dim);
}

RunSummary summarize(const RunTrace& trace, const ModelConfig& config) {
  trace.validate();
  const int T = trace.steps();
  const int N = trace.n_blocks;
  RunSummary s;
  if (T == 0 || N == 0) return s;
  int reused = 0;
  for (const auto& d : trace.decisions) reused += d.action == Action::reused ? 1 : 0;
  const std::uint64_t per_step = stack_flops(config, N);
  s.reuse_rate_steps = static_cast<double>(reused) / T;
  s.reuse_rate_blocks = static_cast<double>(reused) * N / (static_cast<double>(N) * T);
  s.flops_saved = static_cast<std::uint64_t>(reused) * per_step;
  s.total_flops = static_cast<std::uint64_t>(T - reused) * per_step + static_cast<std::uint64_t>(T) *
                                                                          step_overhead_flops(config);
  s.wall_seconds = trace.wall_seconds;
  return s;
}

template <typename Scalar>
RunSummary summarize(const RunTrace& trace, const Model<Scalar>& model, const Tensor<Scalar>& output,
                     const Tensor<Scalar>* reference) {
  RunSummary s = summarize(trace, model.config);
  if (reference) {
    const Tensor<Scalar> ref_pixels = model.decode_latent(*reference);
    const Tensor<Scalar> out_pixels = model.decode_latent(output);
    s.psnr_db = psnr(ref_pixels, out_pixels);
    s.ssim = ssim_global(ref_pixels, out_pixels, model.config.frames);
  }
  return s;
}

#define BWCACHE_INSTANTIATE_METRICS(S)                                                   \
  template double psnr<S>(const Tensor<S>&, const Tensor<S>&);                           \
  template double ssim_global<S>(const Tensor<S>&, const Tensor<S>&, Index);             \
  template RunSummary summarize<S>(const RunTrace&, const Model<S>&, const Tensor<S>&, \
                                   const Tensor<S>*);

BWCACHE_INSTANTIATE_METRICS(float)
BWCACHE_INSTANTIATE_METRICS(double)

}  // namespace bwcache
