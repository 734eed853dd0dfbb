#include "bwcache/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace bwcache {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_ = Vector<Scalar>::Zero(shape_size(shape_));
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_matrix(const RowMatrix<Scalar>& m) {
  Vector<Scalar> flat = Eigen::Map<const Vector<Scalar>>(m.data(), m.size());
  return Tensor(Shape{m.rows(), m.cols()}, std::move(flat));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(Shape shape, std::initializer_list<Scalar> values) {
  Vector<Scalar> flat(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) flat[i++] = v;
  return Tensor(std::move(shape), std::move(flat));
}

template <typename Scalar>
Index Tensor<Scalar>::rows() const {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_[0];
}

template <typename Scalar>
Index Tensor<Scalar>::cols() const {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? shape_[0] : data_.size() / shape_[0];
}

template <typename Scalar>
RowMatrix<Scalar> gemm(const Eigen::Ref<const RowMatrix<Scalar>>& a, const Eigen::Ref<const RowMatrix<Scalar>>& b,
                       MatmulMode mode) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimension mismatch: [" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + "] x [" + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + "]");
  }
  RowMatrix<Scalar> c = RowMatrix<Scalar>::Zero(a.rows(), b.cols());
  if (mode == MatmulMode::blocked) {
    c.noalias() = a * b;
  } else {
    // c(i, j) accumulates a(i, k) * b(k, j) for k = 0, 1, ... in order.
    for (Index i = 0; i < a.rows(); ++i) {
      auto row = c.row(i);
      for (Index k = 0; k < a.cols(); ++k) row.noalias() += a(i, k) * b.row(k);
    }
  }
  require_finite(c, "matmul");
  return c;
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, MatmulMode mode) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  return Tensor<Scalar>::from_matrix(gemm<Scalar>(a.matrix(), b.matrix(), mode));
}

template <typename Scalar>
void layer_norm_inplace(Eigen::Ref<RowMatrix<Scalar>> x, const Eigen::Ref<const Vector<Scalar>>& scale,
                        const Eigen::Ref<const Vector<Scalar>>& shift) {
  const Index d = x.cols();
  if (scale.size() != d || shift.size() != d) {
    throw DimensionError("layer_norm width mismatch: rows have " + std::to_string(d) + " features, scale " +
                         std::to_string(scale.size()) + ", shift " + std::to_string(shift.size()));
  }
  const Scalar eps = static_cast<Scalar>(kLayerNormEpsilon);
  const auto gain = (Scalar(1) + scale.array()).transpose().eval();
  for (Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r).array();
    const Scalar mean = row.sum() / static_cast<Scalar>(d);
    row -= mean;
    const Scalar var = row.square().sum() / static_cast<Scalar>(d);
    row *= Scalar(1) / std::sqrt(var + eps);
    row = row * gain + shift.array().transpose();
  }
  require_finite(x, "layer_norm");
}

template <typename Scalar>
void softmax_rows_inplace(Eigen::Ref<RowMatrix<Scalar>> x) {
  require_finite(x, "softmax_rows input");
  for (Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

template <typename Scalar>
void gelu_inplace(Eigen::Ref<RowMatrix<Scalar>> x) {
  const Scalar k = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const Scalar c = static_cast<Scalar>(0.044715);
  auto a = x.array();
  a = Scalar(0.5) * a * (Scalar(1) + (k * (a + c * a.cube())).tanh());
  require_finite(x, "gelu");
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale, const Tensor<Scalar>& shift) {
  if (x.rank() != 2) throw DimensionError("layer_norm expects [tokens x d], got " + shape_string(x.shape()));
  if (scale.size() != x.cols() || shift.size() != x.cols()) {
    throw DimensionError("layer_norm width mismatch: x " + shape_string(x.shape()) + ", scale " +
                         shape_string(scale.shape()) + ", shift " + shape_string(shift.shape()));
  }
  Tensor<Scalar> out = x;
  layer_norm_inplace<Scalar>(out.matrix(), scale.data(), shift.data());
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x;
  softmax_rows_inplace<Scalar>(out.matrix());
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = x;
  gelu_inplace<Scalar>(out.matrix());
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng mix(seed ^ (stream * 0xD1B54A32D192ED03ULL));
  mix.next_u64();
  return mix.next_u64();
}

template <typename Scalar>
Tensor<Scalar> rand_normal(Rng& rng, const Shape& shape, double stddev) {
  const Index n = shape_size(shape);
  Vector<Scalar> data(n);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (Index i = 0; i < n; i += 2) {
    const double u1 = rng.next_unit();
    const double u2 = rng.next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    data[i] = static_cast<Scalar>(stddev * r * std::cos(two_pi * u2));
    if (i + 1 < n) data[i + 1] = static_cast<Scalar>(stddev * r * std::sin(two_pi * u2));
  }
  return Tensor<Scalar>(shape, std::move(data));
}

#define BWCACHE_INSTANTIATE_TENSOR(S)                                                                         \
  template class Tensor<S>;                                                                                   \
  template RowMatrix<S> gemm<S>(const Eigen::Ref<const RowMatrix<S>>&, const Eigen::Ref<const RowMatrix<S>>&, \
                                MatmulMode);                                                                  \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&, MatmulMode);                              \
  template void layer_norm_inplace<S>(Eigen::Ref<RowMatrix<S>>, const Eigen::Ref<const Vector<S>>&,          \
                                      const Eigen::Ref<const Vector<S>>&);                                    \
  template void softmax_rows_inplace<S>(Eigen::Ref<RowMatrix<S>>);                                            \
  template void gelu_inplace<S>(Eigen::Ref<RowMatrix<S>>);                                                    \
  template Tensor<S> layer_norm<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                    \
  template Tensor<S> softmax_rows<S>(const Tensor<S>&);                                                       \
  template Tensor<S> gelu<S>(const Tensor<S>&);                                                               \
  template Tensor<S> rand_normal<S>(Rng&, const Shape&, double);

BWCACHE_INSTANTIATE_TENSOR(float)
BWCACHE_INSTANTIATE_TENSOR(double)

}  // namespace bwcache
