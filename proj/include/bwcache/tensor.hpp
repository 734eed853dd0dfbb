#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bwcache/errors.hpp"

namespace bwcache {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense row-major tensor with an explicit shape.
///
/// Storage is a flat Eigen vector; two-dimensional views are exposed as
/// row-major `Eigen::Map`s so the math can be written as Eigen expressions.
/// Tensors of rank other than 2 view as `shape[0] x (rest)`; rank-1 views
/// as a single row.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Vector<Scalar> data);

  static Tensor from_matrix(const RowMatrix<Scalar>& m);
  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index rows() const;
  Index cols() const;

  Vector<Scalar>& data() { return data_; }
  const Vector<Scalar>& data() const { return data_; }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar& operator()(Index r, Index c) { return data_[r * cols() + c]; }
  Scalar operator()(Index r, Index c) const { return data_[r * cols() + c]; }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  /// Exact elementwise equality (same shape, same values).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Vector<Scalar> data_;
};

/// Matmul reduction strategy. `deterministic` accumulates every output
/// element over the inner dimension in ascending order with no blocking;
/// `blocked` hands the product to Eigen's GEMM kernel.
enum class MatmulMode { deterministic, blocked };

template <typename Scalar>
RowMatrix<Scalar> gemm(const Eigen::Ref<const RowMatrix<Scalar>>& a,
                       const Eigen::Ref<const RowMatrix<Scalar>>& b,
                       MatmulMode mode = MatmulMode::deterministic);

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                      MatmulMode mode = MatmulMode::deterministic);

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Per-row normalization followed by `x * (1 + scale) + shift`.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& scale,
                          const Tensor<Scalar>& shift);

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x);

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);

// Matrix-level kernels used by the model; the Tensor overloads wrap these.
template <typename Scalar>
void layer_norm_inplace(Eigen::Ref<RowMatrix<Scalar>> x,
                        const Eigen::Ref<const Vector<Scalar>>& scale,
                        const Eigen::Ref<const Vector<Scalar>>& shift);
template <typename Scalar>
void softmax_rows_inplace(Eigen::Ref<RowMatrix<Scalar>> x);
template <typename Scalar>
void gelu_inplace(Eigen::Ref<RowMatrix<Scalar>> x);

/// Throws NumericError naming `where` if any element is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* where) {
  if (!x.allFinite()) throw NumericError(std::string("non-finite value produced by ") + where);
}

/// SplitMix64 generator. Single owner; not thread safe.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in (0, 1] from the top 53 bits.
  double next_unit() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// Derives an independent stream seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// I.i.d. standard normals via Box-Muller over SplitMix64. Pairs are drawn
/// as (u1, u2) -> (r cos(2 pi u2), r sin(2 pi u2)), r = sqrt(-2 ln u1); for
/// odd sizes the final sine is discarded. Generated in double, then cast.
template <typename Scalar>
Tensor<Scalar> rand_normal(Rng& rng, const Shape& shape, double stddev = 1.0);

}  // namespace bwcache
