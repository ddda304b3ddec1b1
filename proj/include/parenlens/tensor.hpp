#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "parenlens/error.hpp"

namespace parenlens {

enum class Precision { kF32, kF64 };

std::string shape_to_string(const std::vector<std::size_t>& shape);

/// 64-byte aligned storage. Vectorized kernels peel unaligned leading
/// elements, so without a fixed alignment the float summation order (and the
/// last bits of results) would depend on where the heap put a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Dense row-major array of rank 1 to 3. No broadcasting: every operation
/// below checks shapes exactly and throws ShapeError on disagreement.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<T> data);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  std::vector<T> values() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row i of a rank-2 tensor.
  std::span<const T> row(std::size_t i) const;
  std::span<T> row(std::size_t i);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T, AlignedAllocator<T>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(out));
}

// a[m×k] · b[k×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// aᵀ · b, for a[k×m], b[k×n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);
// a · bᵀ, for a[m×k], b[n×k]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b);

/// Row-wise softmax with row-max subtraction. With `causal`, entries above the
/// diagonal are exactly zero. Throws InvalidArgument on NaN input.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, bool causal = false);

/// Per-row root mean square sqrt(mean(x²) + eps).
template <typename T>
std::vector<T> row_rms(const Tensor<T>& x, T eps);

/// out[i] = x[i] / rms[i] ⊙ gain
template <typename T>
Tensor<T> scale_by_rms(const Tensor<T>& x, std::span<const T> rms, const Tensor<T>& gain);

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

/// Rotates consecutive coordinate pairs (2i, 2i+1) of row r by
/// positions[r] * theta^(-2i/d). `inverse` applies the transposed rotation.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const int> positions, double theta,
                     bool inverse = false);

/// k largest entries, descending, ties broken by lower index.
template <typename T>
std::vector<std::pair<std::size_t, T>> top_k_indices(std::span<const T> v, std::size_t k);

/// Columns [start, start+width) of a rank-2 tensor.
template <typename T>
Tensor<T> column_block(const Tensor<T>& a, std::size_t start, std::size_t width);
/// Rows [start, start+count) of a rank-2 tensor.
template <typename T>
Tensor<T> row_block(const Tensor<T>& a, std::size_t start, std::size_t count);
/// Writes `block` into columns [start, start+block.cols) of `dst`.
template <typename T>
void set_column_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block);
template <typename T>
void add_column_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block);
template <typename T>
void add_row_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace parenlens
