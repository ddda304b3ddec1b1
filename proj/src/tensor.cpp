#include "parenlens/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <numeric>
#include <sstream>

namespace parenlens {

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank(const std::vector<std::size_t>& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(shape));
  }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMat<T>> as_matrix(const Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

template <typename T>
Eigen::Map<RowMat<T>> as_matrix(Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape_));
  }
  data_.assign(element_count(shape_), T{0});
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape_));
  }
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
}

template <typename T>
std::span<const T> Tensor<T>::row(std::size_t i) const {
  return std::span<const T>(data_).subspan(i * shape_[1], shape_[1]);
}

template <typename T>
std::span<T> Tensor<T>::row(std::size_t i) {
  return std::span<T>(data_).subspan(i * shape_[1], shape_[1]);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) + " · " +
                     shape_to_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_tn");
  require_rank(b.shape(), 2, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: leading dimensions disagree: " + shape_to_string(a.shape()) +
                     "ᵀ · " + shape_to_string(b.shape()));
  }
  Tensor<T> out({a.dim(1), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_nt");
  require_rank(b.shape(), 2, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: trailing dimensions disagree: " + shape_to_string(a.shape()) +
                     " · " + shape_to_string(b.shape()) + "ᵀ");
  }
  Tensor<T> out({a.dim(0), b.dim(0)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b) {
  if (acc.shape() != b.shape()) {
    throw ShapeError("add: shapes differ: " + shape_to_string(acc.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  auto dst = acc.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, bool causal) {
  require_rank(a.shape(), 2, "softmax_rows");
  Tensor<T> out(a.shape());
  const std::size_t cols = a.dim(1);
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    auto in = a.row(i);
    auto o = out.row(i);
    const std::size_t live = causal ? std::min(cols, i + 1) : cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < live; ++j) {
      if (std::isnan(in[j])) throw InvalidArgument("softmax_rows: NaN input at row " + std::to_string(i));
      mx = std::max(mx, in[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < live; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < live; ++j) o[j] /= sum;
    for (std::size_t j = live; j < cols; ++j) o[j] = T{0};
  }
  return out;
}

template <typename T>
std::vector<T> row_rms(const Tensor<T>& x, T eps) {
  require_rank(x.shape(), 2, "row_rms");
  std::vector<T> rms(x.dim(0));
  const auto d = static_cast<T>(x.dim(1));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    T ss = 0;
    for (T v : x.row(i)) ss += v * v;
    rms[i] = std::sqrt(ss / d + eps);
  }
  return rms;
}

template <typename T>
Tensor<T> scale_by_rms(const Tensor<T>& x, std::span<const T> rms, const Tensor<T>& gain) {
  require_rank(x.shape(), 2, "scale_by_rms");
  if (gain.size() != x.dim(1) || rms.size() != x.dim(0)) {
    throw ShapeError("rms_norm: gain " + shape_to_string(gain.shape()) + " / " +
                     std::to_string(rms.size()) + " scales incompatible with " +
                     shape_to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto g = gain.data();
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] / rms[i] * g[j];
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (!(eps > 0)) throw InvalidArgument("rms_norm: eps must be positive");
  auto rms = row_rms(x, eps);
  return scale_by_rms(x, std::span<const T>(rms), gain);
}

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const int> positions, double theta, bool inverse) {
  require_rank(x.shape(), 2, "rope_apply");
  const std::size_t d = x.dim(1);
  if (d % 2 != 0) throw ShapeError("rope_apply: head dimension must be even, got " + std::to_string(d));
  if (positions.size() != x.dim(0)) {
    throw ShapeError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                     shape_to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(positions[r]) * freq;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      const T a = in[2 * i];
      const T b = in[2 * i + 1];
      o[2 * i] = a * c - b * s;
      o[2 * i + 1] = a * s + b * c;
    }
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::size_t, T>> top_k_indices(std::span<const T> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw InvalidArgument("top_k_indices: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  std::vector<std::pair<std::size_t, T>> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i], v[idx[i]]);
  return out;
}

template <typename T>
Tensor<T> column_block(const Tensor<T>& a, std::size_t start, std::size_t width) {
  require_rank(a.shape(), 2, "column_block");
  if (start + width > a.dim(1)) throw ShapeError("column_block: out of range for " + shape_to_string(a.shape()));
  Tensor<T> out({a.dim(0), width});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    auto src = a.row(i).subspan(start, width);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
Tensor<T> row_block(const Tensor<T>& a, std::size_t start, std::size_t count) {
  require_rank(a.shape(), 2, "row_block");
  if (start + count > a.dim(0)) throw ShapeError("row_block: out of range for " + shape_to_string(a.shape()));
  auto first = a.data().begin() + static_cast<std::ptrdiff_t>(start * a.dim(1));
  return Tensor<T>({count, a.dim(1)}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(count * a.dim(1))));
}

template <typename T>
void set_column_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block) {
  if (block.dim(0) != dst.dim(0) || start + block.dim(1) > dst.dim(1)) {
    throw ShapeError("set_column_block: " + shape_to_string(block.shape()) + " does not fit " +
                     shape_to_string(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.dim(0); ++i) {
    auto src = block.row(i);
    std::copy(src.begin(), src.end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(start));
  }
}

template <typename T>
void add_column_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block) {
  if (block.dim(0) != dst.dim(0) || start + block.dim(1) > dst.dim(1)) {
    throw ShapeError("add_column_block: " + shape_to_string(block.shape()) + " does not fit " +
                     shape_to_string(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.dim(0); ++i) {
    auto src = block.row(i);
    auto d = dst.row(i).subspan(start, src.size());
    for (std::size_t j = 0; j < src.size(); ++j) d[j] += src[j];
  }
}

template <typename T>
void add_row_block(Tensor<T>& dst, std::size_t start, const Tensor<T>& block) {
  if (block.dim(1) != dst.dim(1) || start + block.dim(0) > dst.dim(0)) {
    throw ShapeError("add_row_block: " + shape_to_string(block.shape()) + " does not fit " +
                     shape_to_string(dst.shape()));
  }
  auto src = block.data();
  auto d = dst.data().subspan(start * dst.dim(1), src.size());
  for (std::size_t j = 0; j < src.size(); ++j) d[j] += src[j];
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes differ: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  T worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

#define PARENLENS_INSTANTIATE(T)                                                                    \
  template class Tensor<T>;                                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> softmax_rows(const Tensor<T>&, bool);                                          \
  template std::vector<T> row_rms(const Tensor<T>&, T);                                             \
  template Tensor<T> scale_by_rms(const Tensor<T>&, std::span<const T>, const Tensor<T>&);          \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> rope_apply(const Tensor<T>&, std::span<const int>, double, bool);              \
  template std::vector<std::pair<std::size_t, T>> top_k_indices(std::span<const T>, std::size_t);   \
  template Tensor<T> column_block(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> row_block(const Tensor<T>&, std::size_t, std::size_t);                         \
  template void set_column_block(Tensor<T>&, std::size_t, const Tensor<T>&);                        \
  template void add_column_block(Tensor<T>&, std::size_t, const Tensor<T>&);                        \
  template void add_row_block(Tensor<T>&, std::size_t, const Tensor<T>&);                           \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);

PARENLENS_INSTANTIATE(float)
PARENLENS_INSTANTIATE(double)

#undef PARENLENS_INSTANTIATE

}  // namespace parenlens
