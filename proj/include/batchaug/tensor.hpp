#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "batchaug/errors.hpp"
#include "batchaug/rng.hpp"

namespace batchaug {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Owns its storage; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    detail::require(shape_size(shape_) == data_.size(),
                    "Tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                        shape_str(shape_));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] std::span<T> data() noexcept { return data_; }
  [[nodiscard]] std::span<const T> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  /// Contiguous slab of `count` leading-axis items starting at `first`.
  [[nodiscard]] Tensor slice(std::size_t first, std::size_t count) const {
    detail::require(rank() >= 1 && first + count <= shape_[0], "slice: out of range");
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                                               data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride)));
  }

  /// View of one leading-axis item.
  [[nodiscard]] std::span<const T> item(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(i * stride, stride);
  }
  [[nodiscard]] std::span<T> item(std::size_t i) {
    const std::size_t stride = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(i * stride, stride);
  }

  void reshape(Shape s) {
    detail::require(shape_size(s) == data_.size(), "reshape: element count changes");
    shape_ = std::move(s);
  }

  [[nodiscard]] bool all_finite() const noexcept {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Raw kernels. Every output element is accumulated over the inner index in
// ascending order starting from its initial value, so results match a naive
// loop bit-for-bit (build with -ffp-contract=off).
namespace kernel {

/// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = acc;
    }
  }
}

/// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  detail::require(a.extent(1) == b.extent(0),
                  "matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> c({m, n});
  kernel::gemm_nn(m, n, k, a.data().data(), b.data().data(), c.data().data(), false);
  return c;
}

/// Arithmetic mean along one axis; the axis is removed from the result shape.
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& t, std::size_t axis) {
  detail::require(axis < t.rank(), "reduce_mean: axis out of range");
  const std::size_t len = t.extent(axis);
  detail::require(len > 0, "reduce_mean: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.extent(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.extent(i);
  Shape s;
  for (std::size_t i = 0; i < t.rank(); ++i)
    if (i != axis) s.push_back(t.extent(i));
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T acc{0};
      for (std::size_t a = 0; a < len; ++a) acc += t[(o * len + a) * inner + in];
      out[o * inner + in] = acc / static_cast<T>(len);
    }
  return out;
}

template <typename T>
Tensor<T> rng_uniform(RngStream& stream, Shape shape, double lo, double hi) {
  detail::require(lo < hi, "rng_uniform: lo must be < hi");
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) {
    T x = static_cast<T>(lo + (hi - lo) * stream.uniform());
    // rounding to T may land on hi
    if (!(x < static_cast<T>(hi))) x = std::nextafter(static_cast<T>(hi), static_cast<T>(lo));
    v = x;
  }
  return out;
}

template <typename T>
Tensor<T> rng_normal(RngStream& stream, Shape shape, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(mean + stddev * stream.normal());
  return out;
}

template <typename T>
T l2_norm(std::span<const T> v) {
  T acc{0};
  for (T x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace batchaug
