#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace oplrp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor over a floating scalar type. Once a tensor has been
/// recorded into a graph it is treated as immutable; kernels return fresh
/// tensors instead of writing through their inputs.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;
  explicit TensorT(Shape shape);
  TensorT(Shape shape, std::vector<T> data);

  static TensorT scalar(T v);
  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T v);
  static TensorT zeros_like(const TensorT& other) { return zeros(other.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Flat offset of a multi-index; bounds-checked.
  std::size_t offset(std::initializer_list<std::size_t> idx) const;
  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  /// Same-shape accumulation; throws on mismatch.
  TensorT& operator+=(const TensorT& other);

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

// Elementwise arithmetic with the restricted broadcast policy: shapes must be
// equal, or one operand is a single element, or one operand's shape is a
// trailing suffix of the other's. Anything else throws.
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> neg(const TensorT<T>& a);
template <typename T> TensorT<T> abs(const TensorT<T>& a);
template <typename T> TensorT<T> scale(const TensorT<T>& a, T s);
template <typename T> T sum_all(const TensorT<T>& a);

/// Result shape of broadcasting `a` against `b`; throws naming both shapes if
/// the pair falls outside the supported policy.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* what);

/// Inverse of broadcasting: sums `t` down to `target`, which must be
/// broadcast-reachable from t's shape. Used when relevance computed at a
/// broadcast shape has to be returned to an operand.
template <typename T> TensorT<T> reduce_to(const TensorT<T>& t, const Shape& target);

template <typename T> TensorT<T> reshape(const TensorT<T>& t, Shape shape);

/// Max elementwise |a - b|; shapes must match.
template <typename T> T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b);

}  // namespace oplrp
