#include "oplrp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace oplrp {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

namespace {

[[noreturn]] void throw_shape(const char* what, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << what << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw std::invalid_argument(os.str());
}

// Broadcast classification: 0 = equal, 1 = b broadcast into a, 2 = a into b.
int broadcast_case(const Shape& a, const Shape& b, const char* what) {
  if (a == b) return 0;
  const std::size_t na = shape_numel(a), nb = shape_numel(b);
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
  };
  if (nb == 1 || is_suffix(b, a)) return 1;
  if (na == 1 || is_suffix(a, b)) return 2;
  throw_shape(what, a, b);
}

}  // namespace

template <typename T>
TensorT<T>::TensorT(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {
  for (auto d : shape_)
    if (d == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape_));
}

template <typename T>
TensorT<T>::TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    std::ostringstream os;
    os << "tensor: shape " << shape_str(shape_) << " expects " << shape_numel(shape_)
       << " values, got " << data_.size();
    throw std::invalid_argument(os.str());
  }
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T v) {
  return TensorT({1}, {v});
}

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  return TensorT(std::move(shape));
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T v) {
  TensorT t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

template <typename T>
std::size_t TensorT<T>::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size())
    throw std::invalid_argument("tensor: index rank mismatch for shape " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i >= shape_[axis])
      throw std::out_of_range("tensor: index out of range for shape " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
TensorT<T>& TensorT<T>::operator+=(const TensorT& other) {
  if (shape_ != other.shape_) throw_shape("accumulate", shape_, other.shape_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  switch (broadcast_case(a, b, what)) {
    case 1: return a;
    case 2: return b;
    default: return a;
  }
}

namespace {

template <typename T, typename F>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const char* what, F f) {
  const int c = broadcast_case(a.shape(), b.shape(), what);
  const TensorT<T>& big = (c == 2) ? b : a;
  const TensorT<T>& small = (c == 2) ? a : b;
  TensorT<T> out(big.shape());
  const std::size_t n = big.size();
  const std::size_t m = small.size();
  if (c == 0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  } else if (c == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], small[i % m]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(small[i % m], b[i]);
  }
  return out;
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; });
}
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op(a, b, "div", [](T x, T y) { return x / y; });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = -a[i];
  return out;
}

template <typename T>
TensorT<T> abs(const TensorT<T>& a) {
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]);
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
T sum_all(const TensorT<T>& a) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return acc;
}

template <typename T>
TensorT<T> reduce_to(const TensorT<T>& t, const Shape& target) {
  if (t.shape() == target) return t;
  const std::size_t m = shape_numel(target);
  // target must be a trailing suffix (or single element) of t's shape
  broadcast_shape(t.shape(), target, "reduce_to");
  TensorT<T> out(target);
  for (std::size_t i = 0; i < t.size(); ++i) out[i % m] += t[i];
  return out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& t, Shape shape) {
  if (shape_numel(shape) != t.size()) throw_shape("reshape", t.shape(), shape);
  return TensorT<T>(std::move(shape), std::vector<T>(t.data().begin(), t.data().end()));
}

template <typename T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) throw_shape("max_abs_diff", a.shape(), b.shape());
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

#define OPLRP_INSTANTIATE_TENSOR(T)                                          \
  template class TensorT<T>;                                                 \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);             \
  template TensorT<T> neg(const TensorT<T>&);                                \
  template TensorT<T> abs(const TensorT<T>&);                                \
  template TensorT<T> scale(const TensorT<T>&, T);                           \
  template T sum_all(const TensorT<T>&);                                     \
  template TensorT<T> reduce_to(const TensorT<T>&, const Shape&);            \
  template TensorT<T> reshape(const TensorT<T>&, Shape);                     \
  template T max_abs_diff(const TensorT<T>&, const TensorT<T>&)

OPLRP_INSTANTIATE_TENSOR(double);
OPLRP_INSTANTIATE_TENSOR(float);

}  // namespace oplrp
