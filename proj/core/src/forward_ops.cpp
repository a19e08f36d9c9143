#include "oplrp/forward_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace oplrp {

std::string_view op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "Input";
    case OpKind::Parameter: return "Parameter";
    case OpKind::Add: return "Add";
    case OpKind::Sub: return "Sub";
    case OpKind::Mul: return "Mul";
    case OpKind::Div: return "Div";
    case OpKind::Neg: return "Neg";
    case OpKind::Linear: return "Linear";
    case OpKind::MatMul: return "MatMul";
    case OpKind::BMM: return "BMM";
    case OpKind::Conv2D: return "Conv2D";
    case OpKind::Sum: return "Sum";
    case OpKind::Mean: return "Mean";
    case OpKind::Cat: return "Cat";
    case OpKind::Stack: return "Stack";
    case OpKind::Unbind: return "Unbind";
    case OpKind::Split: return "Split";
    case OpKind::Reshape: return "Reshape";
    case OpKind::Transpose: return "Transpose";
    case OpKind::Permute: return "Permute";
    case OpKind::Expand: return "Expand";
    case OpKind::Slice: return "Slice";
    case OpKind::ReLU: return "ReLU";
    case OpKind::GELU: return "GELU";
    case OpKind::SiLU: return "SiLU";
    case OpKind::MaskedFill: return "MaskedFill";
    case OpKind::Softmax: return "Softmax";
    case OpKind::LayerNorm: return "LayerNorm";
    case OpKind::MaxPool2D: return "MaxPool2D";
    case OpKind::Unsupported: return "Unsupported";
  }
  return "Unsupported";
}

OpKind op_kind_from_name(std::string_view name) {
  static const std::unordered_map<std::string_view, OpKind> table = [] {
    std::unordered_map<std::string_view, OpKind> m;
    for (int k = 0; k <= static_cast<int>(OpKind::Unsupported); ++k) {
      const OpKind kind = static_cast<OpKind>(k);
      m.emplace(op_kind_name(kind), kind);
    }
    return m;
  }();
  auto it = table.find(name);
  return it == table.end() ? OpKind::Unsupported : it->second;
}

bool is_terminal(OpKind kind) { return kind == OpKind::Input || kind == OpKind::Parameter; }

namespace {

[[noreturn]] void fail(OpKind kind, const std::string& msg) {
  std::ostringstream os;
  os << op_kind_name(kind) << ": " << msg;
  throw std::invalid_argument(os.str());
}

template <typename T>
void expect_arity(OpKind kind, const std::vector<TensorT<T>>& in, std::size_t lo, std::size_t hi) {
  if (in.size() < lo || in.size() > hi) {
    std::ostringstream os;
    os << "expects " << lo << (hi != lo ? "+" : "") << " inputs, got " << in.size();
    fail(kind, os.str());
  }
}

std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

int normalize_axis(OpKind kind, std::optional<int> axis, std::size_t rank, int fallback) {
  int a = axis.value_or(fallback);
  if (a < 0) a += static_cast<int>(rank);
  if (a < 0 || a >= static_cast<int>(rank)) fail(kind, "axis out of range");
  return a;
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    fail(OpKind::MatMul, "needs (n,k) x (k,m), got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  TensorT<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const T av = a[i * k + l];
      if (av == T(0)) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * b[l * m + j];
    }
  return out;
}

template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1])
    fail(OpKind::BMM, "needs (B,n,k) x (B,k,m), got " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const std::size_t B = a.shape()[0], n = a.shape()[1], k = a.shape()[2], m = b.shape()[2];
  TensorT<T> out({B, n, m});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const T av = a[(bb * n + i) * k + l];
        if (av == T(0)) continue;
        for (std::size_t j = 0; j < m; ++j)
          out[(bb * n + i) * m + j] += av * b[(bb * k + l) * m + j];
      }
  return out;
}

template <typename T>
TensorT<T> softmax_forward(const TensorT<T>& x, int axis) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(static_cast<double>(x[i])))
      fail(OpKind::Softmax, "non-finite input");
  const int a = normalize_axis(OpKind::Softmax, axis, x.rank(), -1);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= s[i];
  for (std::size_t i = a + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[a];
  TensorT<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto idx = [&](std::size_t e) { return (o * extent + e) * inner + in; };
      T mx = x[idx(0)];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, x[idx(e)]);
      T denom = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(x[idx(e)] - mx);
        out[idx(e)] = v;
        denom += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[idx(e)] /= denom;
    }
  return out;
}

template <typename T>
TensorT<T> im2col(const TensorT<T>& x, int kernel, int stride, int padding) {
  if (x.rank() != 4) fail(OpKind::Conv2D, "im2col expects NCHW, got " + shape_str(x.shape()));
  if (kernel <= 0 || stride <= 0) fail(OpKind::Conv2D, "kernel and stride must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::int64_t OH = (static_cast<std::int64_t>(H) + 2 * padding - kernel) / stride + 1;
  const std::int64_t OW = (static_cast<std::int64_t>(W) + 2 * padding - kernel) / stride + 1;
  if (OH <= 0 || OW <= 0) fail(OpKind::Conv2D, "non-positive output dims for input " + shape_str(x.shape()));
  const std::size_t K = static_cast<std::size_t>(kernel);
  TensorT<T> cols({N * OH * OW, C * K * K});
  std::size_t row = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::int64_t oh = 0; oh < OH; ++oh)
      for (std::int64_t ow = 0; ow < OW; ++ow, ++row) {
        std::size_t col = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t kh = 0; kh < K; ++kh)
            for (std::size_t kw = 0; kw < K; ++kw, ++col) {
              const std::int64_t ih = oh * stride - padding + static_cast<std::int64_t>(kh);
              const std::int64_t iw = ow * stride - padding + static_cast<std::int64_t>(kw);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::int64_t>(H) ||
                  iw >= static_cast<std::int64_t>(W))
                continue;
              cols[row * C * K * K + col] = x[((n * C + c) * H + ih) * W + iw];
            }
      }
  return cols;
}

template <typename T>
TensorT<T> col2im(const TensorT<T>& cols, const Shape& x_shape, int kernel, int stride,
                  int padding) {
  if (x_shape.size() != 4) fail(OpKind::Conv2D, "col2im expects NCHW target");
  const std::size_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::int64_t OH = (static_cast<std::int64_t>(H) + 2 * padding - kernel) / stride + 1;
  const std::int64_t OW = (static_cast<std::int64_t>(W) + 2 * padding - kernel) / stride + 1;
  const std::size_t K = static_cast<std::size_t>(kernel);
  if (cols.shape() != Shape{N * OH * OW, C * K * K})
    fail(OpKind::Conv2D, "col2im: patch matrix shape " + shape_str(cols.shape()) +
                             " does not match target " + shape_str(x_shape));
  TensorT<T> x(x_shape);
  std::size_t row = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::int64_t oh = 0; oh < OH; ++oh)
      for (std::int64_t ow = 0; ow < OW; ++ow, ++row) {
        std::size_t col = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t kh = 0; kh < K; ++kh)
            for (std::size_t kw = 0; kw < K; ++kw, ++col) {
              const std::int64_t ih = oh * stride - padding + static_cast<std::int64_t>(kh);
              const std::int64_t iw = ow * stride - padding + static_cast<std::int64_t>(kw);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::int64_t>(H) ||
                  iw >= static_cast<std::int64_t>(W))
                continue;
              x[((n * C + c) * H + ih) * W + iw] += cols[row * C * K * K + col];
            }
      }
  return x;
}

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                          const OpAttrs& attrs) {
  if (x.rank() != 4 || w.rank() != 4)
    fail(OpKind::Conv2D, "expects NCHW x OIKK, got " + shape_str(x.shape()) + " and " +
                             shape_str(w.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = w.shape()[0], CI = w.shape()[1];
  const std::size_t K = static_cast<std::size_t>(attrs.kernel);
  if (CI != C) fail(OpKind::Conv2D, "channel mismatch: input has " + std::to_string(C) +
                                        ", weights expect " + std::to_string(CI));
  if (w.shape()[2] != K || w.shape()[3] != K)
    fail(OpKind::Conv2D, "weight spatial dims disagree with kernel attr");
  const int stride = attrs.stride > 0 ? attrs.stride : 1;
  const int pad = attrs.padding;
  const std::int64_t OH = (static_cast<std::int64_t>(H) + 2 * pad - attrs.kernel) / stride + 1;
  const std::int64_t OW = (static_cast<std::int64_t>(W) + 2 * pad - attrs.kernel) / stride + 1;
  if (OH <= 0 || OW <= 0)
    fail(OpKind::Conv2D, "non-positive output dims for input " + shape_str(x.shape()));
  if (bias && bias->shape() != Shape{O})
    fail(OpKind::Conv2D, "bias shape " + shape_str(bias->shape()) + " does not match out channels");
  TensorT<T> out({N, O, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          T acc = bias ? (*bias)[o] : T(0);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kh = 0; kh < K; ++kh)
              for (std::size_t kw = 0; kw < K; ++kw) {
                const std::int64_t ih = oh * stride - pad + static_cast<std::int64_t>(kh);
                const std::int64_t iw = ow * stride - pad + static_cast<std::int64_t>(kw);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::int64_t>(H) ||
                    iw >= static_cast<std::int64_t>(W))
                  continue;
                acc += x[((n * C + c) * H + ih) * W + iw] *
                       w[((o * C + c) * K + kh) * K + kw];
              }
          out[((n * O + o) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

template <typename T>
MaxPoolResult<T> maxpool2d_forward(const TensorT<T>& x, const OpAttrs& attrs) {
  if (x.rank() != 4) fail(OpKind::MaxPool2D, "expects NCHW, got " + shape_str(x.shape()));
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int K = attrs.kernel;
  const int stride = attrs.stride > 0 ? attrs.stride : K;
  if (K <= 0) fail(OpKind::MaxPool2D, "kernel must be positive");
  if (static_cast<std::size_t>(K) > H || static_cast<std::size_t>(K) > W)
    fail(OpKind::MaxPool2D, "window larger than input " + shape_str(x.shape()));
  const std::size_t OH = (H - K) / stride + 1;
  const std::size_t OW = (W - K) / stride + 1;
  MaxPoolResult<T> res{TensorT<T>({N, C, OH, OW}), {}};
  res.indices.resize(N * C * OH * OW);
  std::size_t p = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow, ++p) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (int kh = 0; kh < K; ++kh)
            for (int kw = 0; kw < K; ++kw) {
              const std::size_t ih = oh * stride + kh;
              const std::size_t iw = ow * stride + kw;
              const std::size_t idx = ((n * C + c) * H + ih) * W + iw;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          res.values[p] = best;
          res.indices[p] = best_idx;
        }
  return res;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  const T c = static_cast<T>(std::sqrt(2.0 / 3.14159265358979323846));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + T(0.044715) * v * v * v)));
  }
  return out;
}

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  return out;
}

template <typename T>
TensorT<T> layernorm_forward(const TensorT<T>& x, const TensorT<T>& weight,
                             const TensorT<T>& bias, double eps, LayerNormStats* stats) {
  if (x.rank() < 1) fail(OpKind::LayerNorm, "needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (weight.shape() != Shape{d} || bias.shape() != Shape{d})
    fail(OpKind::LayerNorm, "affine params must have shape (" + std::to_string(d) + ")");
  const std::size_t rows = x.size() / d;
  TensorT<T> out(x.shape());
  if (stats) {
    stats->mean.assign(rows, 0.0);
    stats->rstd.assign(rows, 0.0);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T dv = x[r * d + j] - mean;
      var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    if (stats) {
      stats->mean[r] = static_cast<double>(mean);
      stats->rstd[r] = static_cast<double>(rstd);
    }
    for (std::size_t j = 0; j < d; ++j)
      out[r * d + j] = (x[r * d + j] - mean) * rstd * weight[j] + bias[j];
  }
  return out;
}

namespace {

template <typename T>
TensorT<T> reduce_axis(OpKind kind, const TensorT<T>& x, std::optional<int> axis, bool mean) {
  if (!axis.has_value()) {
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    if (mean) acc /= static_cast<T>(x.size());
    return TensorT<T>::scalar(acc);
  }
  const int a = normalize_axis(kind, axis, x.rank(), 0);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= s[i];
  for (std::size_t i = a + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[a];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (static_cast<int>(i) != a) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  TensorT<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T acc = 0;
      for (std::size_t e = 0; e < extent; ++e) acc += x[(o * extent + e) * inner + in];
      if (mean) acc /= static_cast<T>(extent);
      out[o * inner + in] = acc;
    }
  return out;
}

template <typename T>
TensorT<T> cat(const std::vector<TensorT<T>>& inputs, int axis) {
  const auto& s0 = inputs[0].shape();
  const int a = normalize_axis(OpKind::Cat, axis, s0.size(), 0);
  Shape out_shape = s0;
  std::size_t total = 0;
  for (const auto& t : inputs) {
    if (t.rank() != s0.size()) fail(OpKind::Cat, "rank mismatch among inputs");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int>(i) != a && t.shape()[i] != s0[i])
        fail(OpKind::Cat, "extent mismatch at non-cat axis among inputs");
    total += t.shape()[a];
  }
  out_shape[a] = total;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= s0[i];
  for (std::size_t i = a + 1; i < s0.size(); ++i) inner *= s0[i];
  TensorT<T> out(out_shape);
  std::size_t base = 0;
  for (const auto& t : inputs) {
    const std::size_t extent = t.shape()[a];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t in = 0; in < inner; ++in)
          out[(o * total + base + e) * inner + in] = t[(o * extent + e) * inner + in];
    base += extent;
  }
  return out;
}

template <typename T>
TensorT<T> permute_impl(OpKind kind, const TensorT<T>& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) fail(kind, "permutation rank mismatch");
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= x.rank()) fail(kind, "permutation index out of range");
    out_shape[i] = x.shape()[perm[i]];
  }
  const auto in_st = row_strides(x.shape());
  const auto out_st = row_strides(out_shape);
  TensorT<T> out(out_shape);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t rem = flat;
    std::size_t off = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      const std::size_t coord = rem / out_st[i];
      rem %= out_st[i];
      off += coord * in_st[perm[i]];
    }
    out[flat] = x[off];
  }
  return out;
}

std::vector<std::size_t> make_transpose_perm(std::size_t rank, const OpAttrs& attrs) {
  std::size_t a0 = rank >= 2 ? rank - 2 : 0, a1 = rank - 1;
  if (attrs.perm.size() == 2) {
    a0 = attrs.perm[0];
    a1 = attrs.perm[1];
  }
  std::vector<std::size_t> perm(rank);
  for (std::size_t i = 0; i < rank; ++i) perm[i] = i;
  if (a0 >= rank || a1 >= rank) fail(OpKind::Transpose, "axes out of range");
  std::swap(perm[a0], perm[a1]);
  return perm;
}

template <typename T>
TensorT<T> expand(const TensorT<T>& x, const Shape& target) {
  if (target.size() < x.rank()) fail(OpKind::Expand, "target rank below input rank");
  const std::size_t lead = target.size() - x.rank();
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (x.shape()[i] != target[lead + i] && x.shape()[i] != 1)
      fail(OpKind::Expand, "cannot expand " + shape_str(x.shape()) + " to " + shape_str(target));
  const auto out_st = row_strides(target);
  const auto in_st = row_strides(x.shape());
  TensorT<T> out(target);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t rem = flat;
    std::size_t off = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const std::size_t coord = rem / out_st[i];
      rem %= out_st[i];
      if (i >= lead && x.shape()[i - lead] != 1) off += coord * in_st[i - lead];
    }
    out[flat] = x[off];
  }
  return out;
}

template <typename T>
TensorT<T> slice_op(const TensorT<T>& x, const OpAttrs& attrs) {
  const int a = normalize_axis(OpKind::Slice, attrs.axis, x.rank(), 0);
  const std::int64_t extent = static_cast<std::int64_t>(x.shape()[a]);
  std::int64_t start = attrs.start, stop = attrs.stop;
  if (start < 0) start += extent;
  if (stop <= 0) stop += extent;
  if (start < 0 || stop > extent || start >= stop)
    fail(OpKind::Slice, "window [" + std::to_string(attrs.start) + "," +
                            std::to_string(attrs.stop) + ") invalid for axis extent " +
                            std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[a] = static_cast<std::size_t>(stop - start);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.shape()[i];
  for (std::size_t i = a + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  TensorT<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::int64_t e = start; e < stop; ++e)
      for (std::size_t in = 0; in < inner; ++in)
        out[(o * out_shape[a] + static_cast<std::size_t>(e - start)) * inner + in] =
            x[(o * static_cast<std::size_t>(extent) + static_cast<std::size_t>(e)) * inner + in];
  return out;
}

}  // namespace

template <typename T>
std::vector<TensorT<T>> forward_eval(OpKind kind, const std::vector<TensorT<T>>& in,
                                     const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::Add:
      expect_arity(kind, in, 2, 2);
      return {add(in[0], in[1])};
    case OpKind::Sub:
      expect_arity(kind, in, 2, 2);
      return {sub(in[0], in[1])};
    case OpKind::Mul:
      expect_arity(kind, in, 2, 2);
      return {mul(in[0], in[1])};
    case OpKind::Div:
      expect_arity(kind, in, 2, 2);
      return {div(in[0], in[1])};
    case OpKind::Neg:
      expect_arity(kind, in, 1, 1);
      return {neg(in[0])};
    case OpKind::Linear: {
      expect_arity(kind, in, 2, 3);
      const TensorT<T>& x = in[0];
      const TensorT<T>& W = in[1];
      if (W.rank() != 2) fail(kind, "weights must be (in,out), got " + shape_str(W.shape()));
      const bool vec = x.rank() == 1;
      TensorT<T> x2 = vec ? reshape(x, {1, x.shape()[0]}) : x;
      if (x2.rank() != 2 || x2.shape()[1] != W.shape()[0])
        fail(kind, "input " + shape_str(x.shape()) + " does not match weights " +
                       shape_str(W.shape()));
      TensorT<T> z = matmul(x2, W);
      if (in.size() == 3) {
        if (in[2].shape() != Shape{W.shape()[1]})
          fail(kind, "bias shape " + shape_str(in[2].shape()) + " does not match out features");
        z = add(z, in[2]);
      }
      return {vec ? reshape(z, {W.shape()[1]}) : z};
    }
    case OpKind::MatMul:
      expect_arity(kind, in, 2, 2);
      return {matmul(in[0], in[1])};
    case OpKind::BMM:
      expect_arity(kind, in, 2, 2);
      return {bmm(in[0], in[1])};
    case OpKind::Conv2D:
      expect_arity(kind, in, 2, 3);
      return {conv2d_forward(in[0], in[1], in.size() == 3 ? &in[2] : nullptr, attrs)};
    case OpKind::Sum:
      expect_arity(kind, in, 1, 1);
      return {reduce_axis(kind, in[0], attrs.axis, false)};
    case OpKind::Mean:
      expect_arity(kind, in, 1, 1);
      return {reduce_axis(kind, in[0], attrs.axis, true)};
    case OpKind::Cat:
      expect_arity(kind, in, 1, 64);
      return {cat(in, attrs.axis.value_or(0))};
    case OpKind::Stack: {
      expect_arity(kind, in, 1, 64);
      // stack = unsqueeze each input at `axis`, then cat
      std::vector<TensorT<T>> lifted;
      lifted.reserve(in.size());
      const std::size_t out_rank = in[0].rank() + 1;
      int a = attrs.axis.value_or(0);
      if (a < 0) a += static_cast<int>(out_rank);
      if (a < 0 || a >= static_cast<int>(out_rank)) fail(kind, "axis out of range");
      for (const auto& t : in) {
        if (!t.same_shape(in[0])) fail(kind, "all inputs must share a shape");
        Shape s = t.shape();
        s.insert(s.begin() + a, 1);
        lifted.push_back(reshape(t, s));
      }
      OpAttrs cat_attrs;
      cat_attrs.axis = a;
      return {cat(lifted, a)};
    }
    case OpKind::Unbind: {
      expect_arity(kind, in, 1, 1);
      const int a = normalize_axis(kind, attrs.axis, in[0].rank(), 0);
      const auto& s = in[0].shape();
      Shape piece = s;
      piece.erase(piece.begin() + a);
      if (piece.empty()) piece.push_back(1);
      std::vector<TensorT<T>> outs;
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < a; ++i) outer *= s[i];
      for (std::size_t i = a + 1; i < s.size(); ++i) inner *= s[i];
      for (std::size_t e = 0; e < s[a]; ++e) {
        TensorT<T> piece_t(piece);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i)
            piece_t[o * inner + i] = in[0][(o * s[a] + e) * inner + i];
        outs.push_back(std::move(piece_t));
      }
      return outs;
    }
    case OpKind::Split: {
      expect_arity(kind, in, 1, 1);
      const int a = normalize_axis(kind, attrs.axis, in[0].rank(), 0);
      const auto& s = in[0].shape();
      std::size_t total = 0;
      for (auto sz : attrs.sizes) total += sz;
      if (attrs.sizes.empty() || total != s[a])
        fail(kind, "split sizes must cover axis extent " + std::to_string(s[a]));
      std::vector<TensorT<T>> outs;
      std::int64_t base = 0;
      for (auto sz : attrs.sizes) {
        OpAttrs sl;
        sl.axis = a;
        sl.start = base;
        sl.stop = base + static_cast<std::int64_t>(sz);
        outs.push_back(slice_op(in[0], sl));
        base += static_cast<std::int64_t>(sz);
      }
      return outs;
    }
    case OpKind::Reshape:
      expect_arity(kind, in, 1, 1);
      if (shape_numel(attrs.sizes) != in[0].size())
        fail(kind, "cannot view " + shape_str(in[0].shape()) + " as " + shape_str(attrs.sizes));
      return {reshape(in[0], attrs.sizes)};
    case OpKind::Transpose:
      expect_arity(kind, in, 1, 1);
      return {permute_impl(kind, in[0], make_transpose_perm(in[0].rank(), attrs))};
    case OpKind::Permute:
      expect_arity(kind, in, 1, 1);
      return {permute_impl(kind, in[0], attrs.perm)};
    case OpKind::Expand:
      expect_arity(kind, in, 1, 1);
      return {expand(in[0], attrs.sizes)};
    case OpKind::Slice:
      expect_arity(kind, in, 1, 1);
      return {slice_op(in[0], attrs)};
    case OpKind::ReLU:
      expect_arity(kind, in, 1, 1);
      return {relu(in[0])};
    case OpKind::GELU:
      expect_arity(kind, in, 1, 1);
      return {gelu(in[0])};
    case OpKind::SiLU:
      expect_arity(kind, in, 1, 1);
      return {silu(in[0])};
    case OpKind::MaskedFill: {
      expect_arity(kind, in, 1, 1);
      if (attrs.mask.size() != in[0].size())
        fail(kind, "mask size does not match input " + shape_str(in[0].shape()));
      TensorT<T> out = in[0];
      for (std::size_t i = 0; i < out.size(); ++i)
        if (attrs.mask[i]) out[i] = static_cast<T>(attrs.fill_value);
      return {out};
    }
    case OpKind::Softmax:
      expect_arity(kind, in, 1, 1);
      return {softmax_forward(in[0], attrs.axis.value_or(-1))};
    case OpKind::LayerNorm:
      expect_arity(kind, in, 3, 3);
      return {layernorm_forward(in[0], in[1], in[2], attrs.epsilon, nullptr)};
    case OpKind::MaxPool2D:
      expect_arity(kind, in, 1, 1);
      return {maxpool2d_forward(in[0], attrs).values};
    case OpKind::Input:
    case OpKind::Parameter:
      fail(kind, "terminals have no forward evaluation");
    case OpKind::Unsupported:
    default:
      fail(kind, "unsupported op kind");
  }
}

#define OPLRP_INSTANTIATE_OPS(T)                                                              \
  template std::vector<TensorT<T>> forward_eval(OpKind, const std::vector<TensorT<T>>&,      \
                                                const OpAttrs&);                             \
  template TensorT<T> softmax_forward(const TensorT<T>&, int);                               \
  template TensorT<T> conv2d_forward(const TensorT<T>&, const TensorT<T>&, const TensorT<T>*, \
                                     const OpAttrs&);                                        \
  template MaxPoolResult<T> maxpool2d_forward(const TensorT<T>&, const OpAttrs&);            \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                          \
  template TensorT<T> bmm(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> im2col(const TensorT<T>&, int, int, int);                              \
  template TensorT<T> col2im(const TensorT<T>&, const Shape&, int, int, int);                \
  template TensorT<T> relu(const TensorT<T>&);                                               \
  template TensorT<T> gelu(const TensorT<T>&);                                               \
  template TensorT<T> silu(const TensorT<T>&);                                               \
  template TensorT<T> layernorm_forward(const TensorT<T>&, const TensorT<T>&,                \
                                        const TensorT<T>&, double, LayerNormStats*)

OPLRP_INSTANTIATE_OPS(double);
OPLRP_INSTANTIATE_OPS(float);

}  // namespace oplrp
