#pragma once

#include <vector>

#include "oplrp/op_attrs.hpp"
#include "oplrp/op_kind.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

/// Evaluates the forward semantics of `kind` on `inputs`. Most kinds return a
/// single tensor; Unbind and Split return one per piece. Deterministic; throws
/// std::invalid_argument naming the kind and shapes on any mismatch and on an
/// unsupported kind.
template <typename T>
std::vector<TensorT<T>> forward_eval(OpKind kind, const std::vector<TensorT<T>>& inputs,
                                     const OpAttrs& attrs);

template <typename T>
std::vector<TensorT<T>> forward_eval(OpKind kind, std::initializer_list<TensorT<T>> inputs,
                                     const OpAttrs& attrs = {}) {
  return forward_eval(kind, std::vector<TensorT<T>>(inputs), attrs);
}

/// Numerically stabilized softmax along `axis` (max subtraction per row).
/// Throws on non-finite input.
template <typename T>
TensorT<T> softmax_forward(const TensorT<T>& x, int axis);

/// Cross-correlation of NCHW input with OIKK weights plus optional bias.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                          const OpAttrs& attrs);

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const OpAttrs& attrs) {
  return conv2d_forward(x, w, static_cast<const TensorT<T>*>(nullptr), attrs);
}

template <typename T>
struct MaxPoolResult {
  TensorT<T> values;
  // Flat index into the input for each pooled value; ties break to the lowest
  // row-major index.
  std::vector<std::size_t> indices;
};

template <typename T>
MaxPoolResult<T> maxpool2d_forward(const TensorT<T>& x, const OpAttrs& attrs);

// Plain 2-D matrix product, (n,k) x (k,m) -> (n,m).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// Batched 3-D matrix product, (B,n,k) x (B,k,m) -> (B,n,m).
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b);

/// Unfolds NCHW input into the (N*OH*OW, C*K*K) patch matrix.
/// conv2d_forward(x, w) equals matmul(im2col(x), w reshaped (C*K*K, O)) with
/// the result viewed back to NCHW; the conv gamma rule relies on this.
template <typename T>
TensorT<T> im2col(const TensorT<T>& x, int kernel, int stride, int padding);

/// Scatters a patch matrix back onto the input, accumulating overlaps.
template <typename T>
TensorT<T> col2im(const TensorT<T>& cols, const Shape& x_shape, int kernel, int stride,
                  int padding);

template <typename T>
TensorT<T> relu(const TensorT<T>& x);
template <typename T>
TensorT<T> gelu(const TensorT<T>& x);  // tanh approximation
template <typename T>
TensorT<T> silu(const TensorT<T>& x);

struct LayerNormStats {
  // per-row mean and reciprocal standard deviation over the last axis
  std::vector<double> mean;
  std::vector<double> rstd;
};

template <typename T>
TensorT<T> layernorm_forward(const TensorT<T>& x, const TensorT<T>& weight,
                             const TensorT<T>& bias, double eps, LayerNormStats* stats);

}  // namespace oplrp
