#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "oplrp/graph.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

/// Composable rule configuration. Loadable from JSON (see json_io.hpp).
struct RuleConfig {
  double epsilon = 1e-9;
  double gamma_linear = 0.0;
  double gamma_conv = 0.0;
  enum class SoftmaxMode { attnlrp, skip };
  SoftmaxMode softmax_mode = SoftmaxMode::attnlrp;
  bool bilinear_enabled = true;

  void validate() const;  // epsilon > 0, gammas >= 0
};

// sign(v) with sign(0) = +1, the stabilizer convention used throughout.
template <typename T>
inline T stab_sign(T v) {
  return v < T(0) ? T(-1) : T(1);
}

/// Proportional redistribution for z = x.W: the share of R_out[j] assigned to
/// input i is x_i w_ij / (z_j + sign(z_j) eps). x may be a vector or a batch
/// of rows; z and R_out follow x's leading shape.
template <typename T>
TensorT<T> epsilon_rule(const TensorT<T>& x, const TensorT<T>& W, const TensorT<T>& z,
                        const TensorT<T>& R_out, double eps);

/// The share of R_out absorbed by an additive bias under the same denominator;
/// reduced to the bias shape. Inputs never see this share.
template <typename T>
TensorT<T> epsilon_bias_share(const TensorT<T>& bias, const TensorT<T>& z,
                              const TensorT<T>& R_out, double eps);

/// Positive-weight boosted variant; reduces to epsilon_rule at gamma = 0.
/// The denominator is rebuilt from the boosted weights (plus the boosted bias
/// when one is supplied), so conservation over inputs + bias stays exact up
/// to eps.
template <typename T>
TensorT<T> gamma_rule(const TensorT<T>& x, const TensorT<T>& W, const TensorT<T>& R_out,
                      double gamma, double eps, const TensorT<T>* bias = nullptr,
                      TensorT<T>* bias_share = nullptr);

/// Magnitude-proportional split of R_out across the operands of a value
/// merge. Operands may be broadcast against R_out; each returned tensor is
/// reduced back to its operand's shape. An all-zero denominator falls back to
/// a uniform split so the total is always preserved.
template <typename T>
std::vector<TensorT<T>> abs_ratio_rule(const std::vector<TensorT<T>>& operands,
                                       const TensorT<T>& R_out);

/// Relevance split for O = A.V across both factors; the 2 in the denominator
/// halves the total between them. Accepts (n,k)x(k,m) or batched 3-D.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> bilinear_rule(const TensorT<T>& A, const TensorT<T>& V,
                                                const TensorT<T>& O, const TensorT<T>& R_out,
                                                double eps);

/// Softmax input relevance, applied independently per row of `axis`:
/// R_in[i] = x_i (R_out[i] - s_i * sum_j R_out[j]).
template <typename T>
TensorT<T> softmax_rule(const TensorT<T>& x, const TensorT<T>& s, const TensorT<T>& R_out,
                        int axis);

template <typename T>
inline TensorT<T> identity_rule(const TensorT<T>& R_out) {
  return R_out;
}

/// Re-indexes relevance exactly as the op's gradient would re-index incoming
/// gradients; totals preserved exactly. Covers the pure shape kinds.
template <typename T>
std::vector<TensorT<T>> gradient_route_rule(OpKind kind, const std::vector<Shape>& input_shapes,
                                            const OpAttrs& attrs, const TensorT<T>& R_out);

/// Winner-take-all scatter back through a max pool; overlapping windows
/// accumulate. Throws on an out-of-range index.
template <typename T>
TensorT<T> maxpool_route(const std::vector<std::size_t>& indices, const TensorT<T>& R_out,
                         const Shape& input_shape);

/// Detached-statistics pass through layer normalization: centering and
/// scaling behave as constants, the affine product is split with the epsilon
/// denominator, and the affine bias absorbs its share (returned separately).
template <typename T>
TensorT<T> layernorm_rule(const TensorT<T>& x, const TensorT<T>& mean, const TensorT<T>& rstd,
                          const TensorT<T>& weight, const TensorT<T>& bias,
                          const TensorT<T>& R_out, double eps, TensorT<T>* bias_share);

/// Relevance assigned to every forward argument of `node`, aligned with
/// node.out_edges. `operands` supplies forward argument values for the kinds
/// whose context does not cache them (the deferred engine passes recovered
/// promise args, the oracle passes traced activations); kinds that cache what
/// they need ignore it. Parameter arguments other than additive biases
/// receive zero relevance; bias arguments receive their absorbed share.
///
/// `graph` is consulted only to classify argument producers (parameter vs
/// activation). On OpKind::Unsupported: throws unless `lenient`, in which
/// case relevance passes through unchanged and *fallback_used is set.
template <typename T>
std::vector<TensorT<T>> apply_node_rule(const GraphT<T>& graph, const NodeRecordT<T>& node,
                                        const std::vector<TensorT<T>>& operands,
                                        const TensorT<T>& R_out, const RuleConfig& cfg,
                                        bool lenient = false, bool* fallback_used = nullptr);

}  // namespace oplrp
