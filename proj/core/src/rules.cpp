#include "oplrp/rules.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace oplrp {

void RuleConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("rules: epsilon must be positive");
  if (gamma_linear < 0.0 || gamma_conv < 0.0)
    throw std::invalid_argument("rules: gamma must be non-negative");
}

namespace {

[[noreturn]] void rule_fail(const char* what, const std::string& msg) {
  throw std::invalid_argument(std::string(what) + ": " + msg);
}

// Views a vector or a batch of rows as (rows, cols).
template <typename T>
std::pair<std::size_t, std::size_t> as_rows(const TensorT<T>& t) {
  if (t.rank() == 0 || t.empty()) rule_fail("rules", "empty tensor");
  const std::size_t cols = t.shape().back();
  return {t.size() / cols, cols};
}

// q[r][j] = R[r][j] / (z[r][j] + sign(z) * eps)
template <typename T>
TensorT<T> stabilized_quotient(const TensorT<T>& z, const TensorT<T>& R, double eps) {
  if (z.shape() != R.shape())
    rule_fail("rules", "pre-activation " + shape_str(z.shape()) + " vs relevance " +
                           shape_str(R.shape()));
  TensorT<T> q(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i)
    q[i] = R[i] / (z[i] + stab_sign(z[i]) * static_cast<T>(eps));
  return q;
}

template <typename T>
TensorT<T> expand_to(const TensorT<T>& t, const Shape& target) {
  if (t.shape() == target) return t;
  return add(TensorT<T>::zeros(target), t);
}

}  // namespace

template <typename T>
TensorT<T> epsilon_rule(const TensorT<T>& x, const TensorT<T>& W, const TensorT<T>& z,
                        const TensorT<T>& R_out, double eps) {
  const auto [rows, in] = as_rows(x);
  if (W.rank() != 2 || W.shape()[0] != in)
    rule_fail("epsilon_rule", "weights " + shape_str(W.shape()) + " do not match input " +
                                  shape_str(x.shape()));
  const std::size_t out = W.shape()[1];
  const auto [zrows, zcols] = as_rows(z);
  if (zrows != rows || zcols != out) rule_fail("epsilon_rule", "pre-activation shape mismatch");
  const TensorT<T> q = stabilized_quotient(z, R_out, eps);
  TensorT<T> R_in(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < in; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < out; ++j) acc += W[i * out + j] * q[r * out + j];
      R_in[r * in + i] = x[r * in + i] * acc;
    }
  return R_in;
}

template <typename T>
TensorT<T> epsilon_bias_share(const TensorT<T>& bias, const TensorT<T>& z,
                              const TensorT<T>& R_out, double eps) {
  const auto [rows, out] = as_rows(z);
  if (bias.shape() != Shape{out}) rule_fail("epsilon_bias_share", "bias shape mismatch");
  const TensorT<T> q = stabilized_quotient(z, R_out, eps);
  TensorT<T> share(bias.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out; ++j) share[j] += bias[j] * q[r * out + j];
  return share;
}

template <typename T>
TensorT<T> gamma_rule(const TensorT<T>& x, const TensorT<T>& W, const TensorT<T>& R_out,
                      double gamma, double eps, const TensorT<T>* bias,
                      TensorT<T>* bias_share) {
  const auto [rows, in] = as_rows(x);
  if (W.rank() != 2 || W.shape()[0] != in)
    rule_fail("gamma_rule", "weights " + shape_str(W.shape()) + " do not match input " +
                                shape_str(x.shape()));
  const std::size_t out = W.shape()[1];

  TensorT<T> Wg(W.shape());
  for (std::size_t i = 0; i < W.size(); ++i)
    Wg[i] = W[i] + static_cast<T>(gamma) * std::max(W[i], T(0));
  TensorT<T> bg;
  if (bias) {
    bg = TensorT<T>(bias->shape());
    for (std::size_t j = 0; j < bg.size(); ++j)
      bg[j] = (*bias)[j] + static_cast<T>(gamma) * std::max((*bias)[j], T(0));
  }

  // denominator rebuilt from the boosted terms
  TensorT<T> zg(rows == 1 && x.rank() == 1 ? Shape{out} : Shape{rows, out});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      T acc = bias ? bg[j] : T(0);
      for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * Wg[i * out + j];
      zg[r * out + j] = acc;
    }
  if (R_out.size() != zg.size()) rule_fail("gamma_rule", "relevance shape mismatch");
  TensorT<T> q(zg.shape());
  for (std::size_t i = 0; i < zg.size(); ++i)
    q[i] = R_out[i] / (zg[i] + stab_sign(zg[i]) * static_cast<T>(eps));

  TensorT<T> R_in(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < in; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < out; ++j) acc += Wg[i * out + j] * q[r * out + j];
      R_in[r * in + i] = x[r * in + i] * acc;
    }
  if (bias_share) {
    *bias_share = TensorT<T>::zeros(bias ? bias->shape() : Shape{out});
    if (bias)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) (*bias_share)[j] += bg[j] * q[r * out + j];
  }
  return R_in;
}

template <typename T>
std::vector<TensorT<T>> abs_ratio_rule(const std::vector<TensorT<T>>& operands,
                                       const TensorT<T>& R_out) {
  if (operands.empty()) rule_fail("abs_ratio_rule", "needs at least one operand");
  const Shape& rs = R_out.shape();
  std::vector<TensorT<T>> expanded;
  expanded.reserve(operands.size());
  for (const auto& op : operands) expanded.push_back(expand_to(op, rs));

  TensorT<T> denom(rs);
  for (const auto& e : expanded)
    for (std::size_t i = 0; i < denom.size(); ++i) denom[i] += std::abs(e[i]);

  const T uniform = T(1) / static_cast<T>(operands.size());
  std::vector<TensorT<T>> shares;
  shares.reserve(operands.size());
  for (std::size_t k = 0; k < operands.size(); ++k) {
    TensorT<T> share(rs);
    for (std::size_t i = 0; i < share.size(); ++i)
      share[i] = denom[i] == T(0) ? R_out[i] * uniform
                                  : R_out[i] * std::abs(expanded[k][i]) / denom[i];
    shares.push_back(reduce_to(share, operands[k].shape()));
  }
  return shares;
}

namespace {

template <typename T>
void bilinear_2d(const T* A, const T* V, const T* O, const T* R, T* RA, T* RV, std::size_t n,
                 std::size_t k, std::size_t m, double eps) {
  std::vector<T> q(n * m);
  for (std::size_t i = 0; i < n * m; ++i) {
    const T d = T(2) * O[i];
    q[i] = R[i] / (d + stab_sign(d) * static_cast<T>(eps));
  }
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < k; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < m; ++p) acc += V[i * m + p] * q[j * m + p];
      RA[j * k + i] = A[j * k + i] * acc;
    }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t p = 0; p < m; ++p) {
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += A[j * k + i] * q[j * m + p];
      RV[i * m + p] = V[i * m + p] * acc;
    }
}

}  // namespace

template <typename T>
std::pair<TensorT<T>, TensorT<T>> bilinear_rule(const TensorT<T>& A, const TensorT<T>& V,
                                                const TensorT<T>& O, const TensorT<T>& R_out,
                                                double eps) {
  if (O.shape() != R_out.shape())
    rule_fail("bilinear_rule", "product " + shape_str(O.shape()) + " vs relevance " +
                                   shape_str(R_out.shape()));
  TensorT<T> RA(A.shape()), RV(V.shape());
  if (A.rank() == 2 && V.rank() == 2) {
    const std::size_t n = A.shape()[0], k = A.shape()[1], m = V.shape()[1];
    if (V.shape()[0] != k || O.shape() != Shape{n, m})
      rule_fail("bilinear_rule", "shapes " + shape_str(A.shape()) + " x " + shape_str(V.shape()) +
                                     " -> " + shape_str(O.shape()));
    bilinear_2d(A.data().data(), V.data().data(), O.data().data(), R_out.data().data(),
                RA.data().data(), RV.data().data(), n, k, m, eps);
  } else if (A.rank() == 3 && V.rank() == 3) {
    const std::size_t B = A.shape()[0], n = A.shape()[1], k = A.shape()[2], m = V.shape()[2];
    if (V.shape()[0] != B || V.shape()[1] != k || O.shape() != Shape{B, n, m})
      rule_fail("bilinear_rule", "batched shape mismatch");
    for (std::size_t b = 0; b < B; ++b)
      bilinear_2d(A.data().data() + b * n * k, V.data().data() + b * k * m,
                  O.data().data() + b * n * m, R_out.data().data() + b * n * m,
                  RA.data().data() + b * n * k, RV.data().data() + b * k * m, n, k, m, eps);
  } else {
    rule_fail("bilinear_rule", "expects matching 2-D or 3-D factors");
  }
  return {std::move(RA), std::move(RV)};
}

template <typename T>
TensorT<T> softmax_rule(const TensorT<T>& x, const TensorT<T>& s, const TensorT<T>& R_out,
                        int axis) {
  if (x.shape() != s.shape() || x.shape() != R_out.shape())
    rule_fail("softmax_rule", "x, s and R_out must share a shape");
  int a = axis;
  if (a < 0) a += static_cast<int>(x.rank());
  if (a < 0 || a >= static_cast<int>(x.rank())) rule_fail("softmax_rule", "axis out of range");
  const auto& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= sh[i];
  for (std::size_t i = a + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t extent = sh[a];
  TensorT<T> R_in(sh);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto idx = [&](std::size_t e) { return (o * extent + e) * inner + in; };
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) total += R_out[idx(e)];
      for (std::size_t e = 0; e < extent; ++e)
        R_in[idx(e)] = x[idx(e)] * (R_out[idx(e)] - s[idx(e)] * total);
    }
  return R_in;
}

template <typename T>
std::vector<TensorT<T>> gradient_route_rule(OpKind kind, const std::vector<Shape>& input_shapes,
                                            const OpAttrs& attrs, const TensorT<T>& R_out) {
  switch (kind) {
    case OpKind::Reshape:
      return {reshape(R_out, input_shapes.at(0))};
    case OpKind::Transpose: {
      // the swap is its own inverse
      return forward_eval(OpKind::Transpose, std::vector<TensorT<T>>{R_out}, attrs);
    }
    case OpKind::Permute: {
      std::vector<std::size_t> inv(attrs.perm.size());
      for (std::size_t i = 0; i < attrs.perm.size(); ++i) inv[attrs.perm[i]] = i;
      OpAttrs back;
      back.perm = inv;
      return forward_eval(OpKind::Permute, std::vector<TensorT<T>>{R_out}, back);
    }
    case OpKind::Expand: {
      const Shape& in0 = input_shapes.at(0);
      const std::size_t lead = R_out.rank() - in0.size();
      std::vector<std::size_t> out_st(R_out.rank(), 1), in_st(in0.size(), 1);
      for (std::size_t i = R_out.rank(); i-- > 1;)
        out_st[i - 1] = out_st[i] * R_out.shape()[i];
      for (std::size_t i = in0.size(); i-- > 1;) in_st[i - 1] = in_st[i] * in0[i];
      TensorT<T> R_in(in0);
      for (std::size_t flat = 0; flat < R_out.size(); ++flat) {
        std::size_t rem = flat, off = 0;
        for (std::size_t i = 0; i < R_out.rank(); ++i) {
          const std::size_t coord = rem / out_st[i];
          rem %= out_st[i];
          if (i >= lead && in0[i - lead] != 1) off += coord * in_st[i - lead];
        }
        R_in[off] += R_out[flat];
      }
      return {std::move(R_in)};
    }
    case OpKind::Slice: {
      const Shape& in0 = input_shapes.at(0);
      int a = attrs.axis.value_or(0);
      if (a < 0) a += static_cast<int>(in0.size());
      const std::int64_t extent = static_cast<std::int64_t>(in0[a]);
      std::int64_t start = attrs.start;
      if (start < 0) start += extent;
      TensorT<T> R_in(in0);
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < a; ++i) outer *= in0[i];
      for (std::size_t i = a + 1; i < in0.size(); ++i) inner *= in0[i];
      const std::size_t win = R_out.shape()[a];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < win; ++e)
          for (std::size_t in = 0; in < inner; ++in)
            R_in[(o * static_cast<std::size_t>(extent) + static_cast<std::size_t>(start) + e) *
                     inner +
                 in] = R_out[(o * win + e) * inner + in];
      return {std::move(R_in)};
    }
    case OpKind::Cat: {
      int a = attrs.axis.value_or(0);
      if (a < 0) a += static_cast<int>(R_out.rank());
      std::vector<TensorT<T>> parts;
      std::int64_t base = 0;
      for (const auto& s : input_shapes) {
        OpAttrs sl;
        sl.axis = a;
        sl.start = base;
        sl.stop = base + static_cast<std::int64_t>(s[a]);
        parts.push_back(forward_eval(OpKind::Slice, std::vector<TensorT<T>>{R_out}, sl)[0]);
        base += static_cast<std::int64_t>(s[a]);
      }
      return parts;
    }
    case OpKind::Stack: {
      const std::size_t out_rank = R_out.rank();
      int a = attrs.axis.value_or(0);
      if (a < 0) a += static_cast<int>(out_rank);
      std::vector<TensorT<T>> parts;
      for (std::size_t e = 0; e < input_shapes.size(); ++e) {
        OpAttrs sl;
        sl.axis = a;
        sl.start = static_cast<std::int64_t>(e);
        sl.stop = static_cast<std::int64_t>(e + 1);
        TensorT<T> piece = forward_eval(OpKind::Slice, std::vector<TensorT<T>>{R_out}, sl)[0];
        parts.push_back(reshape(piece, input_shapes[e]));
      }
      return parts;
    }
    default:
      rule_fail("gradient_route_rule", std::string("not a shape op: ") +
                                           std::string(op_kind_name(kind)));
  }
}

template <typename T>
TensorT<T> maxpool_route(const std::vector<std::size_t>& indices, const TensorT<T>& R_out,
                         const Shape& input_shape) {
  if (indices.size() != R_out.size())
    rule_fail("maxpool_route", "index count does not match pooled relevance");
  TensorT<T> R_in(input_shape);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    if (indices[p] >= R_in.size())
      rule_fail("maxpool_route", "winner index out of bounds");
    R_in[indices[p]] += R_out[p];
  }
  return R_in;
}

template <typename T>
TensorT<T> layernorm_rule(const TensorT<T>& x, const TensorT<T>& mean, const TensorT<T>& rstd,
                          const TensorT<T>& weight, const TensorT<T>& bias,
                          const TensorT<T>& R_out, double eps, TensorT<T>* bias_share) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  if (R_out.shape() != x.shape()) rule_fail("layernorm_rule", "relevance shape mismatch");
  TensorT<T> R_in(x.shape());
  if (bias_share) *bias_share = TensorT<T>::zeros(bias.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const T t = (x[r * d + j] - mean[r]) * rstd[r];  // statistics detached
      const T zg = t * weight[j] + bias[j];
      const T q = R_out[r * d + j] / (zg + stab_sign(zg) * static_cast<T>(eps));
      R_in[r * d + j] = t * weight[j] * q;
      if (bias_share) (*bias_share)[j] += bias[j] * q;
    }
  return R_in;
}

namespace {

// Magnitude-proportional spread of a reduced relevance back over the reduced
// axis; shared by Sum and Mean (the 1/n factor cancels in the ratio).
template <typename T>
TensorT<T> spread_reduce(const TensorT<T>& x, std::optional<int> axis, const TensorT<T>& R_out) {
  if (!axis.has_value()) {
    T denom = 0;
    for (std::size_t i = 0; i < x.size(); ++i) denom += std::abs(x[i]);
    const T R0 = R_out[0];
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = denom == T(0) ? R0 / static_cast<T>(x.size()) : R0 * std::abs(x[i]) / denom;
    return out;
  }
  int a = *axis;
  if (a < 0) a += static_cast<int>(x.rank());
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= s[i];
  for (std::size_t i = a + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t extent = s[a];
  TensorT<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T denom = 0;
      for (std::size_t e = 0; e < extent; ++e) denom += std::abs(x[(o * extent + e) * inner + in]);
      const T R = R_out[o * inner + in];
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t i = (o * extent + e) * inner + in;
        out[i] = denom == T(0) ? R / static_cast<T>(extent) : R * std::abs(x[i]) / denom;
      }
    }
  return out;
}

// Relevance to both factors of Z = A.B under the stabilized proportional
// rule, attributing to one side at a time; `to_first` picks the side.
template <typename T>
TensorT<T> epsilon_matmul_side(const TensorT<T>& A, const TensorT<T>& B, const TensorT<T>& Z,
                               const TensorT<T>& R, double eps, bool to_first) {
  const std::size_t n = A.shape()[0], k = A.shape()[1], m = B.shape()[1];
  TensorT<T> q = stabilized_quotient(Z, R, eps);
  if (to_first) {
    TensorT<T> RA(A.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        T acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += B[l * m + j] * q[i * m + j];
        RA[i * k + l] = A[i * k + l] * acc;
      }
    return RA;
  }
  TensorT<T> RB(B.shape());
  for (std::size_t l = 0; l < k; ++l)
    for (std::size_t j = 0; j < m; ++j) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += A[i * k + l] * q[i * m + j];
      RB[l * m + j] = B[l * m + j] * acc;
    }
  return RB;
}

}  // namespace

template <typename T>
std::vector<TensorT<T>> apply_node_rule(const GraphT<T>& graph, const NodeRecordT<T>& node,
                                        const std::vector<TensorT<T>>& operands,
                                        const TensorT<T>& R_out, const RuleConfig& cfg,
                                        bool lenient, bool* fallback_used) {
  const auto is_param = [&](std::size_t arg) {
    return graph.node(node.out_edges.at(arg).node).kind == OpKind::Parameter;
  };
  const auto need_operands = [&]() -> const std::vector<TensorT<T>>& {
    if (operands.empty())
      throw std::logic_error(std::string("apply_node_rule: ") +
                             std::string(op_kind_name(node.kind)) +
                             " needs recovered operand values");
    return operands;
  };

  switch (node.kind) {
    case OpKind::Add:
      return abs_ratio_rule(need_operands(), R_out);
    case OpKind::Mul:
    case OpKind::Div:
      return abs_ratio_rule(operands.empty() ? node.ctx : operands, R_out);
    case OpKind::Neg:
      return {identity_rule(R_out)};
    case OpKind::Sum:
    case OpKind::Mean:
      return {spread_reduce(need_operands()[0], node.attrs.axis, R_out)};
    case OpKind::Cat:
    case OpKind::Stack:
      return gradient_route_rule(node.kind, node.input_shapes, node.attrs, R_out);
    case OpKind::Unbind:
    case OpKind::Split:
      // per-slot pieces were assembled into the full input layout upstream
      return {reshape(R_out, node.input_shapes.at(0))};
    case OpKind::Reshape:
    case OpKind::Transpose:
    case OpKind::Permute:
    case OpKind::Expand:
    case OpKind::Slice:
      return gradient_route_rule(node.kind, node.input_shapes, node.attrs, R_out);
    case OpKind::ReLU:
    case OpKind::GELU:
    case OpKind::SiLU:
      return {identity_rule(R_out)};
    case OpKind::MaskedFill: {
      TensorT<T> R_in = R_out;
      for (std::size_t i = 0; i < R_in.size(); ++i)
        if (node.attrs.mask[i]) R_in[i] = T(0);
      return {std::move(R_in)};
    }
    case OpKind::MaxPool2D:
      return {maxpool_route(node.pool_indices, R_out, node.input_shapes.at(0))};
    case OpKind::Linear: {
      const TensorT<T>& x = node.ctx.at(0);
      const TensorT<T>& W = node.ctx.at(1);
      const TensorT<T>* b = node.ctx.size() > 2 ? &node.ctx[2] : nullptr;
      std::vector<TensorT<T>> out;
      if (cfg.gamma_linear > 0.0) {
        TensorT<T> share;
        out.push_back(gamma_rule(x, W, R_out, cfg.gamma_linear, cfg.epsilon, b, &share));
        out.push_back(TensorT<T>::zeros(W.shape()));
        if (b) out.push_back(std::move(share));
      } else {
        const TensorT<T> z = forward_eval(OpKind::Linear, node.ctx, node.attrs)[0];
        out.push_back(epsilon_rule(x, W, z, R_out, cfg.epsilon));
        out.push_back(TensorT<T>::zeros(W.shape()));
        if (b) out.push_back(epsilon_bias_share(*b, z, R_out, cfg.epsilon));
      }
      return out;
    }
    case OpKind::MatMul: {
      const TensorT<T>& A = node.ctx.at(0);
      const TensorT<T>& B = node.ctx.at(1);
      const bool p0 = is_param(0), p1 = is_param(1);
      if (!p0 && !p1 && cfg.bilinear_enabled) {
        const TensorT<T> O = matmul(A, B);
        auto [RA, RV] = bilinear_rule(A, B, O, R_out, cfg.epsilon);
        return {std::move(RA), std::move(RV)};
      }
      const TensorT<T> Z = matmul(A, B);
      if (p1 || (!p0 && !p1)) {
        // second factor acts as the weight matrix
        TensorT<T> RA = cfg.gamma_linear > 0.0 && p1
                            ? gamma_rule(A, B, R_out, cfg.gamma_linear, cfg.epsilon)
                            : epsilon_matmul_side(A, B, Z, R_out, cfg.epsilon, true);
        return {std::move(RA), TensorT<T>::zeros(B.shape())};
      }
      // parameter on the left: attribute to the right factor
      TensorT<T> RB = epsilon_matmul_side(A, B, Z, R_out, cfg.epsilon, false);
      return {TensorT<T>::zeros(A.shape()), std::move(RB)};
    }
    case OpKind::BMM: {
      const TensorT<T>& A = node.ctx.at(0);
      const TensorT<T>& B = node.ctx.at(1);
      if (cfg.bilinear_enabled && !is_param(0) && !is_param(1)) {
        const TensorT<T> O = bmm(A, B);
        auto [RA, RV] = bilinear_rule(A, B, O, R_out, cfg.epsilon);
        return {std::move(RA), std::move(RV)};
      }
      const std::size_t batches = A.shape()[0];
      const std::size_t an = A.shape()[1] * A.shape()[2];
      const std::size_t bn = B.shape()[1] * B.shape()[2];
      const std::size_t rn = R_out.size() / batches;
      TensorT<T> RA(A.shape());
      for (std::size_t b = 0; b < batches; ++b) {
        TensorT<T> Ab({A.shape()[1], A.shape()[2]},
                      std::vector<T>(A.data().begin() + b * an, A.data().begin() + (b + 1) * an));
        TensorT<T> Bb({B.shape()[1], B.shape()[2]},
                      std::vector<T>(B.data().begin() + b * bn, B.data().begin() + (b + 1) * bn));
        TensorT<T> Rb({A.shape()[1], B.shape()[2]}, std::vector<T>(R_out.data().begin() + b * rn,
                                                                   R_out.data().begin() + (b + 1) * rn));
        TensorT<T> Zb = matmul(Ab, Bb);
        TensorT<T> RAb = epsilon_matmul_side(Ab, Bb, Zb, Rb, cfg.epsilon, true);
        std::copy(RAb.data().begin(), RAb.data().end(), RA.data().begin() + b * an);
      }
      return {std::move(RA), TensorT<T>::zeros(B.shape())};
    }
    case OpKind::Conv2D: {
      const TensorT<T>& x = node.ctx.at(0);
      const TensorT<T>& w = node.ctx.at(1);
      const TensorT<T>* b = node.ctx.size() > 2 ? &node.ctx[2] : nullptr;
      const int K = node.attrs.kernel;
      const int stride = node.attrs.stride > 0 ? node.attrs.stride : 1;
      const int pad = node.attrs.padding;
      const std::size_t O = w.shape()[0], C = w.shape()[1];
      const std::size_t KK = static_cast<std::size_t>(K) * static_cast<std::size_t>(K);

      // unfold to a plain linear map and reuse the linear rules
      const TensorT<T> U = im2col(x, K, stride, pad);
      TensorT<T> Wmat({C * KK, O});
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t ck = 0; ck < C * KK; ++ck) Wmat[ck * O + o] = w[o * C * KK + ck];

      // pooled relevance arrives NCHW; the unfolded map produces (N*OH*OW, O)
      const auto& os = node.output_shapes.at(0);
      const std::size_t N = os[0], OH = os[2], OW = os[3];
      TensorT<T> Rmat({N * OH * OW, O});
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t hw = 0; hw < OH * OW; ++hw)
            Rmat[(n * OH * OW + hw) * O + o] = R_out[(n * O + o) * OH * OW + hw];

      TensorT<T> RU, share;
      if (cfg.gamma_conv > 0.0) {
        RU = gamma_rule(U, Wmat, Rmat, cfg.gamma_conv, cfg.epsilon, b, &share);
      } else {
        TensorT<T> Zmat = matmul(U, Wmat);
        if (b)
          for (std::size_t r = 0; r < N * OH * OW; ++r)
            for (std::size_t o = 0; o < O; ++o) Zmat[r * O + o] += (*b)[o];
        RU = epsilon_rule(U, Wmat, Zmat, Rmat, cfg.epsilon);
        if (b) share = epsilon_bias_share(*b, Zmat, Rmat, cfg.epsilon);
      }
      std::vector<TensorT<T>> out;
      out.push_back(col2im(RU, x.shape(), K, stride, pad));
      out.push_back(TensorT<T>::zeros(w.shape()));
      if (b) out.push_back(std::move(share));
      return out;
    }
    case OpKind::Softmax: {
      if (cfg.softmax_mode == RuleConfig::SoftmaxMode::skip)
        return {TensorT<T>::zeros(node.input_shapes.at(0))};
      const TensorT<T>& s = node.ctx.at(0);
      const TensorT<T>& x = node.ctx.at(1);
      return {softmax_rule(x, s, R_out, node.attrs.axis.value_or(-1))};
    }
    case OpKind::LayerNorm: {
      TensorT<T> share;
      TensorT<T> R_in = layernorm_rule(node.ctx.at(0), node.ctx.at(1), node.ctx.at(2),
                                       node.ctx.at(3), node.ctx.at(4), R_out, cfg.epsilon,
                                       &share);
      return {std::move(R_in), TensorT<T>::zeros(node.ctx.at(3).shape()), std::move(share)};
    }
    case OpKind::Input:
    case OpKind::Parameter:
      throw std::logic_error("apply_node_rule: terminals do not propagate");
    case OpKind::Sub:
      throw std::logic_error("apply_node_rule: Sub is decomposed at recording time");
    case OpKind::Unsupported:
    default: {
      if (!lenient) {
        std::ostringstream os;
        os << "unsupported op kind"
           << (node.attrs.label.empty() ? "" : " '" + node.attrs.label + "'") << " at node "
           << node.id;
        throw std::runtime_error(os.str());
      }
      if (fallback_used) *fallback_used = true;
      std::vector<TensorT<T>> out;
      for (std::size_t a = 0; a < node.out_edges.size(); ++a) {
        const Shape& in_shape = node.input_shapes.at(a);
        if (in_shape == R_out.shape())
          out.push_back(R_out);
        else
          out.push_back(TensorT<T>::zeros(in_shape));
      }
      return out;
    }
  }
}

#define OPLRP_INSTANTIATE_RULES(T)                                                              \
  template TensorT<T> epsilon_rule(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                   const TensorT<T>&, double);                                  \
  template TensorT<T> epsilon_bias_share(const TensorT<T>&, const TensorT<T>&,                 \
                                         const TensorT<T>&, double);                           \
  template TensorT<T> gamma_rule(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,      \
                                 double, double, const TensorT<T>*, TensorT<T>*);              \
  template std::vector<TensorT<T>> abs_ratio_rule(const std::vector<TensorT<T>>&,              \
                                                  const TensorT<T>&);                          \
  template std::pair<TensorT<T>, TensorT<T>> bilinear_rule(const TensorT<T>&, const TensorT<T>&, \
                                                           const TensorT<T>&, const TensorT<T>&, \
                                                           double);                            \
  template TensorT<T> softmax_rule(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                   int);                                                       \
  template std::vector<TensorT<T>> gradient_route_rule(OpKind, const std::vector<Shape>&,      \
                                                       const OpAttrs&, const TensorT<T>&);     \
  template TensorT<T> maxpool_route(const std::vector<std::size_t>&, const TensorT<T>&,        \
                                    const Shape&);                                             \
  template TensorT<T> layernorm_rule(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,  \
                                     const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,  \
                                     double, TensorT<T>*);                                     \
  template std::vector<TensorT<T>> apply_node_rule(const GraphT<T>&, const NodeRecordT<T>&,    \
                                                   const std::vector<TensorT<T>>&,             \
                                                   const TensorT<T>&, const RuleConfig&, bool, \
                                                   bool*)

OPLRP_INSTANTIATE_RULES(double);
OPLRP_INSTANTIATE_RULES(float);

}  // namespace oplrp
