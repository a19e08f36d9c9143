#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace oplrp {

/// Node kinds a recorded graph can contain. Every kind maps to exactly one
/// caching policy and exactly one relevance rule.
enum class OpKind : std::uint8_t {
  // terminals
  Input,
  Parameter,
  // arithmetic
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  // linear algebra
  Linear,
  MatMul,
  BMM,
  Conv2D,
  // aggregation / splits
  Sum,
  Mean,
  Cat,
  Stack,
  Unbind,
  Split,
  // shape manipulation
  Reshape,
  Transpose,
  Permute,
  Expand,
  Slice,
  // activations and friends
  ReLU,
  GELU,
  SiLU,
  MaskedFill,
  Softmax,
  LayerNorm,
  MaxPool2D,
  // placeholder for kinds imported from foreign graphs
  Unsupported,
};

std::string_view op_kind_name(OpKind kind);

/// Parses a kind name; unknown names map to OpKind::Unsupported.
OpKind op_kind_from_name(std::string_view name);

bool is_terminal(OpKind kind);

}  // namespace oplrp
