#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oplrp/tensor.hpp"

namespace oplrp {

/// Static per-op metadata captured at recording time. Only the fields an op
/// kind uses are inspected; the rest stay at their defaults.
struct OpAttrs {
  std::optional<int> axis;

  // convolution / pooling
  int kernel = 0;
  int stride = 0;
  int padding = 0;

  // split sizes, reshape/expand target extents
  std::vector<std::size_t> sizes;

  // permutation (Permute), or the two swapped axes (Transpose)
  std::vector<std::size_t> perm;

  // normalization stabilizer
  double epsilon = 1e-5;

  // slice window on `axis`
  std::int64_t start = 0;
  std::int64_t stop = 0;

  // masked fill: row-major mask over the input shape, 1 = filled
  std::vector<std::uint8_t> mask;
  double fill_value = 0.0;

  // terminal names and foreign kind labels
  std::string label;
};

}  // namespace oplrp
