#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "oplrp/graph.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

/// Deterministic Gaussian source. Box-Muller over the raw 64-bit engine so
/// streams are identical across standard libraries.
class ZooRng {
 public:
  explicit ZooRng(std::uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ull : seed) {}
  double uniform();  // [0, 1)
  double gauss();

 private:
  std::uint64_t next_u64();
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// A toy model: seeded parameters plus a recorder that replays its forward
/// pass onto a fresh tape. Models are immutable once built.
template <typename T>
struct ModelSpecT {
  std::string name;
  Shape input_shape;
  std::uint64_t seed = 0;
  // Records the forward pass of the given input terminal; returns the root.
  std::function<ValueRef(GraphT<T>&, NodeId)> record;
};

/// Linear+ReLU stack over `widths`; fused linear nodes, so no deferral is
/// ever needed (promise density zero).
template <typename T>
ModelSpecT<T> build_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed);

/// Residual stack alternating two skip shapes: a plain skip (ReLU between the
/// add and its linear, so every add defers) and the diamond where both add
/// operands descend to one shared node (the reach-ahead case). Nested blocks
/// chain adds into promise trees.
template <typename T>
ModelSpecT<T> build_residual_block(std::size_t width, std::size_t depth, std::uint64_t seed);

/// Single-head attention: projections, scaled scores, softmax, value mix,
/// a two-piece slice/concat skip (so the concat sees a deferred input), and a
/// layer norm. Exercises the bilinear and softmax rules end to end.
template <typename T>
ModelSpecT<T> build_toy_attention(std::size_t d_model, std::size_t seq, std::uint64_t seed);

/// Conv/ReLU/MaxPool twice, then a dense head with explicit bias adds; the
/// adds sit directly between arg nodes, giving depth-1 promises with no
/// internal chain nodes.
template <typename T>
ModelSpecT<T> build_toy_cnn(std::size_t channels, std::uint64_t seed);

/// Lookup by CLI name: toy_mlp, toy_residual, toy_attention, toy_cnn.
template <typename T>
ModelSpecT<T> build_model(std::string_view name, std::uint64_t seed);

std::vector<std::string> zoo_model_names();

template <typename T>
struct ForwardRecordT {
  TensorT<T> output;
  GraphT<T> graph;
};

template <typename T>
struct TracedForwardT {
  TensorT<T> output;
  GraphT<T> graph;
  TraceT<T> trace;
};

template <typename T>
ForwardRecordT<T> run_forward(const ModelSpecT<T>& model, const TensorT<T>& input);

template <typename T>
TracedForwardT<T> run_forward_traced(const ModelSpecT<T>& model, const TensorT<T>& input);

/// Plain forward value, no tape kept.
template <typename T>
TensorT<T> forward_only(const ModelSpecT<T>& model, const TensorT<T>& input);

/// Unit-Gaussian input of the model's shape.
template <typename T>
TensorT<T> sample_input(const ModelSpecT<T>& model, std::uint64_t seed);

}  // namespace oplrp
