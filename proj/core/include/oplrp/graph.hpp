#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oplrp/forward_ops.hpp"
#include "oplrp/op_attrs.hpp"
#include "oplrp/op_kind.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

/// Reference to one output slot of a node. Most nodes have a single output;
/// Unbind and Split produce one slot per piece.
struct ValueRef {
  NodeId node = kNoNode;
  int slot = 0;
  friend bool operator==(const ValueRef&, const ValueRef&) = default;
};

/// What a node keeps around after recording. Mirrors the minimal context a
/// reverse-mode gradient of the op would need; nothing more is ever stored,
/// which is what forces deferred retrieval to exist at all.
enum class CachePolicy {
  None,           // shape metadata only (Add family, shape ops, MaskedFill)
  Operands,       // full operand values (MatMul family, Mul, Div)
  Output,         // forward output plus input (Softmax; its rule reads both)
  SignMask,       // 0/1 mask of positive pre-activations (ReLU)
  GradFactor,     // pointwise derivative factor (GELU, SiLU)
  PoolIndices,    // argmax winners (MaxPool2D)
  NormStats,      // input + per-row mean/rstd + affine params (LayerNorm)
  TerminalValue,  // the tensor itself (Input, Parameter)
};

/// Deterministic caching policy per kind; throws on Unsupported.
CachePolicy caching_policy(OpKind kind);

template <typename T>
struct NodeRecordT {
  NodeId id = kNoNode;
  OpKind kind = OpKind::Unsupported;
  OpAttrs attrs;
  std::vector<ValueRef> out_edges;    // producer of each forward argument, in argument order
  std::vector<Shape> input_shapes;    // shape of each forward argument
  std::vector<Shape> output_shapes;   // one per output slot
  std::vector<TensorT<T>> ctx;        // cached tensors per caching_policy(kind)
  std::vector<std::size_t> pool_indices;

  std::size_t num_outputs() const { return output_shapes.size(); }
};

/// True iff the node's forward output can be read or recomputed from its own
/// cached context. Terminals always qualify.
template <typename T>
bool is_arg_node(const NodeRecordT<T>& node);

/// Exact forward output of an arg node (stored, or recomputed from ctx).
/// Throws on a non-arg node.
template <typename T>
TensorT<T> retrieve_fwd_output(const NodeRecordT<T>& node, int slot = 0);

/// Full activation shadow kept only for the verification oracle. The deferred
/// engine never sees one of these.
template <typename T>
struct TraceT {
  std::vector<std::vector<TensorT<T>>> outputs;  // per node, per slot
};

/// Append-only forward tape. Recording evaluates each op eagerly, stores the
/// per-kind context, and keeps transient output values until seal().
template <typename T>
class GraphT {
 public:
  NodeId add_input(TensorT<T> value, std::string name = {});
  NodeId add_parameter(TensorT<T> value, std::string name = {});

  /// Records an op over existing values and returns the new node id. Sub is
  /// decomposed into Neg + Add so that value-free splits stay uniform; the id
  /// of the Add is returned.
  NodeId record_op(OpKind kind, std::vector<ValueRef> inputs, OpAttrs attrs = {});

  /// Forward value during recording (terminals stay readable after seal()).
  const TensorT<T>& value_of(ValueRef ref) const;

  void set_root(ValueRef ref);
  ValueRef root() const { return root_; }

  /// Drops transient forward values; only policy context survives.
  void seal();
  /// Like seal(), but moves the transient values out as an oracle trace.
  TraceT<T> seal_with_trace();
  bool sealed() const { return sealed_; }

  const NodeRecordT<T>& node(NodeId id) const;
  NodeRecordT<T>& mutable_node(NodeId id);  // test hook (kind injection)
  std::size_t num_nodes() const { return nodes_.size(); }
  const std::vector<NodeRecordT<T>>& nodes() const { return nodes_; }

  /// Input/Parameter ids in recording order.
  const std::vector<NodeId>& inputs() const { return inputs_; }
  const std::vector<NodeId>& parameters() const { return parameters_; }

  /// Order-sensitive hash of (kind, out_edges, output arity) over all nodes
  /// plus the root. Stable across runs for identical recordings.
  std::uint64_t topology_hash() const;

  /// Rebuilds a sealed graph from bare records (JSON import). No forward
  /// values exist, so such graphs support topology work (coverage, aux
  /// construction) but not propagation unless terminals carry values.
  static GraphT adopt(std::vector<NodeRecordT<T>> nodes, ValueRef root);

 private:
  NodeId add_terminal(OpKind kind, TensorT<T> value, std::string name);
  std::vector<NodeRecordT<T>> nodes_;
  std::vector<std::vector<TensorT<T>>> values_;  // transient, cleared by seal()
  std::vector<NodeId> inputs_, parameters_;
  ValueRef root_{};
  bool sealed_ = false;
};

using Graph = GraphT<double>;

/// Edge identity on the relevance side: `consumer` passes relevance to the
/// node that produced its argument `arg_slot`.
struct InEdge {
  NodeId consumer = kNoNode;
  int arg_slot = 0;
};

/// Traversal scaffolding built once after recording: adjacency both ways over
/// the nodes reachable from the root, plus a topological order.
struct AuxGraph {
  std::vector<std::vector<InEdge>> in_edges;  // per node: consumers
  std::vector<std::vector<NodeId>> out_adj;   // per node: argument producers (with multiplicity)
  std::vector<NodeId> topo_stack;             // post-order; back() == root
  std::vector<int> indegree;                  // == in_edges[v].size() for reachable v
  std::vector<char> reachable;
  std::size_t num_edges = 0;
  std::size_t num_reachable = 0;

  /// Position of (consumer, arg_slot) within in_edges[node]; -1 if absent.
  int edge_index(NodeId node, NodeId consumer, int arg_slot) const;
};

/// Depth-first construction from the root; every reachable node appears once.
/// Throws if a cycle is detected (possible only on imported graphs).
template <typename T>
AuxGraph build_aux_graph(const GraphT<T>& graph, NodeId root);

/// Ids of reachable nodes that cannot reach any arg node along out-edges.
/// Always empty for recorded graphs; exposed for the invariant scan.
template <typename T>
std::vector<NodeId> nodes_not_reaching_arg(const GraphT<T>& graph, const AuxGraph& aux);

}  // namespace oplrp
