#include "oplrp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace oplrp {

CachePolicy caching_policy(OpKind kind) {
  switch (kind) {
    case OpKind::Input:
    case OpKind::Parameter:
      return CachePolicy::TerminalValue;
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Sum:
    case OpKind::Mean:
    case OpKind::Cat:
    case OpKind::Stack:
    case OpKind::Unbind:
    case OpKind::Split:
    case OpKind::Reshape:
    case OpKind::Transpose:
    case OpKind::Permute:
    case OpKind::Expand:
    case OpKind::Slice:
    case OpKind::Neg:
    case OpKind::MaskedFill:
      return CachePolicy::None;
    case OpKind::Mul:
    case OpKind::Div:
    case OpKind::Linear:
    case OpKind::MatMul:
    case OpKind::BMM:
    case OpKind::Conv2D:
      return CachePolicy::Operands;
    case OpKind::Softmax:
      return CachePolicy::Output;
    case OpKind::ReLU:
      return CachePolicy::SignMask;
    case OpKind::GELU:
    case OpKind::SiLU:
      return CachePolicy::GradFactor;
    case OpKind::MaxPool2D:
      return CachePolicy::PoolIndices;
    case OpKind::LayerNorm:
      return CachePolicy::NormStats;
    case OpKind::Unsupported:
      break;
  }
  throw std::invalid_argument("caching_policy: unsupported op kind");
}

template <typename T>
bool is_arg_node(const NodeRecordT<T>& node) {
  switch (caching_policy(node.kind)) {
    case CachePolicy::Operands:
    case CachePolicy::Output:
    case CachePolicy::NormStats:
    case CachePolicy::TerminalValue:
      return true;
    default:
      return false;
  }
}

template <typename T>
TensorT<T> retrieve_fwd_output(const NodeRecordT<T>& node, int slot) {
  if (!is_arg_node(node)) {
    std::ostringstream os;
    os << "retrieve_fwd_output: node " << node.id << " (" << op_kind_name(node.kind)
       << ") does not cache enough to reproduce its output";
    throw std::logic_error(os.str());
  }
  if (slot != 0) throw std::logic_error("retrieve_fwd_output: arg nodes are single-output");
  switch (caching_policy(node.kind)) {
    case CachePolicy::TerminalValue:
    case CachePolicy::Output:
      return node.ctx.at(0);
    case CachePolicy::Operands:
      return forward_eval(node.kind, node.ctx, node.attrs).at(0);
    case CachePolicy::NormStats: {
      // ctx = {x, mean, rstd, weight, bias}; stats detached as stored
      const TensorT<T>& x = node.ctx.at(0);
      const TensorT<T>& mean = node.ctx.at(1);
      const TensorT<T>& rstd = node.ctx.at(2);
      const TensorT<T>& g = node.ctx.at(3);
      const TensorT<T>& b = node.ctx.at(4);
      const std::size_t d = x.shape().back();
      const std::size_t rows = x.size() / d;
      TensorT<T> out(x.shape());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
          out[r * d + j] = (x[r * d + j] - mean[r]) * rstd[r] * g[j] + b[j];
      return out;
    }
    default:
      throw std::logic_error("retrieve_fwd_output: unreachable");
  }
}

template <typename T>
NodeId GraphT<T>::add_terminal(OpKind kind, TensorT<T> value, std::string name) {
  if (sealed_) throw std::logic_error("graph: cannot record into a sealed graph");
  NodeRecordT<T> rec;
  rec.id = static_cast<NodeId>(nodes_.size());
  rec.kind = kind;
  rec.attrs.label = std::move(name);
  rec.output_shapes = {value.shape()};
  rec.ctx.push_back(value);
  values_.push_back({std::move(value)});
  nodes_.push_back(std::move(rec));
  return nodes_.back().id;
}

template <typename T>
NodeId GraphT<T>::add_input(TensorT<T> value, std::string name) {
  const NodeId id = add_terminal(OpKind::Input, std::move(value), std::move(name));
  inputs_.push_back(id);
  return id;
}

template <typename T>
NodeId GraphT<T>::add_parameter(TensorT<T> value, std::string name) {
  const NodeId id = add_terminal(OpKind::Parameter, std::move(value), std::move(name));
  parameters_.push_back(id);
  return id;
}

template <typename T>
const TensorT<T>& GraphT<T>::value_of(ValueRef ref) const {
  if (ref.node < 0 || static_cast<std::size_t>(ref.node) >= nodes_.size())
    throw std::out_of_range("graph: dangling value ref to node " + std::to_string(ref.node));
  if (sealed_) {
    const auto& rec = nodes_[ref.node];
    if (is_terminal(rec.kind)) return rec.ctx[0];
    throw std::logic_error("graph: transient values were dropped by seal()");
  }
  const auto& outs = values_[ref.node];
  if (ref.slot < 0 || static_cast<std::size_t>(ref.slot) >= outs.size())
    throw std::out_of_range("graph: value ref slot out of range");
  return outs[ref.slot];
}

template <typename T>
NodeId GraphT<T>::record_op(OpKind kind, std::vector<ValueRef> inputs, OpAttrs attrs) {
  if (sealed_) throw std::logic_error("graph: cannot record into a sealed graph");
  if (is_terminal(kind)) throw std::invalid_argument("graph: terminals use add_input/add_parameter");

  if (kind == OpKind::Sub) {
    if (inputs.size() != 2) throw std::invalid_argument("Sub: expects 2 inputs");
    const NodeId negated = record_op(OpKind::Neg, {inputs[1]});
    return record_op(OpKind::Add, {inputs[0], ValueRef{negated, 0}});
  }

  std::vector<TensorT<T>> in_values;
  in_values.reserve(inputs.size());
  for (const auto& ref : inputs) in_values.push_back(value_of(ref));

  std::vector<TensorT<T>> outputs = forward_eval(kind, in_values, attrs);

  NodeRecordT<T> rec;
  rec.id = static_cast<NodeId>(nodes_.size());
  rec.kind = kind;
  rec.attrs = std::move(attrs);
  rec.out_edges = std::move(inputs);
  for (const auto& v : in_values) rec.input_shapes.push_back(v.shape());
  for (const auto& v : outputs) rec.output_shapes.push_back(v.shape());

  switch (caching_policy(kind)) {
    case CachePolicy::None:
      break;
    case CachePolicy::Operands:
      rec.ctx = in_values;
      break;
    case CachePolicy::Output:
      // softmax keeps its input as well: the relevance rule consumes it and
      // no descendant is guaranteed to cache it
      rec.ctx.push_back(outputs[0]);
      rec.ctx.push_back(in_values[0]);
      break;
    case CachePolicy::SignMask: {
      TensorT<T> m(in_values[0].shape());
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = in_values[0][i] > T(0) ? T(1) : T(0);
      rec.ctx.push_back(std::move(m));
      break;
    }
    case CachePolicy::GradFactor: {
      // pointwise derivative of the activation at the recorded input
      const TensorT<T>& x = in_values[0];
      TensorT<T> gfac(x.shape());
      if (kind == OpKind::GELU) {
        const T c = static_cast<T>(std::sqrt(2.0 / 3.14159265358979323846));
        for (std::size_t i = 0; i < x.size(); ++i) {
          const T v = x[i];
          const T u = c * (v + T(0.044715) * v * v * v);
          const T th = std::tanh(u);
          const T du = c * (T(1) + T(3) * T(0.044715) * v * v);
          gfac[i] = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
        }
      } else {  // SiLU
        for (std::size_t i = 0; i < x.size(); ++i) {
          const T s = T(1) / (T(1) + std::exp(-x[i]));
          gfac[i] = s + x[i] * s * (T(1) - s);
        }
      }
      rec.ctx.push_back(std::move(gfac));
      break;
    }
    case CachePolicy::PoolIndices:
      rec.pool_indices = maxpool2d_forward(in_values[0], rec.attrs).indices;
      break;
    case CachePolicy::NormStats: {
      LayerNormStats stats;
      layernorm_forward(in_values[0], in_values[1], in_values[2], rec.attrs.epsilon, &stats);
      rec.ctx.push_back(in_values[0]);
      std::vector<T> mean_v(stats.mean.begin(), stats.mean.end());
      std::vector<T> rstd_v(stats.rstd.begin(), stats.rstd.end());
      const Shape stat_shape{mean_v.size()};
      rec.ctx.push_back(TensorT<T>(stat_shape, std::move(mean_v)));
      rec.ctx.push_back(TensorT<T>(stat_shape, std::move(rstd_v)));
      rec.ctx.push_back(in_values[1]);
      rec.ctx.push_back(in_values[2]);
      break;
    }
    case CachePolicy::TerminalValue:
      throw std::logic_error("graph: unreachable");
  }

  values_.push_back(std::move(outputs));
  nodes_.push_back(std::move(rec));
  return nodes_.back().id;
}

template <typename T>
void GraphT<T>::set_root(ValueRef ref) {
  value_of(ref);  // validates
  root_ = ref;
}

template <typename T>
void GraphT<T>::seal() {
  values_.clear();
  values_.shrink_to_fit();
  sealed_ = true;
}

template <typename T>
TraceT<T> GraphT<T>::seal_with_trace() {
  TraceT<T> trace;
  trace.outputs = std::move(values_);
  values_.clear();
  sealed_ = true;
  return trace;
}

template <typename T>
const NodeRecordT<T>& GraphT<T>::node(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw std::out_of_range("graph: no node " + std::to_string(id));
  return nodes_[id];
}

template <typename T>
NodeRecordT<T>& GraphT<T>::mutable_node(NodeId id) {
  return const_cast<NodeRecordT<T>&>(static_cast<const GraphT*>(this)->node(id));
}

template <typename T>
std::uint64_t GraphT<T>::topology_hash() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(nodes_.size());
  for (const auto& n : nodes_) {
    mix(static_cast<std::uint64_t>(n.kind));
    mix(n.out_edges.size());
    for (const auto& e : n.out_edges) {
      mix(static_cast<std::uint64_t>(e.node) + 0x9e3779b97f4a7c15ull);
      mix(static_cast<std::uint64_t>(e.slot));
    }
    mix(n.output_shapes.size());
  }
  mix(static_cast<std::uint64_t>(root_.node));
  mix(static_cast<std::uint64_t>(root_.slot));
  return h;
}

template <typename T>
GraphT<T> GraphT<T>::adopt(std::vector<NodeRecordT<T>> nodes, ValueRef root) {
  GraphT<T> g;
  g.nodes_ = std::move(nodes);
  for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
    if (g.nodes_[i].id != static_cast<NodeId>(i))
      throw std::invalid_argument("graph: adopted node ids must be dense and ordered");
    if (g.nodes_[i].kind == OpKind::Input) g.inputs_.push_back(g.nodes_[i].id);
    if (g.nodes_[i].kind == OpKind::Parameter) g.parameters_.push_back(g.nodes_[i].id);
  }
  if (root.node < 0 || static_cast<std::size_t>(root.node) >= g.nodes_.size())
    throw std::invalid_argument("graph: adopted root is dangling");
  g.root_ = root;
  g.sealed_ = true;
  return g;
}

int AuxGraph::edge_index(NodeId node, NodeId consumer, int arg_slot) const {
  const auto& edges = in_edges[node];
  for (std::size_t i = 0; i < edges.size(); ++i)
    if (edges[i].consumer == consumer && edges[i].arg_slot == arg_slot)
      return static_cast<int>(i);
  return -1;
}

template <typename T>
AuxGraph build_aux_graph(const GraphT<T>& graph, NodeId root) {
  const std::size_t n = graph.num_nodes();
  if (root < 0 || static_cast<std::size_t>(root) >= n)
    throw std::out_of_range("build_aux_graph: root node " + std::to_string(root) + " missing");
  AuxGraph aux;
  aux.in_edges.resize(n);
  aux.out_adj.resize(n);
  aux.indegree.assign(n, 0);
  aux.reachable.assign(n, 0);

  // Iterative DFS; colors catch cycles on imported graphs.
  enum : char { kWhite = 0, kGray = 1, kBlack = 2 };
  std::vector<char> color(n, kWhite);
  struct Frame {
    NodeId node;
    std::size_t next_edge;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  color[root] = kGray;
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& rec = graph.node(f.node);
    if (f.next_edge < rec.out_edges.size()) {
      const std::size_t slot = f.next_edge++;
      const NodeId child = rec.out_edges[slot].node;
      if (child < 0 || static_cast<std::size_t>(child) >= n)
        throw std::out_of_range("build_aux_graph: dangling edge");
      aux.out_adj[f.node].push_back(child);
      aux.in_edges[child].push_back({f.node, static_cast<int>(slot)});
      ++aux.num_edges;
      if (color[child] == kGray) {
        // gray back-edge: the walk re-entered an ancestor
        throw std::runtime_error("build_aux_graph: cycle detected at node " +
                                 std::to_string(child));
      }
      if (color[child] == kWhite) {
        color[child] = kGray;
        stack.push_back({child, 0});
      }
    } else {
      color[f.node] = kBlack;
      aux.reachable[f.node] = 1;
      aux.topo_stack.push_back(f.node);
      stack.pop_back();
    }
  }
  for (std::size_t v = 0; v < n; ++v) {
    aux.indegree[v] = static_cast<int>(aux.in_edges[v].size());
    if (aux.reachable[v]) ++aux.num_reachable;
  }
  return aux;
}

template <typename T>
std::vector<NodeId> nodes_not_reaching_arg(const GraphT<T>& graph, const AuxGraph& aux) {
  const std::size_t n = graph.num_nodes();
  std::vector<char> ok(n, 0);
  // topo_stack is post-order: producers appear before consumers, so a single
  // sweep settles reachability toward the sinks.
  for (NodeId v : aux.topo_stack) {
    if (is_arg_node(graph.node(v))) {
      ok[v] = 1;
      continue;
    }
    for (NodeId w : aux.out_adj[v])
      if (ok[w]) {
        ok[v] = 1;
        break;
      }
  }
  std::vector<NodeId> bad;
  for (std::size_t v = 0; v < n; ++v)
    if (aux.reachable[v] && !ok[v]) bad.push_back(static_cast<NodeId>(v));
  return bad;
}

#define OPLRP_INSTANTIATE_GRAPH(T)                                                     \
  template bool is_arg_node(const NodeRecordT<T>&);                                    \
  template TensorT<T> retrieve_fwd_output(const NodeRecordT<T>&, int);                 \
  template class GraphT<T>;                                                            \
  template AuxGraph build_aux_graph(const GraphT<T>&, NodeId);                         \
  template std::vector<NodeId> nodes_not_reaching_arg(const GraphT<T>&, const AuxGraph&)

OPLRP_INSTANTIATE_GRAPH(double);
OPLRP_INSTANTIATE_GRAPH(float);

}  // namespace oplrp
