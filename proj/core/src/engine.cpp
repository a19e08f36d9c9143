#include "oplrp/engine.hpp"

#include <algorithm>
#include <deque>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace oplrp {

template <typename T>
TensorT<T> init_relevance(const TensorT<T>& output, std::size_t target, InitMode mode) {
  if (target >= output.size())
    throw std::out_of_range("init_relevance: target " + std::to_string(target) +
                            " out of range for output of size " + std::to_string(output.size()));
  TensorT<T> R(output.shape());
  R[target] = mode == InitMode::one_hot_unit ? T(1) : output[target];
  return R;
}

template <typename T>
NodeId default_target(const GraphT<T>& graph) {
  if (graph.inputs().size() != 1)
    throw std::invalid_argument("default_target: graph has " +
                                std::to_string(graph.inputs().size()) +
                                " input terminals; pass an explicit target");
  return graph.inputs()[0];
}

namespace {

int output_slot_of_edge(const InEdge& e, const auto& consumer_record) {
  return consumer_record.out_edges[e.arg_slot].slot;
}

// Combines per-output-slot relevance pieces into the node's single logical
// output relevance: pieces of a splitting op are reassembled along its axis,
// anything else has one slot.
template <typename T>
TensorT<T> assemble_slots(const NodeRecordT<T>& rec, std::vector<std::optional<TensorT<T>>> pieces) {
  const std::size_t slots = rec.num_outputs();
  for (std::size_t s = 0; s < slots; ++s)
    if (!pieces[s].has_value()) pieces[s] = TensorT<T>::zeros(rec.output_shapes[s]);
  if (slots == 1) return std::move(*pieces[0]);
  std::vector<TensorT<T>> parts;
  parts.reserve(slots);
  for (auto& p : pieces) parts.push_back(std::move(*p));
  if (rec.kind == OpKind::Unbind) {
    OpAttrs a;
    a.axis = rec.attrs.axis.value_or(0);
    return forward_eval(OpKind::Stack, parts, a)[0];
  }
  if (rec.kind == OpKind::Split) {
    OpAttrs a;
    a.axis = rec.attrs.axis.value_or(0);
    return forward_eval(OpKind::Cat, parts, a)[0];
  }
  throw std::logic_error("assemble_slots: unexpected multi-output kind");
}

template <typename T>
class EngineRun {
 public:
  EngineRun(const GraphT<T>& g, const AuxGraph& aux, const TensorT<T>& R_init, NodeId target,
            const PropagateOptions& opt, PromisePathCache* cache_out)
      : g_(g),
        aux_(aux),
        R_init_(&R_init),
        target_(target),
        opt_(opt),
        cache_out_(cache_out),
        arena_(make_callbacks()) {}

  PropagateResult<T> run();

 private:
  using Branch = PromiseBranchT<T>;
  using Promise = PromiseT<T>;

  struct NodeState {
    std::vector<std::optional<TensorT<T>>> edge_tensor;
    std::vector<Branch*> edge_branch;
    Promise* agg = nullptr;
    int pending = 0;
    bool processed = false;
    bool queued = false;
    bool bypassed = false;
  };

  struct Entry {
    NodeId node;
    enum Kind { normal, reach_ahead, resolved } kind;
    TensorT<T> value;
  };

  typename PromiseArenaT<T>::Callbacks make_callbacks() {
    typename PromiseArenaT<T>::Callbacks cb;
    cb.op_result = [this](Promise& p) { return cb_op_result(p); };
    cb.compute_rout = [this](Promise& p) { return cb_compute_rout(p); };
    cb.compute_rins = [this](Promise& p, const TensorT<T>& rout) {
      return cb_compute_rins(p, rout);
    };
    cb.on_complete = [this](Promise&) { drain_stalls(); };
    cb.emit = [this](const RunEvent& e) { emit(e); };
    return cb;
  }

  void emit(RunEvent e) {
    if (opt_.collect_events) events_.push_back(e);
  }

  [[noreturn]] void engine_fail(NodeId node, const std::string& msg) {
    const OpKind kind = g_.node(node).kind;
    std::ostringstream os;
    os << "engine: node " << node << " (" << op_kind_name(kind);
    if (!g_.node(node).attrs.label.empty()) os << " '" << g_.node(node).attrs.label << "'";
    os << "): " << msg;
    throw EngineError(os.str(), node, kind);
  }

  void schedule(Entry e) {
    if (e.kind != Entry::resolved) {
      if (ns_[e.node].queued || ns_[e.node].processed) return;
      ns_[e.node].queued = true;
    }
    pending_push_.push_back(std::move(e));
  }

  void flush_pushes() {
    for (auto it = pending_push_.rbegin(); it != pending_push_.rend(); ++it)
      stack_.push_back(std::move(*it));
    pending_push_.clear();
  }

  void deliver_edge_tensor(NodeId w, int edge, TensorT<T> v) {
    NodeState& st = ns_[w];
    if (st.edge_tensor[edge].has_value() || st.edge_branch[edge] != nullptr)
      engine_fail(w, "duplicate delivery on in-edge " + std::to_string(edge));
    st.edge_tensor[edge] = std::move(v);
    if (--st.pending == 0) on_pending_zero(w);
  }

  void deliver_tensor(NodeId consumer, int arg, TensorT<T> v) {
    const ValueRef ref = g_.node(consumer).out_edges[arg];
    deliver_edge_tensor(ref.node, edge_of_arg_[consumer][arg], std::move(v));
  }

  void deliver_branch(NodeId consumer, int arg, Branch* b) {
    const ValueRef ref = g_.node(consumer).out_edges[arg];
    const NodeId w = ref.node;
    const int edge = edge_of_arg_[consumer][arg];
    NodeState& st = ns_[w];
    if (st.edge_tensor[edge].has_value() || st.edge_branch[edge] != nullptr)
      engine_fail(w, "duplicate delivery on in-edge " + std::to_string(edge));
    b->delivered_to = w;
    b->delivered_edge = edge;
    st.edge_branch[edge] = b;
    --st.pending;

    const bool multi = g_.node(w).num_outputs() > 1;
    if (st.agg == nullptr && st.pending == 0 && aux_.indegree[w] == 1 && !multi) {
      // lone input: the branch passes to the node as-is and may keep chaining
      schedule({w, Entry::normal, {}});
      return;
    }
    if (st.agg == nullptr) {
      st.agg = arena_.create_aggregation(w, /*promoted=*/st.pending == 0);
      arena_.add_parent(*st.agg, b, ref.slot);
      if (st.pending > 0) {
        // reach ahead past the frontier so the branch can find its arg node
        schedule({w, Entry::reach_ahead, {}});
      } else {
        on_pending_zero(w);
      }
    } else {
      arena_.add_parent(*st.agg, b, ref.slot);
      if (st.pending == 0) on_pending_zero(w);
    }
  }

  void on_pending_zero(NodeId w) {
    NodeState& st = ns_[w];
    if (st.agg != nullptr && !st.agg->promoted) arena_.promote(*st.agg);
    if (!st.processed) schedule({w, Entry::normal, {}});
  }

  // Output relevance of `w` assembled from its in-edges in edge order. Branch
  // edges contribute their folded relevance and require allow_branches (only
  // the aggregation inflow path reads them).
  TensorT<T> assemble_R(NodeId w, bool allow_branches) {
    const auto& rec = g_.node(w);
    std::vector<std::optional<TensorT<T>>> pieces(rec.num_outputs());
    const auto& edges = aux_.in_edges[w];
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const TensorT<T>* v = nullptr;
      if (ns_[w].edge_tensor[e].has_value()) {
        v = &*ns_[w].edge_tensor[e];
      } else if (ns_[w].edge_branch[e] != nullptr) {
        if (!allow_branches || !ns_[w].edge_branch[e]->rin_set)
          engine_fail(w, "relevance input on edge " + std::to_string(e) + " is unresolved");
        v = &ns_[w].edge_branch[e]->rin;
      } else {
        engine_fail(w, "missing delivery on in-edge " + std::to_string(e));
      }
      const int slot = output_slot_of_edge(edges[e], g_.node(edges[e].consumer));
      if (!pieces[slot].has_value())
        pieces[slot] = *v;
      else
        *pieces[slot] += *v;
    }
    return assemble_slots(rec, std::move(pieces));
  }

  std::function<TensorT<T>(const TensorT<T>&)> make_fwd_closure(NodeId v) {
    return [this, v](const TensorT<T>& x) -> TensorT<T> {
      const auto& rec = g_.node(v);
      if (rec.kind == OpKind::Unsupported) return x;
      return forward_eval(rec.kind, std::vector<TensorT<T>>{x}, rec.attrs)[0];
    };
  }

  std::function<TensorT<T>(const TensorT<T>&)> make_bwd_closure(NodeId v) {
    return [this, v](const TensorT<T>& r) -> TensorT<T> {
      bool fb = false;
      auto out = apply_node_rule(g_, g_.node(v), {}, r, opt_.rules, opt_.lenient, &fb);
      lenient_fallback_ |= fb;
      ++prop_count_[v];
      return std::move(out[0]);
    };
  }

  std::vector<TensorT<T>> unpack_args(Promise& p) {
    std::vector<TensorT<T>> ops;
    ops.reserve(p.args.size());
    for (const auto& a : p.args) {
      if (!a.has_value() || a->size() != 1)
        throw std::logic_error("engine: promise arg is not a single tensor");
      ops.push_back((*a)[0]);
    }
    return ops;
  }

  std::vector<TensorT<T>> cb_op_result(Promise& p) {
    return forward_eval(p.op_kind, unpack_args(p), p.attrs);
  }

  TensorT<T> cb_compute_rout(Promise& p) {
    if (p.aggregation) return assemble_R(p.origin, /*allow_branches=*/true);
    if (p.parents.empty())
      throw std::logic_error("engine: promise has neither a seeded rout nor parents");
    TensorT<T> r = p.parents[0].branch->rin;
    for (std::size_t i = 1; i < p.parents.size(); ++i) r += p.parents[i].branch->rin;
    return r;
  }

  std::vector<TensorT<T>> cb_compute_rins(Promise& p, const TensorT<T>& rout) {
    bool fb = false;
    auto rins =
        apply_node_rule(g_, g_.node(p.origin), unpack_args(p), rout, opt_.rules, opt_.lenient, &fb);
    lenient_fallback_ |= fb;
    ++prop_count_[p.origin];
    return rins;
  }

  void drain_stalls() {
    for (auto it = stall_.begin(); it != stall_.end();) {
      if (it->second->rin_set) {
        emit({RunEvent::Type::drain, it->first, it->second->promise->id, it->second->index, false});
        schedule({it->first, Entry::resolved, it->second->rin});
        it = stall_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void create_origin_promise(NodeId v, std::optional<TensorT<T>> rout, Branch* parent) {
    const auto& rec = g_.node(v);
    Promise* p = arena_.create(v, rec.kind, rec.attrs, rec.out_edges.size(), std::move(rout));
    if (parent != nullptr) {
      int slot = 0;
      if (parent->promise->aggregation && parent->promise->origin == v)
        slot = rec.num_outputs() > 1 ? -1 : 0;
      arena_.add_parent(*p, parent, slot);
    }
    for (std::size_t i = 0; i < p->num_branches(); ++i)
      deliver_branch(v, static_cast<int>(i), p->branches[i].get());
  }

  void dispatch_tensor(NodeId v, TensorT<T> R) {
    const auto& rec = g_.node(v);
    if (v == target_) result_.target_relevance = R;
    if (is_terminal(rec.kind)) {
      term_result_[v] = std::move(R);
      ++prop_count_[v];
      return;
    }
    if (replay_) {
      auto it = cache_entries_.find(v);
      if (it != cache_entries_.end()) {
        replay_entry(v, *it->second, R);
        return;
      }
    }
    if (rec.kind == OpKind::Unsupported && !opt_.lenient)
      engine_fail(v, "unsupported op kind on a traversed path");
    if (!replay_ && classify_promise_generating(rec.kind) == PromiseClass::strict) {
      create_origin_promise(v, std::move(R), nullptr);
      return;
    }
    bool fb = false;
    auto rins = apply_node_rule(g_, rec, {}, R, opt_.rules, opt_.lenient, &fb);
    lenient_fallback_ |= fb;
    ++prop_count_[v];
    for (std::size_t i = 0; i < rins.size(); ++i)
      deliver_tensor(v, static_cast<int>(i), std::move(rins[i]));
  }

  void dispatch_branch(NodeId v, Branch* b) {
    const auto& rec = g_.node(v);
    if (rec.kind == OpKind::Unsupported) {
      if (!opt_.lenient || rec.out_edges.size() != 1)
        engine_fail(v, "unsupported op kind on a traversed path");
      lenient_fallback_ = true;
      arena_.record_step(*b, v, make_fwd_closure(v), make_bwd_closure(v));
      deliver_branch(v, 0, b);
      return;
    }
    const PromiseClass cls = classify_promise_generating(rec.kind);
    if (cls != PromiseClass::none) {
      create_origin_promise(v, std::nullopt, b);
      return;
    }
    if (is_arg_node(rec)) {
      b->arg_node = v;
      arena_.set_arg(*b, {retrieve_fwd_output(rec)});
      if (b->rin_set) {
        dispatch_tensor(v, b->rin);  // deferred relevance caught up in place
      } else {
        emit({RunEvent::Type::stall, v, b->promise->id, b->index, false});
        stall_.emplace_back(v, b);
      }
      return;
    }
    if (rec.out_edges.size() != 1)
      engine_fail(v, "cannot chain a deferred input through a multi-input node");
    arena_.record_step(*b, v, make_fwd_closure(v), make_bwd_closure(v));
    deliver_branch(v, 0, b);
  }

  // --- cached replay ------------------------------------------------------

  const std::vector<TensorT<T>>& outputs_of(NodeId w) {
    auto it = value_memo_.find(w);
    if (it != value_memo_.end()) return it->second;
    const auto& rec = g_.node(w);
    std::vector<TensorT<T>> outs;
    if (rec.kind != OpKind::Unsupported && is_arg_node(rec)) {
      outs.push_back(retrieve_fwd_output(rec));
    } else {
      std::vector<TensorT<T>> ops;
      ops.reserve(rec.out_edges.size());
      for (const auto& e : rec.out_edges) ops.push_back(outputs_of(e.node)[e.slot]);
      outs = forward_eval(rec.kind, ops, rec.attrs);
    }
    return value_memo_.emplace(w, std::move(outs)).first->second;
  }

  void replay_entry(NodeId v, const CacheEntry& entry, const TensorT<T>& R) {
    const auto& rec = g_.node(v);
    if (entry.origin_promise) {
      std::vector<TensorT<T>> ops;
      ops.reserve(rec.out_edges.size());
      for (const auto& e : rec.out_edges) ops.push_back(outputs_of(e.node)[e.slot]);
      bool fb = false;
      auto rins = apply_node_rule(g_, rec, ops, R, opt_.rules, opt_.lenient, &fb);
      lenient_fallback_ |= fb;
      ++prop_count_[v];
      for (const auto& chain : entry.chains) {
        TensorT<T> val = rins[chain.branch_index];
        for (NodeId n : chain.nodes) val = make_bwd_closure(n)(val);
        deliver_edge_tensor(chain.deliver_to, chain.deliver_edge, std::move(val));
      }
    } else {
      const auto& chain = entry.chains[0];
      TensorT<T> val = R;
      for (NodeId n : chain.nodes) val = make_bwd_closure(n)(val);
      deliver_edge_tensor(chain.deliver_to, chain.deliver_edge, std::move(val));
    }
  }

  // --- final bookkeeping ---------------------------------------------------

  void verify_run();
  void fill_stats();
  void build_cache();

  const GraphT<T>& g_;
  const AuxGraph& aux_;
  const TensorT<T>* R_init_;
  NodeId target_;
  const PropagateOptions& opt_;
  PromisePathCache* cache_out_;

  PromiseArenaT<T> arena_;
  std::vector<NodeState> ns_;
  std::vector<int> prop_count_;
  std::vector<Entry> stack_;
  std::vector<Entry> pending_push_;
  std::deque<std::pair<NodeId, Branch*>> stall_;
  std::vector<std::vector<int>> edge_of_arg_;
  std::vector<std::optional<TensorT<T>>> term_result_;

  EventLog events_;
  PropagateResult<T> result_;
  std::size_t visits_ = 0;
  bool replay_ = false;
  bool lenient_fallback_ = false;
  std::unordered_map<NodeId, const CacheEntry*> cache_entries_;
  std::unordered_map<NodeId, std::vector<TensorT<T>>> value_memo_;
};

template <typename T>
PropagateResult<T> EngineRun<T>::run() {
  const ValueRef root = g_.root();
  if (root.node == kNoNode) throw std::invalid_argument("engine: graph has no root");
  if (root.slot != 0 || g_.node(root.node).num_outputs() != 1)
    throw std::invalid_argument("engine: root must be a single-output value");
  if (R_init_->shape() != g_.node(root.node).output_shapes[0])
    throw std::invalid_argument("engine: relevance seed shape " + shape_str(R_init_->shape()) +
                                " does not match root output " +
                                shape_str(g_.node(root.node).output_shapes[0]));
  if (target_ < 0 || static_cast<std::size_t>(target_) >= g_.num_nodes() ||
      !aux_.reachable[target_])
    throw std::invalid_argument("engine: target node is not reachable from the root");

  const std::size_t n = g_.num_nodes();
  ns_.resize(n);
  prop_count_.assign(n, 0);
  term_result_.resize(n);
  edge_of_arg_.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    ns_[v].pending = aux_.indegree[v];
    ns_[v].edge_tensor.resize(aux_.in_edges[v].size());
    ns_[v].edge_branch.assign(aux_.in_edges[v].size(), nullptr);
    edge_of_arg_[v].assign(g_.node(static_cast<NodeId>(v)).out_edges.size(), -1);
  }
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t e = 0; e < aux_.in_edges[w].size(); ++e) {
      const InEdge& edge = aux_.in_edges[w][e];
      edge_of_arg_[edge.consumer][edge.arg_slot] = static_cast<int>(e);
    }

  if (opt_.cache != nullptr && opt_.cache->topology_hash == g_.topology_hash()) {
    replay_ = true;
    for (const auto& entry : opt_.cache->entries) cache_entries_[entry.node] = &entry;
    for (NodeId s : opt_.cache->skipped) ns_[s].bypassed = true;
  }

  schedule({root.node, Entry::normal, {}});
  flush_pushes();

  for (;;) {
    if (stack_.empty()) {
      drain_stalls();
      flush_pushes();
      if (stack_.empty()) {
        if (!stall_.empty()) {
          std::ostringstream os;
          os << "stall queue still holds " << stall_.size() << " node(s)";
          engine_fail(stall_.front().first, os.str());
        }
        break;
      }
    }
    Entry en = std::move(stack_.back());
    stack_.pop_back();
    const NodeId v = en.node;
    if (en.kind == Entry::resolved) {
      dispatch_tensor(v, std::move(en.value));
      flush_pushes();
      continue;
    }
    if (ns_[v].processed) {
      flush_pushes();
      continue;
    }
    ns_[v].processed = true;
    ns_[v].queued = false;
    ++visits_;
    emit({RunEvent::Type::visit, v, -1, -1, en.kind == Entry::reach_ahead});

    if (ns_[v].agg != nullptr) {
      dispatch_branch(v, ns_[v].agg->branches[0].get());
    } else if (aux_.indegree[v] == 1 && ns_[v].edge_branch[0] != nullptr) {
      dispatch_branch(v, ns_[v].edge_branch[0]);
    } else if (v == root.node) {
      dispatch_tensor(v, *R_init_);
    } else {
      dispatch_tensor(v, assemble_R(v, /*allow_branches=*/false));
    }
    flush_pushes();
  }

  verify_run();
  fill_stats();
  if (cache_out_ != nullptr) build_cache();

  for (NodeId id : g_.inputs())
    if (aux_.reachable[id])
      result_.input_relevance.emplace_back(
          id, term_result_[id].value_or(TensorT<T>::zeros(g_.node(id).output_shapes[0])));
  for (NodeId id : g_.parameters())
    if (aux_.reachable[id])
      result_.parameter_relevance.emplace_back(
          id, term_result_[id].value_or(TensorT<T>::zeros(g_.node(id).output_shapes[0])));
  result_.events = std::move(events_);
  result_.propagation_counts = prop_count_;
  result_.lenient_fallback = lenient_fallback_;
  return std::move(result_);
}

template <typename T>
void EngineRun<T>::verify_run() {
  if (!arena_.all_complete()) engine_fail(g_.root().node, "run ended with incomplete promises");
  for (std::size_t v = 0; v < g_.num_nodes(); ++v) {
    if (!aux_.reachable[v] || ns_[v].bypassed) continue;
    if (ns_[v].pending != 0)
      engine_fail(static_cast<NodeId>(v),
                  "pending inputs remain: " + std::to_string(ns_[v].pending));
  }
  // every reachable node has relevance propagated through it exactly once
  for (std::size_t v = 0; v < g_.num_nodes(); ++v) {
    if (!aux_.reachable[v]) continue;
    if (prop_count_[v] != 1)
      throw std::logic_error("engine: node " + std::to_string(v) + " propagated " +
                             std::to_string(prop_count_[v]) + " times");
  }
  // internal chains of distinct branches never share a node
  std::unordered_set<NodeId> seen;
  for (const auto& p : arena_.all()) {
    for (const auto& b : p->branches) {
      for (std::size_t i = 0; i < b->chain.size(); ++i) {
        if (p->aggregation && i == 0) continue;  // the aggregation origin itself
        if (!seen.insert(b->chain[i]).second)
          throw std::logic_error("engine: branch chains overlap at node " +
                                 std::to_string(b->chain[i]));
      }
    }
  }
}

template <typename T>
void EngineRun<T>::fill_stats() {
  PromiseStats& s = result_.stats;
  s.num_promises = arena_.origin_count();
  s.pre_promises = arena_.aggregation_count();
  s.total_nodes = aux_.num_reachable;
  s.edges = aux_.num_edges;
  s.node_visits = visits_;
  s.peak_live_promises = arena_.peak_live_origin();
  s.cache_hit = replay_;
  for (const auto& p : arena_.all()) {
    if (p->aggregation) {
      if (!p->branches[0]->chain.empty())
        s.internal_nodes += p->branches[0]->chain.size() - 1;
      continue;
    }
    std::size_t depth = 0;
    for (const auto& b : p->branches) {
      s.internal_nodes += b->chain.size();
      depth = std::max(depth, b->chain.size() + 1);
    }
    s.delta += depth;
  }
  if (replay_) {
    // replay reports the structure it reused
    s.num_promises = 0;
    s.pre_promises = 0;
    s.delta = 0;
    for (const auto& entry : opt_.cache->entries) {
      if (!entry.origin_promise) {
        ++s.pre_promises;
        continue;
      }
      ++s.num_promises;
      std::size_t depth = 0;
      for (const auto& chain : entry.chains) depth = std::max(depth, chain.nodes.size() + 1);
      s.delta += depth;
    }
    s.internal_nodes = opt_.cache->skipped.size();
  }
  s.rho = s.total_nodes == 0 ? 0.0
                             : static_cast<double>(s.num_promises) /
                                   static_cast<double>(s.total_nodes);
  if (s.delta > s.total_nodes)
    throw std::logic_error("engine: promise depth total exceeds node count");
  std::size_t potential = 0;
  for (std::size_t v = 0; v < g_.num_nodes(); ++v)
    if (aux_.reachable[v] &&
        classify_promise_generating(g_.node(static_cast<NodeId>(v)).kind) != PromiseClass::none)
      ++potential;
  if (s.peak_live_promises > potential)
    throw std::logic_error("engine: live promises exceeded the promise-generating set");
}

template <typename T>
void EngineRun<T>::build_cache() {
  PromisePathCache& c = *cache_out_;
  c.topology_hash = g_.topology_hash();
  c.entries.clear();
  c.skipped.clear();
  if (replay_) {
    *cache_out_ = *opt_.cache;
    return;
  }
  for (const auto& p : arena_.all()) {
    if (p->aggregation) {
      const auto& b = *p->branches[0];
      if (b.chain.empty()) continue;
      CacheEntry entry;
      entry.node = p->origin;
      entry.origin_promise = false;
      entry.chains.push_back({b.chain, 0, b.delivered_to, b.delivered_edge});
      for (std::size_t i = 1; i < b.chain.size(); ++i) c.skipped.push_back(b.chain[i]);
      c.entries.push_back(std::move(entry));
    } else {
      CacheEntry entry;
      entry.node = p->origin;
      entry.origin_promise = true;
      for (const auto& b : p->branches) {
        entry.chains.push_back({b->chain, b->index, b->delivered_to, b->delivered_edge});
        for (NodeId nid : b->chain) c.skipped.push_back(nid);
      }
      c.entries.push_back(std::move(entry));
    }
  }
}

}  // namespace

template <typename T>
PropagateResult<T> propagate(const GraphT<T>& graph, const AuxGraph& aux,
                             const TensorT<T>& R_init, NodeId target,
                             const PropagateOptions& options, PromisePathCache* cache_out) {
  options.rules.validate();
  EngineRun<T> run(graph, aux, R_init, target, options, cache_out);
  return run.run();
}

template <typename T>
OracleResult<T> oracle_propagate(const GraphT<T>& graph, const AuxGraph& aux,
                                 const TraceT<T>& trace, const RuleConfig& rules,
                                 const TensorT<T>& R_init, NodeId target, bool lenient) {
  rules.validate();
  if (trace.outputs.size() != graph.num_nodes())
    throw std::invalid_argument("oracle: trace does not cover the graph");
  const NodeId root = graph.root().node;
  const std::size_t n = graph.num_nodes();

  std::vector<std::vector<std::optional<TensorT<T>>>> edge_val(n);
  std::vector<std::vector<int>> edge_of_arg(n);
  for (std::size_t v = 0; v < n; ++v) {
    edge_val[v].resize(aux.in_edges[v].size());
    edge_of_arg[v].assign(graph.node(static_cast<NodeId>(v)).out_edges.size(), -1);
  }
  for (std::size_t w = 0; w < n; ++w)
    for (std::size_t e = 0; e < aux.in_edges[w].size(); ++e)
      edge_of_arg[aux.in_edges[w][e].consumer][aux.in_edges[w][e].arg_slot] = static_cast<int>(e);

  OracleResult<T> result;
  std::vector<std::optional<TensorT<T>>> term(n);

  for (auto it = aux.topo_stack.rbegin(); it != aux.topo_stack.rend(); ++it) {
    const NodeId v = *it;
    const auto& rec = graph.node(v);
    TensorT<T> R;
    if (v == root) {
      R = R_init;
    } else {
      std::vector<std::optional<TensorT<T>>> pieces(rec.num_outputs());
      for (std::size_t e = 0; e < aux.in_edges[v].size(); ++e) {
        if (!edge_val[v][e].has_value())
          throw std::logic_error("oracle: missing relevance on edge");
        const auto& edge = aux.in_edges[v][e];
        const int slot = graph.node(edge.consumer).out_edges[edge.arg_slot].slot;
        if (!pieces[slot].has_value())
          pieces[slot] = *edge_val[v][e];
        else
          *pieces[slot] += *edge_val[v][e];
      }
      R = assemble_slots(rec, std::move(pieces));
    }
    if (v == target) result.target_relevance = R;
    if (is_terminal(rec.kind)) {
      term[v] = std::move(R);
      continue;
    }
    std::vector<TensorT<T>> operands;
    operands.reserve(rec.out_edges.size());
    for (const auto& e : rec.out_edges) operands.push_back(trace.outputs[e.node][e.slot]);
    auto rins = apply_node_rule(graph, rec, operands, R, rules, lenient, nullptr);
    for (std::size_t i = 0; i < rins.size(); ++i) {
      const ValueRef ref = rec.out_edges[i];
      edge_val[ref.node][edge_of_arg[v][i]] = std::move(rins[i]);
    }
  }

  for (NodeId id : graph.inputs())
    if (aux.reachable[id])
      result.input_relevance.emplace_back(
          id, term[id].value_or(TensorT<T>::zeros(graph.node(id).output_shapes[0])));
  for (NodeId id : graph.parameters())
    if (aux.reachable[id])
      result.parameter_relevance.emplace_back(
          id, term[id].value_or(TensorT<T>::zeros(graph.node(id).output_shapes[0])));
  return result;
}

#define OPLRP_INSTANTIATE_ENGINE(T)                                                         \
  template TensorT<T> init_relevance(const TensorT<T>&, std::size_t, InitMode);             \
  template NodeId default_target(const GraphT<T>&);                                        \
  template PropagateResult<T> propagate(const GraphT<T>&, const AuxGraph&, const TensorT<T>&, \
                                        NodeId, const PropagateOptions&, PromisePathCache*); \
  template OracleResult<T> oracle_propagate(const GraphT<T>&, const AuxGraph&,              \
                                            const TraceT<T>&, const RuleConfig&,            \
                                            const TensorT<T>&, NodeId, bool)

OPLRP_INSTANTIATE_ENGINE(double);
OPLRP_INSTANTIATE_ENGINE(float);

}  // namespace oplrp
