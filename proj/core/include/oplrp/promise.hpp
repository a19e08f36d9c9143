#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "oplrp/graph.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

/// How a kind behaves when relevance reaches it.
///   strict    - always defers: its split needs operand values that are never
///               cached (Add, Sum, Mean).
///   dependent - splits by shape alone, so it defers only when its own
///               relevance input is still a placeholder (Cat, Stack, Unbind,
///               Split).
///   none      - everything else.
enum class PromiseClass { strict, dependent, none };

PromiseClass classify_promise_generating(OpKind kind);

/// One entry of the run record. Sequences of these are what the integration
/// tests assert against, and they export to JSON (json_io.hpp).
struct RunEvent {
  enum class Type {
    visit,
    promise_create,
    pre_promise_create,
    aggregate,  // promoted-at-birth aggregation (mixed or multi-output inputs)
    nest,       // a promise attached beneath an existing branch
    promise_ready,
    promise_complete,
    branch_backward,
    arg_set,
    promote,
    stall,
    drain,
  };
  Type type{};
  NodeId node = kNoNode;
  int promise = -1;
  int branch = -1;
  bool reach_ahead = false;
};
using EventLog = std::vector<RunEvent>;

std::string_view run_event_name(RunEvent::Type type);

template <typename T>
struct PromiseT;

/// Search path for one missing input. While traversal moves toward an arg
/// node it records a closure pair per intermediate node; the forward chain
/// later rebuilds the missing activation from the arg node's output and the
/// backward chain carries the origin's relevance split back down.
template <typename T>
struct PromiseBranchT {
  PromiseT<T>* promise = nullptr;
  int index = 0;

  std::vector<NodeId> chain;  // nodes whose closures were recorded, in traversal order
  std::vector<std::function<TensorT<T>(const TensorT<T>&)>> fwd_chain;
  std::vector<std::function<TensorT<T>(const TensorT<T>&)>> bwd_chain;

  std::vector<PromiseT<T>*> children;  // promises nested beneath this branch

  NodeId arg_node = kNoNode;      // where the search resolved, if it hit an arg node
  NodeId delivered_to = kNoNode;  // last node this branch landed on
  int delivered_edge = -1;        // in-edge index at delivered_to

  bool arg_set = false;
  bool rin_set = false;
  TensorT<T> rin;  // folded relevance at the end of the path, valid once rin_set
};

/// Deferred-propagation record. Ordinary promises sit at a node whose rule
/// needs uncached operand values; aggregation promises merge several incoming
/// branches (and any tensor parts) at one node, and double as the
/// reach-ahead vehicle while un-promoted.
template <typename T>
struct PromiseT {
  int id = -1;
  NodeId origin = kNoNode;
  OpKind op_kind = OpKind::Unsupported;
  OpAttrs attrs;

  bool aggregation = false;
  bool promoted = true;  // false while a pre-promise has not seen all inputs land
  bool ready = false;
  bool complete = false;

  struct ParentLink {
    PromiseBranchT<T>* branch = nullptr;
    int out_slot = 0;  // origin output slot the parent wants; -1 = all slots
    bool pushed = false;
    bool child_wired = false;
  };
  std::vector<ParentLink> parents;

  std::optional<TensorT<T>> rout;  // set at creation for root promises only
  std::vector<std::optional<std::vector<TensorT<T>>>> args;  // value pack per branch
  std::vector<std::unique_ptr<PromiseBranchT<T>>> branches;

  std::vector<TensorT<T>> op_outputs;  // origin forward output per slot, once ready
  bool op_outputs_valid = false;

  std::size_t num_branches() const { return branches.size(); }
};

/// Owns every promise of one run and drives their shared state machine.
/// The numeric work (forward replay of the origin op, the origin's relevance
/// split, relevance inflow assembly) is injected, which keeps this module
/// independent of traversal and rule choices.
template <typename T>
class PromiseArenaT {
 public:
  using Promise = PromiseT<T>;
  using Branch = PromiseBranchT<T>;

  struct Callbacks {
    // forward output of the origin op, one tensor per output slot
    std::function<std::vector<TensorT<T>>(Promise&)> op_result;
    // total relevance arriving at the origin once every parent has resolved
    std::function<TensorT<T>(Promise&)> compute_rout;
    // relevance assigned to each branch by the origin's rule
    std::function<std::vector<TensorT<T>>(Promise&, const TensorT<T>&)> compute_rins;
    // fires after a promise finished backward chaining (engine drains stalls)
    std::function<void(Promise&)> on_complete;
    std::function<void(const RunEvent&)> emit;  // may be empty
  };

  explicit PromiseArenaT(Callbacks callbacks) : cb_(std::move(callbacks)) {}

  Promise* create(NodeId origin, OpKind kind, OpAttrs attrs, std::size_t num_branches,
                  std::optional<TensorT<T>> rout);
  Promise* create_aggregation(NodeId origin, bool promoted);

  /// Attaches a parent branch waiting on `out_slot` of the origin. Child
  /// links are wired immediately unless the promise is an un-promoted
  /// pre-promise; those wire at promote(). If the activation is already
  /// known it is pushed to the new parent on the spot.
  void add_parent(Promise& p, Branch* parent, int out_slot);

  void record_step(Branch& b, NodeId node, std::function<TensorT<T>(const TensorT<T>&)> fwd,
                   std::function<TensorT<T>(const TensorT<T>&)> bwd);

  /// Resolves one branch with the activation found at its arg node (a pack
  /// with one tensor per output slot of the node the search ended on). Folds
  /// the forward chain, stores the arg, and cascades readiness upward.
  void set_arg(Branch& b, std::vector<TensorT<T>> value_pack);

  /// Establishes the deferred child connections of a pre-promise and retries
  /// completion. Throws on double promotion.
  void promote(Promise& p);

  void try_complete(Promise& p);

  const std::vector<std::unique_ptr<Promise>>& all() const { return promises_; }

  std::size_t origin_count() const { return origin_count_; }
  std::size_t aggregation_count() const { return aggregation_count_; }
  std::size_t peak_live_origin() const { return peak_live_origin_; }
  bool all_complete() const;

 private:
  void on_ready(Promise& p);
  void push_to_parent(Promise& p, typename Promise::ParentLink& link);
  void emit(RunEvent e) {
    if (cb_.emit) cb_.emit(e);
  }

  Callbacks cb_;
  std::vector<std::unique_ptr<Promise>> promises_;
  std::size_t origin_count_ = 0;
  std::size_t aggregation_count_ = 0;
  std::size_t live_origin_ = 0;
  std::size_t peak_live_origin_ = 0;
};

/// Recorded promise paths of one run, keyed by graph topology. A later run on
/// an identical topology replays every chain as a single step instead of
/// re-walking its internal nodes.
struct CachedChain {
  std::vector<NodeId> nodes;  // closure order as recorded
  int branch_index = 0;
  NodeId deliver_to = kNoNode;
  int deliver_edge = -1;
};

struct CacheEntry {
  NodeId node = kNoNode;
  bool origin_promise = true;  // false: aggregation chain rooted at `node`
  std::vector<CachedChain> chains;
};

struct PromisePathCache {
  std::uint64_t topology_hash = 0;
  std::vector<CacheEntry> entries;
  std::vector<NodeId> skipped;  // internal nodes bypassed during replay
  bool empty() const { return entries.empty(); }
};

}  // namespace oplrp
