#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "oplrp/graph.hpp"
#include "oplrp/promise.hpp"
#include "oplrp/rules.hpp"
#include "oplrp/tensor.hpp"

namespace oplrp {

enum class InitMode { target_logit_value, one_hot_unit };

/// Zeros everywhere except `target`, which receives the logit value itself or
/// 1.0 depending on mode. Throws if target is out of range.
template <typename T>
TensorT<T> init_relevance(const TensorT<T>& output, std::size_t target, InitMode mode);

/// Per-run counters describing how much deferred machinery a graph needed.
struct PromiseStats {
  std::size_t num_promises = 0;    // realized promise-generating origins
  std::size_t pre_promises = 0;    // aggregation / reach-ahead records
  std::size_t internal_nodes = 0;  // nodes strictly between origins and arg nodes
  std::size_t delta = 0;           // sum over promises of max branch depth
  double rho = 0.0;                // num_promises / total_nodes
  std::size_t total_nodes = 0;     // nodes reachable from the root
  std::size_t edges = 0;
  std::size_t peak_live_promises = 0;
  std::size_t node_visits = 0;  // distinct nodes visited
  bool cache_hit = false;
};

struct PropagateOptions {
  RuleConfig rules;
  bool lenient = false;         // unsupported kinds pass relevance through instead of failing
  bool collect_events = false;  // record the run event log
  const PromisePathCache* cache = nullptr;  // replay when the topology hash matches
};

/// Raised when propagation cannot continue; carries the offending node so the
/// CLI can name it in diagnostics.
class EngineError : public std::runtime_error {
 public:
  EngineError(const std::string& msg, NodeId node, OpKind kind)
      : std::runtime_error(msg), node(node), kind(kind) {}
  NodeId node = kNoNode;
  OpKind kind = OpKind::Unsupported;
};

template <typename T>
struct PropagateResult {
  TensorT<T> target_relevance;
  std::vector<std::pair<NodeId, TensorT<T>>> input_relevance;
  std::vector<std::pair<NodeId, TensorT<T>>> parameter_relevance;
  PromiseStats stats;
  EventLog events;
  std::vector<int> propagation_counts;  // per node id; structural invariant material
  bool lenient_fallback = false;        // some rule fell back; run is non-conservative
};

/// Deferred-retrieval relevance propagation over a sealed graph. Visits every
/// reachable node exactly once (reach-ahead visits flagged in the event log),
/// resolves all promises, and drains the stall queue before returning.
/// `cache_out`, when given, is filled with the promise paths of this run.
template <typename T>
PropagateResult<T> propagate(const GraphT<T>& graph, const AuxGraph& aux,
                             const TensorT<T>& R_init, NodeId target,
                             const PropagateOptions& options,
                             PromisePathCache* cache_out = nullptr);

template <typename T>
struct OracleResult {
  TensorT<T> target_relevance;
  std::vector<std::pair<NodeId, TensorT<T>>> input_relevance;
  std::vector<std::pair<NodeId, TensorT<T>>> parameter_relevance;
};

/// Reference engine: a plain reverse-topological sweep with every activation
/// available from the recording trace. Applies the identical rules; its
/// output defines ground truth for the deferred engine.
template <typename T>
OracleResult<T> oracle_propagate(const GraphT<T>& graph, const AuxGraph& aux,
                                 const TraceT<T>& trace, const RuleConfig& rules,
                                 const TensorT<T>& R_init, NodeId target, bool lenient = false);

/// The unique Input terminal; throws if the graph has none or several.
template <typename T>
NodeId default_target(const GraphT<T>& graph);

template <typename T>
inline const PromiseStats& collect_stats(const PropagateResult<T>& run) {
  return run.stats;
}

}  // namespace oplrp
