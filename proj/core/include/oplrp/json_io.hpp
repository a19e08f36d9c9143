#pragma once

#include <json.hpp>

#include "oplrp/engine.hpp"
#include "oplrp/eval.hpp"
#include "oplrp/graph.hpp"
#include "oplrp/promise.hpp"
#include "oplrp/rules.hpp"

namespace oplrp {

using json = nlohmann::json;

// Graph fixture schema:
//   {"nodes":[{"id","kind","attrs","out_edges","ctx_present","output_shapes"}],"root"}
// Shapes and topology are exact; tensors are not carried except for terminal
// values when include_terminal_values is set (the model fixture format).
template <typename T>
json graph_to_json(const GraphT<T>& graph, bool include_terminal_values = false);

/// Unknown kind names import as Unsupported with the original name kept as
/// the node label, so coverage can report them and strict runs can fail on
/// them by name.
template <typename T>
GraphT<T> graph_from_json(const json& j);

json rule_config_to_json(const RuleConfig& cfg);
RuleConfig rule_config_from_json(const json& j);

json stats_to_json(const PromiseStats& stats);
json events_to_json(const EventLog& events);
json coverage_to_json(const CoverageReport& report);

template <typename T>
json tensor_to_json(const TensorT<T>& t);
template <typename T>
TensorT<T> tensor_from_json(const json& j);

}  // namespace oplrp
