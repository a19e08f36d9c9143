#include "oplrp/json_io.hpp"

#include <stdexcept>

namespace oplrp {

namespace {

json shape_to_json(const Shape& s) { return json(s); }

Shape shape_from_json(const json& j) { return j.get<Shape>(); }

json attrs_to_json(const OpAttrs& a) {
  json j = json::object();
  if (a.axis.has_value()) j["axis"] = *a.axis;
  if (a.kernel != 0) j["kernel"] = a.kernel;
  if (a.stride != 0) j["stride"] = a.stride;
  if (a.padding != 0) j["padding"] = a.padding;
  if (!a.sizes.empty()) j["sizes"] = a.sizes;
  if (!a.perm.empty()) j["perm"] = a.perm;
  j["epsilon"] = a.epsilon;
  if (a.start != 0) j["start"] = a.start;
  if (a.stop != 0) j["stop"] = a.stop;
  if (!a.mask.empty()) j["mask"] = a.mask;
  if (a.fill_value != 0.0) j["fill_value"] = a.fill_value;
  if (!a.label.empty()) j["label"] = a.label;
  return j;
}

OpAttrs attrs_from_json(const json& j) {
  OpAttrs a;
  if (j.contains("axis")) a.axis = j["axis"].get<int>();
  a.kernel = j.value("kernel", 0);
  a.stride = j.value("stride", 0);
  a.padding = j.value("padding", 0);
  if (j.contains("sizes")) a.sizes = j["sizes"].get<std::vector<std::size_t>>();
  if (j.contains("perm")) a.perm = j["perm"].get<std::vector<std::size_t>>();
  a.epsilon = j.value("epsilon", 1e-5);
  a.start = j.value("start", std::int64_t{0});
  a.stop = j.value("stop", std::int64_t{0});
  if (j.contains("mask")) a.mask = j["mask"].get<std::vector<std::uint8_t>>();
  a.fill_value = j.value("fill_value", 0.0);
  a.label = j.value("label", std::string{});
  return a;
}

}  // namespace

template <typename T>
json graph_to_json(const GraphT<T>& graph, bool include_terminal_values) {
  json nodes = json::array();
  for (const auto& n : graph.nodes()) {
    json edges = json::array();
    for (const auto& e : n.out_edges) edges.push_back({{"node", e.node}, {"slot", e.slot}});
    json out_shapes = json::array();
    for (const auto& s : n.output_shapes) out_shapes.push_back(shape_to_json(s));
    json in_shapes = json::array();
    for (const auto& s : n.input_shapes) in_shapes.push_back(shape_to_json(s));
    json rec = {{"id", n.id},
                {"kind", n.kind == OpKind::Unsupported && !n.attrs.label.empty()
                             ? json(n.attrs.label)
                             : json(std::string(op_kind_name(n.kind)))},
                {"attrs", attrs_to_json(n.attrs)},
                {"out_edges", edges},
                {"ctx_present", !n.ctx.empty() || !n.pool_indices.empty()},
                {"output_shapes", out_shapes},
                {"input_shapes", in_shapes}};
    if (include_terminal_values && is_terminal(n.kind))
      rec["value"] = tensor_to_json(n.ctx.at(0));
    nodes.push_back(std::move(rec));
  }
  return {{"nodes", std::move(nodes)},
          {"root", {{"node", graph.root().node}, {"slot", graph.root().slot}}}};
}

template <typename T>
GraphT<T> graph_from_json(const json& j) {
  std::vector<NodeRecordT<T>> nodes;
  for (const auto& rec : j.at("nodes")) {
    NodeRecordT<T> n;
    n.id = rec.at("id").get<NodeId>();
    const std::string kind_name = rec.at("kind").get<std::string>();
    n.kind = op_kind_from_name(kind_name);
    n.attrs = rec.contains("attrs") ? attrs_from_json(rec["attrs"]) : OpAttrs{};
    if (n.kind == OpKind::Unsupported) n.attrs.label = kind_name;  // keep the foreign name
    for (const auto& e : rec.at("out_edges"))
      n.out_edges.push_back({e.at("node").get<NodeId>(), e.value("slot", 0)});
    for (const auto& s : rec.at("output_shapes")) n.output_shapes.push_back(shape_from_json(s));
    if (rec.contains("input_shapes"))
      for (const auto& s : rec["input_shapes"]) n.input_shapes.push_back(shape_from_json(s));
    if (rec.contains("value")) n.ctx.push_back(tensor_from_json<T>(rec["value"]));
    nodes.push_back(std::move(n));
  }
  const auto& root = j.at("root");
  return GraphT<T>::adopt(std::move(nodes),
                          {root.at("node").get<NodeId>(), root.value("slot", 0)});
}

json rule_config_to_json(const RuleConfig& cfg) {
  return {{"epsilon", cfg.epsilon},
          {"gamma_linear", cfg.gamma_linear},
          {"gamma_conv", cfg.gamma_conv},
          {"softmax_mode", cfg.softmax_mode == RuleConfig::SoftmaxMode::skip ? "skip" : "attnlrp"},
          {"bilinear_enabled", cfg.bilinear_enabled}};
}

RuleConfig rule_config_from_json(const json& j) {
  RuleConfig cfg;
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.gamma_linear = j.value("gamma_linear", cfg.gamma_linear);
  cfg.gamma_conv = j.value("gamma_conv", cfg.gamma_conv);
  const std::string mode = j.value("softmax_mode", "attnlrp");
  if (mode == "skip")
    cfg.softmax_mode = RuleConfig::SoftmaxMode::skip;
  else if (mode == "attnlrp")
    cfg.softmax_mode = RuleConfig::SoftmaxMode::attnlrp;
  else
    throw std::invalid_argument("rules config: softmax_mode must be 'attnlrp' or 'skip'");
  cfg.bilinear_enabled = j.value("bilinear_enabled", cfg.bilinear_enabled);
  cfg.validate();
  return cfg;
}

json stats_to_json(const PromiseStats& s) {
  return {{"num_promises", s.num_promises}, {"internal_nodes", s.internal_nodes},
          {"delta", s.delta},               {"rho", s.rho},
          {"total_nodes", s.total_nodes},   {"edges", s.edges},
          {"pre_promises", s.pre_promises}, {"peak_live_promises", s.peak_live_promises},
          {"node_visits", s.node_visits},   {"cache_hit", s.cache_hit}};
}

json events_to_json(const EventLog& events) {
  json out = json::array();
  for (const auto& e : events) {
    json row = {{"type", std::string(run_event_name(e.type))}};
    if (e.node != kNoNode) row["node"] = e.node;
    if (e.promise >= 0) row["promise"] = e.promise;
    if (e.branch >= 0) row["branch"] = e.branch;
    if (e.reach_ahead) row["reach_ahead"] = true;
    out.push_back(std::move(row));
  }
  return out;
}

json coverage_to_json(const CoverageReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"kind", row.kind}, {"count", row.count}, {"covered", row.covered}});
  return {{"rows", std::move(rows)},
          {"covered_nodes", r.covered_nodes},
          {"total_nodes", r.total_nodes},
          {"uncovered_kinds", r.uncovered_kinds}};
}

template <typename T>
json tensor_to_json(const TensorT<T>& t) {
  return {{"shape", t.shape()}, {"data", std::vector<T>(t.data().begin(), t.data().end())}};
}

template <typename T>
TensorT<T> tensor_from_json(const json& j) {
  return TensorT<T>(j.at("shape").get<Shape>(), j.at("data").get<std::vector<T>>());
}

#define OPLRP_INSTANTIATE_JSON(T)                              \
  template json graph_to_json(const GraphT<T>&, bool);        \
  template GraphT<T> graph_from_json(const json&);            \
  template json tensor_to_json(const TensorT<T>&);            \
  template TensorT<T> tensor_from_json(const json&)

OPLRP_INSTANTIATE_JSON(double);
OPLRP_INSTANTIATE_JSON(float);

}  // namespace oplrp
