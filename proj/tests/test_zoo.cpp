#include <doctest.h>

#include <cmath>
#include <set>

#include "oplrp/engine.hpp"
#include "oplrp/model_zoo.hpp"

using namespace oplrp;

namespace {

PropagateResult<double> run_model(const std::string& name, std::uint64_t seed,
                                  RuleConfig rules = {}, bool events = false) {
  const auto model = build_model<double>(name, seed);
  const Tensor in = sample_input(model, seed + 1000);
  auto fwd = run_forward(model, in);
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  const Tensor R = init_relevance(fwd.output, 0, InitMode::target_logit_value);
  PropagateOptions opt;
  opt.rules = rules;
  opt.collect_events = events;
  return propagate(fwd.graph, aux, R, default_target(fwd.graph), opt);
}

}  // namespace

TEST_CASE("builders are deterministic") {
  for (const auto& name : zoo_model_names()) {
    const auto m1 = build_model<double>(name, 77);
    const auto m2 = build_model<double>(name, 77);
    const Tensor in = sample_input(m1, 78);
    auto f1 = run_forward(m1, in);
    auto f2 = run_forward(m2, in);
    CHECK(f1.graph.topology_hash() == f2.graph.topology_hash());
    CHECK(max_abs_diff(f1.output, f2.output) == 0.0);
    CHECK(f1.graph.num_nodes() == f2.graph.num_nodes());
    for (std::size_t i = 0; i < f1.output.size(); ++i)
      CHECK(std::isfinite(f1.output[i]));
  }
}

TEST_CASE("mlp on zeros yields the bias cascade") {
  const auto model = build_mlp<double>({4, 8, 2}, 5);
  const Tensor zeros = Tensor::zeros({4});
  auto fwd = run_forward(model, zeros);
  // compose the expected output by hand from the recorded parameters
  Tensor h = Tensor::zeros({4});
  const auto& nodes = fwd.graph.nodes();
  std::vector<Tensor> weights, biases;
  for (const auto& n : nodes)
    if (n.kind == OpKind::Parameter) {
      if (n.attrs.label[0] == 'w')
        weights.push_back(n.ctx[0]);
      else
        biases.push_back(n.ctx[0]);
    }
  REQUIRE(weights.size() == 2);
  Tensor expect = biases[0];
  for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = std::max(expect[i], 0.0);
  expect = add(forward_eval(OpKind::Linear, {expect, weights[1]}, {})[0], biases[1]);
  CHECK(max_abs_diff(fwd.output, expect) <= 1e-12);
}

TEST_CASE("mlp never defers") {
  const auto res = run_model("toy_mlp", 3);
  CHECK(res.stats.num_promises == 0);
  CHECK(res.stats.rho == 0.0);
  CHECK(res.stats.pre_promises == 0);
}

TEST_CASE("residual promises equal its merge count") {
  for (std::size_t depth : {1, 2, 3, 4}) {
    const auto model = build_residual_block<double>(6, depth, 9);
    const Tensor in = sample_input(model, 10);
    auto fwd = run_forward(model, in);
    std::size_t adds = 0;
    for (const auto& n : fwd.graph.nodes())
      if (n.kind == OpKind::Add) ++adds;
    CHECK(adds == depth);
    const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
    PropagateOptions opt;
    const auto res = propagate(fwd.graph, aux,
                               init_relevance(fwd.output, 0, InitMode::target_logit_value),
                               default_target(fwd.graph), opt);
    CHECK(res.stats.num_promises == adds);
    CHECK(res.stats.delta <= res.stats.total_nodes);
  }
}

TEST_CASE("nested residual blocks build promise trees") {
  const auto res = run_model("toy_residual", 13, {}, /*events=*/true);
  bool nested = false;
  for (const auto& e : res.events)
    if (e.type == RunEvent::Type::nest) nested = true;
  CHECK(nested);
}

TEST_CASE("zero input gives zero attribution through the residual stack") {
  const auto model = build_model<double>("toy_residual", 15);
  auto fwd = run_forward(model, Tensor::zeros(model.input_shape));
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  PropagateOptions opt;
  const auto res = propagate(fwd.graph, aux,
                             init_relevance(fwd.output, 0, InitMode::target_logit_value),
                             default_target(fwd.graph), opt);
  CHECK(sum_all(abs(res.target_relevance)) <= 1e-12);
}

TEST_CASE("attention with a single position kills the softmax path") {
  const auto model = build_toy_attention<double>(8, 1, 17);
  const Tensor in = sample_input(model, 18);
  auto fwd = run_forward(model, in);
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  PropagateOptions opt;  // attnlrp softmax
  const auto res = propagate(fwd.graph, aux,
                             init_relevance(fwd.output, 0, InitMode::target_logit_value),
                             default_target(fwd.graph), opt);
  for (const auto& [id, r] : res.parameter_relevance) {
    const auto& label = fwd.graph.node(id).attrs.label;
    if (label == "wq" || label == "wk") CHECK(sum_all(abs(r)) <= 1e-12);
  }
}

TEST_CASE("softmax skip mode routes everything through the value path") {
  RuleConfig skip;
  skip.softmax_mode = RuleConfig::SoftmaxMode::skip;
  const auto model = build_toy_attention<double>(8, 5, 19);
  const Tensor in = sample_input(model, 20);
  auto fwd = run_forward(model, in);
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  PropagateOptions opt;
  opt.rules = skip;
  const auto res = propagate(fwd.graph, aux,
                             init_relevance(fwd.output, 0, InitMode::target_logit_value),
                             default_target(fwd.graph), opt);
  for (const auto& [id, r] : res.parameter_relevance) {
    const auto& label = fwd.graph.node(id).attrs.label;
    if (label == "wq" || label == "wk" || label == "scale") CHECK(sum_all(abs(r)) <= 1e-12);
  }
  // the value path still carries relevance down to the input
  CHECK(sum_all(abs(res.target_relevance)) > 0.0);
}

TEST_CASE("cnn stats match the depth-one picture") {
  const auto res = run_model("toy_cnn", 23);
  CHECK(res.stats.num_promises == 2);  // the two dense bias merges
  CHECK(res.stats.internal_nodes == 0);
  CHECK(res.stats.delta == 2);
}

TEST_CASE("cnn gamma at zero equals the epsilon path") {
  RuleConfig eps;
  RuleConfig gamma0;
  gamma0.gamma_conv = 0.0;
  const auto a = run_model("toy_cnn", 25, eps);
  const auto b = run_model("toy_cnn", 25, gamma0);
  CHECK(max_abs_diff(a.target_relevance, b.target_relevance) == 0.0);
}

TEST_CASE("every rule family and deferral mechanism appears in the zoo") {
  std::set<std::string> flags;
  for (const auto& name : zoo_model_names()) {
    const auto model = build_model<double>(name, 29);
    const Tensor in = sample_input(model, 30);
    auto fwd = run_forward(model, in);
    const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
    PropagateOptions opt;
    opt.collect_events = true;
    const auto res = propagate(fwd.graph, aux,
                               init_relevance(fwd.output, 0, InitMode::target_logit_value),
                               default_target(fwd.graph), opt);
    for (const auto& e : res.events) {
      if (e.type == RunEvent::Type::promise_create) {
        const auto cls = classify_promise_generating(fwd.graph.node(e.node).kind);
        if (cls == PromiseClass::strict) flags.insert("strict");
        if (cls == PromiseClass::dependent) flags.insert("dependent");
      }
      if (e.type == RunEvent::Type::nest) flags.insert("tree");
      if (e.type == RunEvent::Type::pre_promise_create) flags.insert("pre_promise");
      if (e.type == RunEvent::Type::pre_promise_create ||
          e.type == RunEvent::Type::aggregate)
        flags.insert("aggregation");
    }
  }
  CHECK(flags.count("strict"));
  CHECK(flags.count("dependent"));
  CHECK(flags.count("tree"));
  CHECK(flags.count("pre_promise"));
  CHECK(flags.count("aggregation"));
}

TEST_CASE("rejects malformed build parameters") {
  CHECK_THROWS(build_mlp<double>({4}, 1));
  CHECK_THROWS(build_toy_attention<double>(7, 3, 1));
  CHECK_THROWS(build_model<double>("no_such_model", 1));
  const auto model = build_model<double>("toy_mlp", 1);
  CHECK_THROWS(run_forward(model, Tensor::zeros({3})));
}
