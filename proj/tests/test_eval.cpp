#include <doctest.h>

#include <sstream>

#include "oplrp/eval.hpp"
#include "oplrp/json_io.hpp"
#include "oplrp/model_zoo.hpp"

using namespace oplrp;

namespace {

PerturbationCurve make_curve(std::vector<double> xs, std::vector<double> ys,
                             PerturbationCurve::Kind kind) {
  PerturbationCurve c;
  c.kind = kind;
  c.xs = std::move(xs);
  c.ys = std::move(ys);
  c.baseline = c.ys.front();
  return c;
}

}  // namespace

TEST_CASE("area between curves on hand cases") {
  const auto flat = make_curve({0, 0.5, 1}, {1, 1, 1}, PerturbationCurve::Kind::LeRF);
  const auto same = make_curve({0, 0.5, 1}, {1, 1, 1}, PerturbationCurve::Kind::MoRF);
  CHECK(abpc(same, flat) == doctest::Approx(0.0));

  const auto zero = make_curve({0, 1}, {0, 0}, PerturbationCurve::Kind::MoRF);
  const auto one = make_curve({0, 1}, {1, 1}, PerturbationCurve::Kind::LeRF);
  CHECK(abpc(zero, one) == doctest::Approx(1.0));

  const auto drop = make_curve({0, 1}, {1, 0}, PerturbationCurve::Kind::MoRF);
  CHECK(abpc(drop, one) == doctest::Approx(0.5));

  // swapping the curve roles flips the sign
  CHECK(abpc(one, drop) == doctest::Approx(-0.5));

  const auto other = make_curve({0, 0.25, 1}, {1, 1, 1}, PerturbationCurve::Kind::LeRF);
  CHECK_THROWS(abpc(drop, other));
}

TEST_CASE("comprehensiveness and sufficiency") {
  const auto base = make_curve({0, 0.5, 1}, {1, 1, 1}, PerturbationCurve::Kind::MoRF);
  auto [c0, s0] = comprehensiveness_sufficiency(base, base, 1.0);
  CHECK(c0 == doctest::Approx(0.0));
  CHECK(s0 == doctest::Approx(0.0));

  const auto dead = make_curve({0, 1}, {0, 0}, PerturbationCurve::Kind::MoRF);
  const auto alive = make_curve({0, 1}, {1, 1}, PerturbationCurve::Kind::LeRF);
  auto [c1, s1] = comprehensiveness_sufficiency(dead, alive, 1.0);
  CHECK(c1 == doctest::Approx(1.0));
  CHECK(s1 == doctest::Approx(0.0));

  const auto drop = make_curve({0, 1}, {1, 0}, PerturbationCurve::Kind::MoRF);
  auto [c2, s2] = comprehensiveness_sufficiency(drop, alive, 1.0);
  CHECK(c2 == doctest::Approx(0.5));
}

TEST_CASE("morf and lerf sweeps") {
  // the model reads exactly one feature; a correct attribution collapses the
  // MoRF curve at the first step
  const auto score = [](const Tensor& t) { return t[3]; };
  Tensor input({8});
  for (std::size_t i = 0; i < 8; ++i) input[i] = double(i) + 1.0;
  Tensor attr = Tensor::zeros({8});
  attr[3] = 1.0;
  auto [morf, lerf] =
      morf_lerf<double>(score, input, attr, 4, 2, Occlusion::zero_fill);
  CHECK(morf.xs.size() == 5);
  CHECK(morf.ys[0] == doctest::Approx(4.0));
  CHECK(morf.ys[1] == doctest::Approx(0.0));  // feature 3 occluded first
  CHECK(lerf.ys[3] == doctest::Approx(4.0));  // and last on the other sweep
  CHECK(abpc(morf, lerf) > 0.0);

  auto [m0, l0] = morf_lerf<double>(score, input, attr, 0, 2, Occlusion::zero_fill);
  CHECK(m0.xs == std::vector<double>{0.0});
  CHECK(m0.ys[0] == doctest::Approx(4.0));
  CHECK(abpc(m0, l0) == 0.0);

  CHECK_THROWS(morf_lerf<double>(score, input, attr, 5, 2, Occlusion::zero_fill));
}

TEST_CASE("mean fill uses the input mean") {
  const auto score = [](const Tensor& t) { return t[0]; };
  Tensor input({4}, {4, 0, 0, 0});
  Tensor attr({4}, {1, 0.5, 0.25, 0.1});
  auto [morf, lerf] = morf_lerf<double>(score, input, attr, 1, 1, Occlusion::mean_fill);
  CHECK(morf.ys[1] == doctest::Approx(1.0));  // mean of the input
  (void)lerf;
}

TEST_CASE("coverage on zoo graphs and injected kinds") {
  const auto model = build_model<double>("toy_cnn", 3);
  auto fwd = run_forward(model, sample_input(model, 4));
  const auto full = coverage_report(fwd.graph);
  CHECK(full.total_nodes == fwd.graph.num_nodes());
  CHECK(full.covered_nodes == full.total_nodes);
  CHECK(full.uncovered_kinds.empty());

  fwd.graph.mutable_node(3).kind = OpKind::Unsupported;
  fwd.graph.mutable_node(3).attrs.label = "StrangeKind";
  const auto partial = coverage_report(fwd.graph);
  CHECK(partial.covered_nodes == partial.total_nodes - 1);
  REQUIRE(partial.uncovered_kinds.size() == 1);
  CHECK(partial.uncovered_kinds[0] == "StrangeKind");

  const Graph empty;
  const auto none = coverage_report(empty);
  CHECK(none.total_nodes == 0);
  CHECK(none.covered_nodes == 0);
}

TEST_CASE("pgm heatmaps are valid ascii grids") {
  Tensor img({2, 3}, {0, 1, 2, 3, 4, 5});
  const std::string pgm = to_pgm_p2(img);
  std::istringstream is(pgm);
  std::string magic;
  std::size_t w, h;
  int maxval;
  is >> magic >> w >> h >> maxval;
  CHECK(magic == "P2");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxval == 255);
  int v, last = -1;
  std::size_t count = 0;
  while (is >> v) {
    CHECK(v >= 0);
    CHECK(v <= 255);
    last = v;
    ++count;
  }
  CHECK(count == 6);
  CHECK(last == 255);  // the max lands at full brightness

  // constant images render as zeros instead of dividing by zero
  const std::string flat = to_pgm_p2(Tensor({2, 2}, {3, 3, 3, 3}));
  CHECK(flat.find("255\n0") != std::string::npos);
}

TEST_CASE("csv artifacts") {
  Tensor attr({3}, {0.5, -1.0, 2.0});
  const std::string csv = attribution_csv(attr);
  CHECK(csv.find("feature_index,relevance\n0,0.5\n") == 0);

  const auto morf = make_curve({0, 1}, {1, 0}, PerturbationCurve::Kind::MoRF);
  const auto lerf = make_curve({0, 1}, {1, 1}, PerturbationCurve::Kind::LeRF);
  const std::string cc = curves_csv(morf, lerf);
  CHECK(cc.find("step,fraction,morf,lerf\n") == 0);
  CHECK(cc.find("1,1,0,1\n") != std::string::npos);
}

TEST_CASE("top-k hits") {
  Tensor attr({5}, {0.1, 0.9, 0.3, 0.8, 0.0});
  CHECK(topk_hit(attr, {1}, 1));
  CHECK_FALSE(topk_hit(attr, {4}, 2));
  CHECK(topk_hit(attr, {3}, 2));
}

TEST_CASE("json serialization of configs, stats and events") {
  RuleConfig cfg;
  cfg.gamma_conv = 130.0;
  cfg.gamma_linear = 0.001;
  cfg.softmax_mode = RuleConfig::SoftmaxMode::skip;
  const auto j = rule_config_to_json(cfg);
  const auto back = rule_config_from_json(j);
  CHECK(back.gamma_conv == 130.0);
  CHECK(back.softmax_mode == RuleConfig::SoftmaxMode::skip);
  CHECK_THROWS(rule_config_from_json({{"softmax_mode", "bogus"}}));

  PromiseStats stats;
  stats.num_promises = 7;
  stats.total_nodes = 42;
  const auto js = stats_to_json(stats);
  CHECK(js["num_promises"] == 7);
  CHECK(js["total_nodes"] == 42);

  EventLog log;
  log.push_back({RunEvent::Type::visit, 3, -1, -1, true});
  const auto je = events_to_json(log);
  CHECK(je[0]["type"] == "visit");
  CHECK(je[0]["reach_ahead"] == true);
}
