#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "oplrp/engine.hpp"
#include "oplrp/eval.hpp"
#include "oplrp/json_io.hpp"
#include "oplrp/model_zoo.hpp"

namespace fs = std::filesystem;
using namespace oplrp;

namespace {

struct CommonOpts {
  std::string model = "toy_cnn";
  std::uint64_t seed = 1;
  std::string rules_path;
  std::string mode = "logit";
  std::string out_dir = ".";
  bool lenient = false;
};

RuleConfig load_rules(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--rules", "cannot open " + path);
  json j;
  in >> j;
  return rule_config_from_json(j);
}

InitMode parse_mode(const std::string& mode) {
  if (mode == "logit") return InitMode::target_logit_value;
  if (mode == "unit") return InitMode::one_hot_unit;
  throw CLI::ValidationError("--mode", "must be 'logit' or 'unit'");
}

void write_file(const fs::path& dir, const std::string& name, const std::string& content) {
  fs::create_directories(dir);
  std::ofstream out(dir / name);
  out << content;
  std::cout << "wrote " << (dir / name).string() << "\n";
}

std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_model = true) {
  if (with_model)
    cmd->add_option("--model", o.model, "zoo model name")
        ->check(CLI::IsMember(zoo_model_names()));
  cmd->add_option("--seed", o.seed, "model/input seed");
  cmd->add_option("--rules", o.rules_path, "rule config JSON file");
  cmd->add_option("--mode", o.mode, "relevance seed: logit|unit");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_flag("--lenient", o.lenient, "pass relevance through unsupported kinds");
}

int cmd_attribute(const CommonOpts& o, const std::string& input_path, int target_opt,
                  bool use_cache, bool dump_events, bool inject_unsupported,
                  bool export_graph) {
  const RuleConfig rules = load_rules(o.rules_path);
  const auto model = build_model<double>(o.model, o.seed);
  Tensor input;
  if (input_path.empty()) {
    input = sample_input(model, o.seed);
  } else {
    std::ifstream in(input_path);
    if (!in) throw CLI::ValidationError("--input", "cannot open " + input_path);
    json j;
    in >> j;
    input = tensor_from_json<double>(j);
  }
  auto fwd = run_forward(model, input);
  if (inject_unsupported) {
    for (auto id = static_cast<NodeId>(fwd.graph.num_nodes()); id-- > 0;) {
      auto& rec = fwd.graph.mutable_node(id);
      if (!is_terminal(rec.kind) && id != fwd.graph.root().node) {
        rec.kind = OpKind::Unsupported;
        rec.attrs.label = "InjectedOp";
        break;
      }
    }
  }
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  const std::size_t target =
      target_opt >= 0 ? static_cast<std::size_t>(target_opt) : argmax(fwd.output);
  const Tensor R = init_relevance(fwd.output, target, parse_mode(o.mode));

  PropagateOptions opt;
  opt.rules = rules;
  opt.lenient = o.lenient;
  opt.collect_events = dump_events;

  json stats_json;
  PropagateResult<double> res;
  if (use_cache) {
    PromisePathCache cache;
    const auto t0 = std::chrono::steady_clock::now();
    res = propagate(fwd.graph, aux, R, default_target(fwd.graph), opt, &cache);
    const auto t1 = std::chrono::steady_clock::now();
    PropagateOptions opt2 = opt;
    opt2.cache = &cache;
    const auto replay = propagate(fwd.graph, aux, R, default_target(fwd.graph), opt2);
    const auto t2 = std::chrono::steady_clock::now();
    stats_json = stats_to_json(res.stats);
    stats_json["cached_run"] = stats_to_json(replay.stats);
    stats_json["first_run_us"] =
        std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count();
    stats_json["cached_run_us"] =
        std::chrono::duration_cast<std::chrono::microseconds>(t2 - t1).count();
    const double drift = max_abs_diff(replay.target_relevance, res.target_relevance);
    stats_json["replay_drift"] = drift;
  } else {
    res = propagate(fwd.graph, aux, R, default_target(fwd.graph), opt);
    stats_json = stats_to_json(res.stats);
  }
  stats_json["target"] = target;
  stats_json["non_conservative"] = res.lenient_fallback;

  const fs::path dir(o.out_dir);
  write_file(dir, "attribution.csv", attribution_csv(res.target_relevance));
  write_file(dir, "heatmap.pgm", to_pgm_p2(res.target_relevance));
  write_file(dir, "stats.json", stats_json.dump(2) + "\n");
  if (dump_events) write_file(dir, "events.json", events_to_json(res.events).dump(2) + "\n");
  if (export_graph)
    write_file(dir, "graph.json",
               graph_to_json(fwd.graph, /*include_terminal_values=*/true).dump() + "\n");
  std::cout << "attributed " << o.model << " target " << target << ", promises "
            << res.stats.num_promises << ", visits " << res.stats.node_visits << "\n";
  return 0;
}

Occlusion parse_occlusion(const std::string& name) {
  if (name == "mean") return Occlusion::mean_fill;
  if (name == "zero") return Occlusion::zero_fill;
  if (name == "blur") return Occlusion::blur_fill;
  throw CLI::ValidationError("--occlusion", "must be 'mean', 'zero' or 'blur'");
}

int cmd_eval(const CommonOpts& o, std::size_t samples, std::size_t steps, std::size_t per_step,
             const std::string& occlusion, const std::string& attrib) {
  const RuleConfig rules = load_rules(o.rules_path);
  const Occlusion occ = parse_occlusion(occlusion);
  const auto model = build_model<double>(o.model, o.seed);

  double abpc_sum = 0, abpc_sq = 0, comp_sum = 0, suff_sum = 0;
  std::string last_curves;
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor input = sample_input(model, o.seed + 97 * s + 1);
    const Tensor clean = forward_only(model, input);
    const std::size_t target = argmax(clean);

    Tensor attr;
    if (attrib == "random") {
      ZooRng rng(o.seed * 1315423911ull + s + 7);
      attr = Tensor(input.shape());
      for (std::size_t i = 0; i < attr.size(); ++i) attr[i] = rng.uniform() - 0.5;
    } else {
      auto fwd = run_forward(model, input);
      const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
      PropagateOptions opt;
      opt.rules = rules;
      opt.lenient = o.lenient;
      const auto res = propagate(fwd.graph, aux,
                                 init_relevance(fwd.output, target, parse_mode(o.mode)),
                                 default_target(fwd.graph), opt);
      attr = res.target_relevance;
    }

    const auto score = [&](const Tensor& t) { return forward_only(model, t)[target]; };
    auto [morf, lerf] = morf_lerf<double>(score, input, attr, steps, per_step, occ);
    const double a = abpc(morf, lerf);
    auto [comp, suff] = comprehensiveness_sufficiency(morf, lerf, morf.baseline);
    abpc_sum += a;
    abpc_sq += a * a;
    comp_sum += comp;
    suff_sum += suff;
    if (s + 1 == samples) last_curves = curves_csv(morf, lerf);
  }
  const double n = static_cast<double>(samples);
  const double mean = abpc_sum / n;
  const double var = std::max(0.0, abpc_sq / n - mean * mean);
  json metrics = {{"samples", samples},
                  {"attrib", attrib},
                  {"abpc_mean", mean},
                  {"abpc_std", std::sqrt(var)},
                  {"abpc_stderr", std::sqrt(var / n)},
                  {"comprehensiveness_mean", comp_sum / n},
                  {"sufficiency_mean", suff_sum / n}};
  const fs::path dir(o.out_dir);
  write_file(dir, "curves.csv", last_curves);
  write_file(dir, "metrics.json", metrics.dump(2) + "\n");
  std::cout << "abpc " << mean << " +- " << std::sqrt(var / n) << " over " << samples
            << " samples\n";
  return 0;
}

int cmd_coverage(const std::string& graph_path, const std::string& out_dir) {
  std::ifstream in(graph_path);
  if (!in) throw CLI::ValidationError("--graph", "cannot open " + graph_path);
  json j;
  in >> j;
  const auto graph = graph_from_json<double>(j);
  const auto report = coverage_report(graph);
  const json out = coverage_to_json(report);
  if (out_dir.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    write_file(out_dir, "coverage.json", out.dump(2) + "\n");
  }
  return report.uncovered_kinds.empty() ? 0 : 2;
}

int cmd_stats(const CommonOpts& o) {
  const RuleConfig rules = load_rules(o.rules_path);
  const auto model = build_model<double>(o.model, o.seed);
  const Tensor input = sample_input(model, o.seed);
  auto fwd = run_forward(model, input);
  const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
  PropagateOptions opt;
  opt.rules = rules;
  opt.lenient = o.lenient;
  const auto res = propagate(fwd.graph, aux,
                             init_relevance(fwd.output, argmax(fwd.output), parse_mode(o.mode)),
                             default_target(fwd.graph), opt);
  std::cout << stats_to_json(res.stats).dump(2) << "\n";
  return 0;
}

int cmd_selftest(std::size_t seeds) {
  RuleConfig eps;
  eps.softmax_mode = RuleConfig::SoftmaxMode::skip;
  RuleConfig gamma = eps;
  gamma.gamma_linear = 0.1;
  gamma.gamma_conv = 0.3;
  RuleConfig attn;

  bool all_ok = true;
  for (const auto& name : zoo_model_names()) {
    double worst = 0.0;
    bool ok = true;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
      const auto model = build_model<double>(name, seed);
      const Tensor input = sample_input(model, seed + 11);
      auto fwd = run_forward_traced(model, input);
      const auto aux = build_aux_graph(fwd.graph, fwd.graph.root().node);
      const Tensor R = init_relevance(fwd.output, argmax(fwd.output),
                                      InitMode::target_logit_value);
      const NodeId target = default_target(fwd.graph);
      for (const RuleConfig& rules : {eps, gamma, attn}) {
        PropagateOptions opt;
        opt.rules = rules;
        const auto res = propagate(fwd.graph, aux, R, target, opt);
        const auto oracle = oracle_propagate(fwd.graph, aux, fwd.trace, rules, R, target);
        worst = std::max(worst, max_abs_diff(res.target_relevance, oracle.target_relevance));
      }
    }
    ok = worst <= 1e-9;
    all_ok = all_ok && ok;
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << " max |deferred - oracle| = " << worst
              << "\n";
  }
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"operation-level relevance propagation over recorded computation graphs"};
  app.require_subcommand(1);

  CommonOpts at_opts;
  std::string at_input;
  int at_target = -1;
  bool at_cache = false, at_events = false, at_inject = false;
  auto* attribute = app.add_subcommand("attribute", "attribute one model output to its input");
  add_common(attribute, at_opts);
  attribute->add_option("--input", at_input, "input tensor JSON (default: seeded sample)");
  attribute->add_option("--target", at_target, "output index to explain (default: argmax)");
  attribute->add_flag("--cache,!--no-cache", at_cache, "replay a second run from cached paths");
  attribute->add_flag("--events", at_events, "dump the run event log");
  attribute->add_flag("--inject-unsupported", at_inject,
                      "testing hook: overwrite one node with a foreign kind");

  CommonOpts ev_opts;
  std::size_t ev_samples = 20, ev_steps = 8, ev_per = 4;
  std::string ev_occ = "mean", ev_attrib = "lrp";
  auto* evaluate = app.add_subcommand("eval", "perturbation-curve faithfulness metrics");
  add_common(evaluate, ev_opts);
  evaluate->add_option("--samples", ev_samples, "number of evaluated inputs");
  evaluate->add_option("--steps", ev_steps, "occlusion steps");
  evaluate->add_option("--per-step", ev_per, "features occluded per step");
  evaluate->add_option("--occlusion", ev_occ, "mean|zero fill");
  evaluate->add_option("--attrib", ev_attrib, "lrp|random attributions");

  std::string cov_graph, cov_out;
  auto* coverage = app.add_subcommand("coverage", "op-kind coverage of a graph JSON fixture");
  coverage->add_option("--graph", cov_graph, "graph JSON file")->required();
  coverage->add_option("--out", cov_out, "output directory (default: stdout)");

  CommonOpts st_opts;
  auto* stats = app.add_subcommand("stats", "deferred-retrieval statistics for one run");
  add_common(stats, st_opts);

  std::size_t self_seeds = 5;
  auto* selftest = app.add_subcommand("selftest", "oracle-equivalence sweep over the model zoo");
  selftest->add_option("--seeds", self_seeds, "seeds per model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*attribute)
      return cmd_attribute(at_opts, at_input, at_target, at_cache, at_events, at_inject);
    if (*evaluate) return cmd_eval(ev_opts, ev_samples, ev_steps, ev_per, ev_occ, ev_attrib);
    if (*coverage) return cmd_coverage(cov_graph, cov_out);
    if (*stats) return cmd_stats(st_opts);
    if (*selftest) return cmd_selftest(self_seeds);
  } catch (const EngineError& e) {
    std::cerr << "engine error at node " << e.node << " (" << op_kind_name(e.kind)
              << "): " << e.what() << "\n";
    return 2;
  } catch (const CLI::Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::logic_error& e) {
    std::cerr << "engine invariant violated: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
