#include "oplrp/model_zoo.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace oplrp {

std::uint64_t ZooRng::next_u64() {
  // splitmix64
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double ZooRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double ZooRng::gauss() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

namespace {

template <typename T>
TensorT<T> gauss_tensor(ZooRng& rng, Shape shape, double scale) {
  TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.gauss() * scale);
  return t;
}

// parameter store shared by the recording closure
template <typename T>
using ParamStore = std::shared_ptr<std::vector<std::pair<std::string, TensorT<T>>>>;

template <typename T>
std::vector<NodeId> add_params(GraphT<T>& g, const ParamStore<T>& params) {
  std::vector<NodeId> ids;
  ids.reserve(params->size());
  for (const auto& [name, value] : *params) ids.push_back(g.add_parameter(value, name));
  return ids;
}

}  // namespace

template <typename T>
ModelSpecT<T> build_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw std::invalid_argument("build_mlp: need at least two widths");
  ZooRng rng(seed);
  auto params = std::make_shared<std::vector<std::pair<std::string, TensorT<T>>>>();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    params->emplace_back("w" + std::to_string(l),
                         gauss_tensor<T>(rng, {widths[l], widths[l + 1]}, scale));
    params->emplace_back("b" + std::to_string(l), gauss_tensor<T>(rng, {widths[l + 1]}, scale));
  }
  ModelSpecT<T> m;
  m.name = "toy_mlp";
  m.input_shape = {widths.front()};
  m.seed = seed;
  const std::size_t layers = widths.size() - 1;
  m.record = [params, layers](GraphT<T>& g, NodeId input) -> ValueRef {
    const auto ids = add_params(g, params);
    ValueRef h{input, 0};
    for (std::size_t l = 0; l < layers; ++l) {
      const NodeId z = g.record_op(OpKind::Linear,
                                   {h, {ids[2 * l], 0}, {ids[2 * l + 1], 0}});
      h = {z, 0};
      if (l + 1 < layers) h = {g.record_op(OpKind::ReLU, {h}), 0};
    }
    return h;
  };
  return m;
}

template <typename T>
ModelSpecT<T> build_residual_block(std::size_t width, std::size_t depth, std::uint64_t seed) {
  if (width == 0 || depth == 0)
    throw std::invalid_argument("build_residual_block: width and depth must be positive");
  ZooRng rng(seed);
  auto params = std::make_shared<std::vector<std::pair<std::string, TensorT<T>>>>();
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  for (std::size_t d = 0; d < depth; ++d) {
    params->emplace_back("w" + std::to_string(d) + "a",
                         gauss_tensor<T>(rng, {width, width}, scale));
    params->emplace_back("b" + std::to_string(d) + "a", gauss_tensor<T>(rng, {width}, scale));
    params->emplace_back("w" + std::to_string(d) + "b",
                         gauss_tensor<T>(rng, {width, width}, scale));
    params->emplace_back("b" + std::to_string(d) + "b", gauss_tensor<T>(rng, {width}, scale));
  }
  params->emplace_back("w_head", gauss_tensor<T>(rng, {width, width}, scale));
  params->emplace_back("b_head", gauss_tensor<T>(rng, {width}, scale));

  ModelSpecT<T> m;
  m.name = "toy_residual";
  m.input_shape = {width};
  m.seed = seed;
  m.record = [params, depth, width](GraphT<T>& g, NodeId input) -> ValueRef {
    const auto ids = add_params(g, params);
    ValueRef x{input, 0};
    for (std::size_t d = 0; d < depth; ++d) {
      const ValueRef wa{ids[4 * d], 0}, ba{ids[4 * d + 1], 0};
      const ValueRef wb{ids[4 * d + 2], 0}, bb{ids[4 * d + 3], 0};
      if (d % 2 == 0) {
        // plain skip: add sees a ReLU it cannot read values from
        const NodeId lin = g.record_op(OpKind::Linear, {x, wa, ba});
        const NodeId act = g.record_op(OpKind::ReLU, {{lin, 0}});
        x = {g.record_op(OpKind::Add, {{act, 0}, x}), 0};
      } else {
        // diamond: both add operands descend to one shared linear
        const NodeId shared = g.record_op(OpKind::Linear, {x, wa, ba});
        const NodeId act = g.record_op(OpKind::ReLU, {{shared, 0}});
        const NodeId lin = g.record_op(OpKind::Linear, {{act, 0}, wb, bb});
        OpAttrs view;
        view.sizes = {width};
        const NodeId pass = g.record_op(OpKind::Reshape, {{shared, 0}}, view);
        x = {g.record_op(OpKind::Add, {{lin, 0}, {pass, 0}}), 0};
      }
    }
    const std::size_t h = ids.size();
    return {g.record_op(OpKind::Linear, {x, {ids[h - 2], 0}, {ids[h - 1], 0}}), 0};
  };
  return m;
}

template <typename T>
ModelSpecT<T> build_toy_attention(std::size_t d_model, std::size_t seq, std::uint64_t seed) {
  if (d_model < 2 || d_model % 2 != 0)
    throw std::invalid_argument("build_toy_attention: d_model must be even and >= 2");
  if (seq == 0) throw std::invalid_argument("build_toy_attention: seq must be positive");
  ZooRng rng(seed);
  auto params = std::make_shared<std::vector<std::pair<std::string, TensorT<T>>>>();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  params->emplace_back("wq", gauss_tensor<T>(rng, {d_model, d_model}, scale));
  params->emplace_back("wk", gauss_tensor<T>(rng, {d_model, d_model}, scale));
  params->emplace_back("wv", gauss_tensor<T>(rng, {d_model, d_model}, scale));
  params->emplace_back("scale",
                       TensorT<T>::scalar(static_cast<T>(1.0 / std::sqrt(double(d_model)))));
  params->emplace_back("ln_g", gauss_tensor<T>(rng, {d_model}, 0.2));
  for (auto& v : params->back().second.data()) v += T(1);  // weight near one
  params->emplace_back("ln_b", TensorT<T>::zeros({d_model}));
  params->emplace_back("wo", gauss_tensor<T>(rng, {d_model, d_model}, scale));

  ModelSpecT<T> m;
  m.name = "toy_attention";
  m.input_shape = {seq, d_model};
  m.seed = seed;
  m.record = [params, d_model](GraphT<T>& g, NodeId input) -> ValueRef {
    const auto ids = add_params(g, params);
    const ValueRef x{input, 0};
    const ValueRef wq{ids[0], 0}, wk{ids[1], 0}, wv{ids[2], 0};
    const ValueRef sc{ids[3], 0}, ln_g{ids[4], 0}, ln_b{ids[5], 0}, wo{ids[6], 0};

    const NodeId q = g.record_op(OpKind::MatMul, {x, wq});
    const NodeId k = g.record_op(OpKind::MatMul, {x, wk});
    const NodeId v = g.record_op(OpKind::MatMul, {x, wv});
    const NodeId kt = g.record_op(OpKind::Transpose, {{k, 0}});
    const NodeId scores = g.record_op(OpKind::MatMul, {{q, 0}, {kt, 0}});
    const NodeId scaled = g.record_op(OpKind::Mul, {{scores, 0}, sc});
    OpAttrs sm;
    sm.axis = -1;
    const NodeId attn = g.record_op(OpKind::Softmax, {{scaled, 0}}, sm);
    const NodeId mixed = g.record_op(OpKind::MatMul, {{attn, 0}, {v, 0}});

    // split/concat skip: the concat receives the residual add's deferred input
    OpAttrs left, right, cat;
    left.axis = 1;
    left.start = 0;
    left.stop = static_cast<std::int64_t>(d_model / 2);
    right.axis = 1;
    right.start = static_cast<std::int64_t>(d_model / 2);
    right.stop = static_cast<std::int64_t>(d_model);
    cat.axis = 1;
    const NodeId h1 = g.record_op(OpKind::Slice, {{mixed, 0}}, left);
    const NodeId h2 = g.record_op(OpKind::Slice, {{mixed, 0}}, right);
    const NodeId joined = g.record_op(OpKind::Cat, {{h1, 0}, {h2, 0}}, cat);
    const NodeId res = g.record_op(OpKind::Add, {x, {joined, 0}});

    OpAttrs ln;
    ln.epsilon = 1e-5;
    const NodeId normed = g.record_op(OpKind::LayerNorm, {{res, 0}, ln_g, ln_b}, ln);
    return {g.record_op(OpKind::MatMul, {{normed, 0}, wo}), 0};
  };
  return m;
}

template <typename T>
ModelSpecT<T> build_toy_cnn(std::size_t channels, std::uint64_t seed) {
  if (channels == 0) throw std::invalid_argument("build_toy_cnn: channels must be positive");
  ZooRng rng(seed);
  auto params = std::make_shared<std::vector<std::pair<std::string, TensorT<T>>>>();
  const std::size_t c1 = channels, c2 = channels * 2;
  params->emplace_back("conv1_w", gauss_tensor<T>(rng, {c1, 1, 3, 3}, 1.0 / 3.0));
  params->emplace_back("conv1_b", gauss_tensor<T>(rng, {c1}, 0.1));
  params->emplace_back("conv2_w",
                       gauss_tensor<T>(rng, {c2, c1, 3, 3}, 1.0 / (3.0 * std::sqrt(double(c1)))));
  params->emplace_back("conv2_b", gauss_tensor<T>(rng, {c2}, 0.1));
  const std::size_t flat = c2 * 2 * 2;
  params->emplace_back("fc1_w", gauss_tensor<T>(rng, {flat, 16}, 1.0 / std::sqrt(double(flat))));
  params->emplace_back("fc1_b", gauss_tensor<T>(rng, {16}, 0.1));
  params->emplace_back("fc2_w", gauss_tensor<T>(rng, {16, 4}, 0.25));
  params->emplace_back("fc2_b", gauss_tensor<T>(rng, {4}, 0.1));

  ModelSpecT<T> m;
  m.name = "toy_cnn";
  m.input_shape = {1, 1, 8, 8};
  m.seed = seed;
  m.record = [params, flat](GraphT<T>& g, NodeId input) -> ValueRef {
    const auto ids = add_params(g, params);
    OpAttrs conv;
    conv.kernel = 3;
    conv.stride = 1;
    conv.padding = 1;
    OpAttrs pool;
    pool.kernel = 2;
    pool.stride = 2;

    ValueRef h{input, 0};
    h = {g.record_op(OpKind::Conv2D, {h, {ids[0], 0}, {ids[1], 0}}, conv), 0};
    h = {g.record_op(OpKind::ReLU, {h}), 0};
    h = {g.record_op(OpKind::MaxPool2D, {h}, pool), 0};
    h = {g.record_op(OpKind::Conv2D, {h, {ids[2], 0}, {ids[3], 0}}, conv), 0};
    h = {g.record_op(OpKind::ReLU, {h}), 0};
    h = {g.record_op(OpKind::MaxPool2D, {h}, pool), 0};
    OpAttrs view;
    view.sizes = {1, flat};
    h = {g.record_op(OpKind::Reshape, {h}, view), 0};

    const NodeId z1 = g.record_op(OpKind::MatMul, {h, {ids[4], 0}});
    const NodeId zb1 = g.record_op(OpKind::Add, {{z1, 0}, {ids[5], 0}});
    const NodeId r1 = g.record_op(OpKind::ReLU, {{zb1, 0}});
    const NodeId z2 = g.record_op(OpKind::MatMul, {{r1, 0}, {ids[6], 0}});
    return {g.record_op(OpKind::Add, {{z2, 0}, {ids[7], 0}}), 0};
  };
  return m;
}

template <typename T>
ModelSpecT<T> build_model(std::string_view name, std::uint64_t seed) {
  if (name == "toy_mlp") return build_mlp<T>({16, 24, 8}, seed);
  if (name == "toy_residual") return build_residual_block<T>(12, 3, seed);
  if (name == "toy_attention") return build_toy_attention<T>(8, 5, seed);
  if (name == "toy_cnn") return build_toy_cnn<T>(4, seed);
  throw std::invalid_argument("unknown model '" + std::string(name) +
                              "'; known: toy_mlp, toy_residual, toy_attention, toy_cnn");
}

std::vector<std::string> zoo_model_names() {
  return {"toy_mlp", "toy_residual", "toy_attention", "toy_cnn"};
}

template <typename T>
ForwardRecordT<T> run_forward(const ModelSpecT<T>& model, const TensorT<T>& input) {
  if (input.shape() != model.input_shape)
    throw std::invalid_argument("run_forward: input shape " + shape_str(input.shape()) +
                                " does not match model shape " + shape_str(model.input_shape));
  ForwardRecordT<T> out;
  const NodeId in = out.graph.add_input(input, "x");
  const ValueRef root = model.record(out.graph, in);
  out.graph.set_root(root);
  out.output = out.graph.value_of(root);
  out.graph.seal();
  return out;
}

template <typename T>
TracedForwardT<T> run_forward_traced(const ModelSpecT<T>& model, const TensorT<T>& input) {
  if (input.shape() != model.input_shape)
    throw std::invalid_argument("run_forward: input shape " + shape_str(input.shape()) +
                                " does not match model shape " + shape_str(model.input_shape));
  TracedForwardT<T> out;
  const NodeId in = out.graph.add_input(input, "x");
  const ValueRef root = model.record(out.graph, in);
  out.graph.set_root(root);
  out.output = out.graph.value_of(root);
  out.trace = out.graph.seal_with_trace();
  return out;
}

template <typename T>
TensorT<T> forward_only(const ModelSpecT<T>& model, const TensorT<T>& input) {
  GraphT<T> g;
  const NodeId in = g.add_input(input, "x");
  const ValueRef root = model.record(g, in);
  return g.value_of(root);
}

template <typename T>
TensorT<T> sample_input(const ModelSpecT<T>& model, std::uint64_t seed) {
  ZooRng rng(seed ^ 0xabcdef1234567890ull);
  return gauss_tensor<T>(rng, model.input_shape, 1.0);
}

#define OPLRP_INSTANTIATE_ZOO(T)                                                              \
  template ModelSpecT<T> build_mlp(const std::vector<std::size_t>&, std::uint64_t);          \
  template ModelSpecT<T> build_residual_block(std::size_t, std::size_t, std::uint64_t);      \
  template ModelSpecT<T> build_toy_attention(std::size_t, std::size_t, std::uint64_t);       \
  template ModelSpecT<T> build_toy_cnn(std::size_t, std::uint64_t);                          \
  template ModelSpecT<T> build_model(std::string_view, std::uint64_t);                       \
  template ForwardRecordT<T> run_forward(const ModelSpecT<T>&, const TensorT<T>&);           \
  template TracedForwardT<T> run_forward_traced(const ModelSpecT<T>&, const TensorT<T>&);    \
  template TensorT<T> forward_only(const ModelSpecT<T>&, const TensorT<T>&);                 \
  template TensorT<T> sample_input(const ModelSpecT<T>&, std::uint64_t)

OPLRP_INSTANTIATE_ZOO(double);
OPLRP_INSTANTIATE_ZOO(float);

}  // namespace oplrp
