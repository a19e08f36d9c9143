#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "oplrp/forward_ops.hpp"
#include "oplrp/model_zoo.hpp"
#include "oplrp/tensor.hpp"

using namespace oplrp;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t seed) {
  ZooRng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gauss();
  return t;
}

}  // namespace

TEST_CASE("elementwise add") {
  const Tensor a({2}, {1, 2}), b({2}, {3, 4});
  const auto out = forward_eval(OpKind::Add, {a, b}, {});
  CHECK(out.size() == 1);
  CHECK(out[0][0] == 4);
  CHECK(out[0][1] == 6);
}

TEST_CASE("matmul hand product") {
  const Tensor a({1, 2}, {1, 2});
  const Tensor b({2, 1}, {1, -1});
  const auto out = forward_eval(OpKind::MatMul, {a, b}, {})[0];
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out[0] == -1);
}

TEST_CASE("unbind splits an axis into pieces") {
  OpAttrs attrs;
  attrs.axis = 0;
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto outs = forward_eval(OpKind::Unbind, {x}, attrs);
  REQUIRE(outs.size() == 2);
  CHECK(outs[0].shape() == Shape{3});
  CHECK(outs[1].shape() == Shape{3});
  CHECK(outs[1][0] == 4);
}

TEST_CASE("add with zeros is the identity") {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const Tensor a = rand_tensor({2, 3, 2}, s + 1);
    const auto out = forward_eval(OpKind::Add, {a, Tensor::zeros(a.shape())}, {})[0];
    CHECK(max_abs_diff(out, a) == 0.0);
  }
}

TEST_CASE("broadcast policy rejects non-trailing mismatches") {
  const Tensor a({2, 3});
  const Tensor b({2});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  // trailing suffix and scalar are fine
  CHECK_NOTHROW(add(a, Tensor({3})));
  CHECK_NOTHROW(add(a, Tensor::scalar(1.0)));
}

TEST_CASE("reduce_to inverts broadcasting") {
  const Tensor big = rand_tensor({4, 3}, 7);
  const Tensor r = reduce_to(big, {3});
  for (std::size_t j = 0; j < 3; ++j) {
    double want = 0;
    for (std::size_t i = 0; i < 4; ++i) want += big[i * 3 + j];
    CHECK(r[j] == doctest::Approx(want).epsilon(1e-15));
  }
}

TEST_CASE("softmax basics") {
  const auto sym = softmax_forward(Tensor({2}, {0, 0}), -1);
  CHECK(sym[0] == doctest::Approx(0.5));
  CHECK(sym[1] == doctest::Approx(0.5));

  const auto two = softmax_forward(Tensor({2}, {1, -1}), -1);
  CHECK(two[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(two[1] == doctest::Approx(0.1192).epsilon(1e-4));

  const auto one = softmax_forward(Tensor({1}, {5}), -1);
  CHECK(one[0] == doctest::Approx(1.0));

  CHECK_THROWS(softmax_forward(Tensor({2}, {std::nan(""), 0.0}), -1));
}

TEST_CASE("softmax rows sum to one") {
  const Tensor x = rand_tensor({3, 4, 5}, 11);
  const auto s = softmax_forward(x, -1);
  for (std::size_t row = 0; row < 12; ++row) {
    double acc = 0;
    for (std::size_t j = 0; j < 5; ++j) acc += s[row * 5 + j];
    CHECK(std::abs(acc - 1.0) <= 1e-12);
  }
}

TEST_CASE("conv2d hand cases") {
  OpAttrs a;
  a.kernel = 1;
  a.stride = 1;
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor unit({1, 1, 1, 1}, {1});
  CHECK(max_abs_diff(conv2d_forward(x, unit, a), x) == 0.0);

  OpAttrs b;
  b.kernel = 2;
  b.stride = 1;
  const Tensor ones({1, 1, 2, 2}, {1, 1, 1, 1});
  const auto summed = conv2d_forward(x, ones, b);
  CHECK(summed.shape() == Shape{1, 1, 1, 1});
  CHECK(summed[0] == 10.0);

  const Tensor zero_k({1, 1, 2, 2}, {0, 0, 0, 0});
  CHECK(sum_all(conv2d_forward(x, zero_k, b)) == 0.0);
}

TEST_CASE("conv2d equals matmul on the unfolded input") {
  // independent route: explicit unfold + plain matrix product
  OpAttrs a;
  a.kernel = 3;
  a.stride = 1;
  a.padding = 1;
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const Tensor x = rand_tensor({1, 2, 4, 4}, seed);
    const Tensor w = rand_tensor({3, 2, 3, 3}, seed + 100);
    const Tensor direct = conv2d_forward(x, w, a);

    const Tensor cols = im2col(x, 3, 1, 1);  // (16, 18)
    Tensor wmat({18, 3});
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t ck = 0; ck < 18; ++ck) wmat[ck * 3 + o] = w[o * 18 + ck];
    const Tensor prod = matmul(cols, wmat);  // (16, 3)
    Tensor rearranged({1, 3, 4, 4});
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t hw = 0; hw < 16; ++hw) rearranged[o * 16 + hw] = prod[hw * 3 + o];
    CHECK(max_abs_diff(direct, rearranged) <= 1e-12);
  }
}

TEST_CASE("maxpool selection and ties") {
  OpAttrs a;
  a.kernel = 2;
  a.stride = 2;
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const auto top = maxpool2d_forward(x, a);
  CHECK(top.values[0] == 4.0);
  CHECK(top.indices[0] == 3);

  // constant input: the winner index is found by an oracle scan for the first
  // strictly-greatest element in row-major order
  const Tensor flat({1, 1, 2, 2}, {7, 7, 7, 7});
  const auto tie = maxpool2d_forward(flat, a);
  std::size_t expect = 0;
  double best = -1e300;
  for (std::size_t i = 0; i < 4; ++i)
    if (flat[i] > best) {
      best = flat[i];
      expect = i;
    }
  CHECK(tie.indices[0] == expect);
  CHECK(expect == 0);

  const Tensor neg({1, 1, 2, 2}, {-3, -1, -2, -4});
  CHECK(maxpool2d_forward(neg, a).values[0] == -1.0);

  OpAttrs wide;
  wide.kernel = 3;
  wide.stride = 1;
  CHECK_THROWS(maxpool2d_forward(x, wide));
}

TEST_CASE("activation kernels against independent formulas") {
  const Tensor x({5}, {-2.0, -0.5, 0.0, 0.7, 3.0});
  const auto g = gelu(x);
  const auto s = silu(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double want_g =
        0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    const double want_s = v / (1.0 + std::exp(-v));
    CHECK(g[i] == doctest::Approx(want_g).epsilon(1e-15));
    CHECK(s[i] == doctest::Approx(want_s).epsilon(1e-15));
  }
}

TEST_CASE("shape kernels") {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  OpAttrs tr;
  const auto xt = forward_eval(OpKind::Transpose, {x}, tr)[0];
  CHECK(xt.shape() == Shape{3, 2});
  CHECK(xt.at({0, 1}) == 4);

  OpAttrs ex;
  ex.sizes = {4, 2, 3};
  const auto xe = forward_eval(OpKind::Expand, {x}, ex)[0];
  CHECK(xe.shape() == Shape{4, 2, 3});
  CHECK(xe.at({3, 1, 2}) == 6);

  OpAttrs sl;
  sl.axis = 1;
  sl.start = 1;
  sl.stop = 3;
  const auto xs = forward_eval(OpKind::Slice, {x}, sl)[0];
  CHECK(xs.shape() == Shape{2, 2});
  CHECK(xs.at({1, 0}) == 5);

  OpAttrs sp;
  sp.axis = 1;
  sp.sizes = {1, 2};
  const auto pieces = forward_eval(OpKind::Split, {x}, sp);
  REQUIRE(pieces.size() == 2);
  CHECK(pieces[0].shape() == Shape{2, 1});
  CHECK(pieces[1].at({0, 1}) == 3);

  const auto stacked = forward_eval(OpKind::Stack, {pieces[0], pieces[0]}, OpAttrs{.axis = 0})[0];
  CHECK(stacked.shape() == Shape{2, 2, 1});
}

TEST_CASE("forward_eval errors name the kind") {
  try {
    forward_eval(OpKind::MatMul, {Tensor({2, 2}), Tensor({3, 3})}, {});
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("MatMul") != std::string::npos);
  }
  CHECK_THROWS(forward_eval(OpKind::Unsupported, {Tensor({1})}, {}));
}

TEST_CASE("float instantiation works") {
  const Tensor32 a({2}, {1.0f, 2.0f});
  const auto out = forward_eval(OpKind::Add, {a, a}, {})[0];
  CHECK(out[1] == 4.0f);
}
