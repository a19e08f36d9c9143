#include <doctest.h>

#include <cmath>

#include "oplrp/forward_ops.hpp"
#include "oplrp/model_zoo.hpp"
#include "oplrp/rules.hpp"

using namespace oplrp;

namespace {

Tensor rand_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  ZooRng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gauss() * scale;
  return t;
}

}  // namespace

TEST_CASE("epsilon rule hand values") {
  // x=(1,2), W=((1),(-1)) -> z=-1, R=1: shares are -1 and 2, summing to 1
  const Tensor x({2}, {1, 2});
  const Tensor W({2, 1}, {1, -1});
  const Tensor z({1}, {-1});
  const Tensor R({1}, {1});
  const auto r = epsilon_rule(x, W, z, R, 0.0);
  CHECK(r[0] == doctest::Approx(-1.0));
  CHECK(r[1] == doctest::Approx(2.0));
  CHECK(sum_all(r) == doctest::Approx(1.0));

  const auto zero = epsilon_rule(x, W, z, Tensor({1}, {0}), 0.0);
  CHECK(sum_all(abs(zero)) == 0.0);

  const Tensor x2({2}, {1, 0});
  const Tensor W2({2, 1}, {1, 1});
  const auto r2 = epsilon_rule(x2, W2, Tensor({1}, {1}), Tensor({1}, {5}), 0.0);
  CHECK(r2[0] == doctest::Approx(5.0));
  CHECK(r2[1] == 0.0);
}

TEST_CASE("epsilon rule is linear in the relevance") {
  const Tensor x = rand_tensor({3}, 1);
  const Tensor W = rand_tensor({3, 4}, 2);
  const Tensor z = matmul(reshape(x, {1, 3}), W);
  const Tensor R = rand_tensor({1, 4}, 3);
  const double alpha = 2.625;
  const auto a = epsilon_rule(reshape(x, {1, 3}), W, z, scale(R, alpha), 1e-9);
  const auto b = scale(epsilon_rule(reshape(x, {1, 3}), W, z, R, 1e-9), alpha);
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("gamma rule hand value and reductions") {
  const Tensor x({2}, {1, 1});
  const Tensor W({2, 1}, {2, -1});
  const Tensor R({1}, {1});
  const auto r = gamma_rule(x, W, R, 1.0, 0.0);
  CHECK(r[0] == doctest::Approx(4.0 / 3.0));
  CHECK(r[1] == doctest::Approx(-1.0 / 3.0));

  // gamma=0 reduces to the epsilon rule
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor xs = rand_tensor({1, 5}, 100 + s);
    const Tensor Ws = rand_tensor({5, 3}, 200 + s);
    const Tensor Rs = rand_tensor({1, 3}, 300 + s);
    const Tensor zs = matmul(xs, Ws);
    CHECK(max_abs_diff(gamma_rule(xs, Ws, Rs, 0.0, 0.0), epsilon_rule(xs, Ws, zs, Rs, 0.0)) <=
          1e-12);
  }

  // all-negative weights leave nothing to boost
  const Tensor Wneg({2, 2}, {-1, -2, -3, -4});
  const Tensor xr = rand_tensor({1, 2}, 5);
  const Tensor Rr = rand_tensor({1, 2}, 6);
  CHECK(max_abs_diff(gamma_rule(xr, Wneg, Rr, 3.0, 1e-9), gamma_rule(xr, Wneg, Rr, 0.0, 1e-9)) <=
        1e-12);
}

TEST_CASE("gamma rule with bias conserves into the bias share") {
  const Tensor x = rand_tensor({2, 4}, 10);
  const Tensor W = rand_tensor({4, 3}, 11);
  const Tensor b = rand_tensor({3}, 12);
  const Tensor R = rand_tensor({2, 3}, 13);
  Tensor share;
  const auto rx = gamma_rule(x, W, R, 0.7, 1e-9, &b, &share);
  CHECK(sum_all(rx) + sum_all(share) == doctest::Approx(sum_all(R)).epsilon(1e-6));
}

TEST_CASE("abs ratio rule") {
  const auto shares =
      abs_ratio_rule(std::vector<Tensor>{Tensor::scalar(1.0), Tensor::scalar(-3.0)},
                     Tensor::scalar(4.0));
  CHECK(shares[0][0] == doctest::Approx(1.0));
  CHECK(shares[1][0] == doctest::Approx(3.0));

  const Tensor a = rand_tensor({4}, 21);
  const auto equal = abs_ratio_rule(std::vector<Tensor>{a, a}, Tensor({4}, {2, 2, 2, 2}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(equal[0][i] == doctest::Approx(1.0));

  // degenerate all-zero operands fall back to a uniform, conserving split
  const auto uniform = abs_ratio_rule(
      std::vector<Tensor>{Tensor::zeros({2}), Tensor::zeros({2})}, Tensor({2}, {1, 1}));
  CHECK(uniform[0][0] == doctest::Approx(0.5));
  CHECK(uniform[1][1] == doctest::Approx(0.5));
  CHECK(sum_all(uniform[0]) + sum_all(uniform[1]) == doctest::Approx(2.0));
}

TEST_CASE("abs ratio conserves exactly under broadcasting") {
  const Tensor a = rand_tensor({3, 4}, 31);
  const Tensor b = rand_tensor({4}, 32);  // broadcast over rows
  const Tensor R = rand_tensor({3, 4}, 33);
  const auto shares = abs_ratio_rule(std::vector<Tensor>{a, b}, R);
  CHECK(shares[0].shape() == Shape{3, 4});
  CHECK(shares[1].shape() == Shape{4});
  CHECK(sum_all(shares[0]) + sum_all(shares[1]) ==
        doctest::Approx(sum_all(R)).epsilon(1e-12));
}

TEST_CASE("bilinear rule") {
  // identity attention: half the relevance stays with the mixing weights
  const Tensor A({2, 2}, {1, 0, 0, 1});
  const Tensor V = rand_tensor({2, 3}, 41);
  const Tensor O = matmul(A, V);
  const Tensor R = rand_tensor({2, 3}, 42);
  auto [RA, RV] = bilinear_rule(A, V, O, R, 0.0);
  CHECK(sum_all(RA) == doctest::Approx(sum_all(R) / 2.0).epsilon(1e-12));
  CHECK(max_abs_diff(RV, scale(R, 0.5)) <= 1e-12);

  auto [zA, zV] = bilinear_rule(A, V, O, Tensor::zeros({2, 3}), 0.0);
  CHECK(sum_all(abs(zA)) == 0.0);
  CHECK(sum_all(abs(zV)) == 0.0);

  const Tensor a1({1, 1}, {2});
  const Tensor v1({1, 1}, {3});
  auto [ra, rv] = bilinear_rule(a1, v1, Tensor({1, 1}, {6}), Tensor({1, 1}, {1}), 0.0);
  CHECK(ra[0] == doctest::Approx(0.5));
  CHECK(rv[0] == doctest::Approx(0.5));
}

TEST_CASE("bilinear conservation as eps goes to zero") {
  const Tensor A = rand_tensor({3, 5}, 51);
  const Tensor V = rand_tensor({5, 4}, 52);
  const Tensor O = matmul(A, V);
  const Tensor R = rand_tensor({3, 4}, 53);
  auto [RA, RV] = bilinear_rule(A, V, O, R, 0.0);
  CHECK(sum_all(RA) + sum_all(RV) == doctest::Approx(sum_all(R)).epsilon(1e-9));
}

TEST_CASE("softmax rule") {
  const Tensor zero_x = Tensor::zeros({3});
  const auto r0 = softmax_rule(zero_x, softmax_forward(zero_x, -1), rand_tensor({3}, 61), -1);
  CHECK(sum_all(abs(r0)) == 0.0);

  const Tensor x({2}, {1, -1});
  const Tensor s = softmax_forward(x, -1);
  const auto r = softmax_rule(x, s, Tensor({2}, {1, 0}), -1);
  CHECK(r[0] == doctest::Approx(0.1192).epsilon(1e-3));
  CHECK(r[1] == doctest::Approx(0.1192).epsilon(1e-3));

  const Tensor single({1}, {3.0});
  const auto r1 = softmax_rule(single, softmax_forward(single, -1), Tensor({1}, {2.5}), -1);
  CHECK(r1[0] == doctest::Approx(0.0));
}

TEST_CASE("softmax rule literal formula per element") {
  const Tensor x = rand_tensor({2, 4}, 71);
  const Tensor s = softmax_forward(x, -1);
  const Tensor R = rand_tensor({2, 4}, 72);
  const auto r = softmax_rule(x, s, R, -1);
  for (std::size_t row = 0; row < 2; ++row) {
    double total = 0;
    for (std::size_t j = 0; j < 4; ++j) total += R[row * 4 + j];
    for (std::size_t j = 0; j < 4; ++j) {
      const double want = x[row * 4 + j] * (R[row * 4 + j] - s[row * 4 + j] * total);
      CHECK(r[row * 4 + j] == doctest::Approx(want).epsilon(1e-15));
    }
  }
}

TEST_CASE("gradient routing preserves totals exactly") {
  const Tensor R = rand_tensor({3, 4}, 81);

  const auto tr = gradient_route_rule(OpKind::Transpose, {Shape{4, 3}}, {}, R);
  CHECK(tr[0].shape() == Shape{4, 3});
  CHECK(tr[0].at({1, 2}) == R.at({2, 1}));

  OpAttrs ex;
  ex.sizes = {3, 4};
  const auto back = gradient_route_rule(OpKind::Expand, {Shape{4}}, ex, R);
  CHECK(back[0].shape() == Shape{4});
  CHECK(sum_all(back[0]) == doctest::Approx(sum_all(R)).epsilon(1e-15));

  OpAttrs sl;
  sl.axis = 0;
  sl.start = 1;
  sl.stop = 2;
  const Tensor Rs = rand_tensor({1, 4}, 82);
  const auto scat = gradient_route_rule(OpKind::Slice, {Shape{3, 4}}, sl, Rs);
  CHECK(scat[0].shape() == Shape{3, 4});
  CHECK(scat[0].at({1, 2}) == Rs.at({0, 2}));
  CHECK(scat[0].at({0, 2}) == 0.0);
  CHECK(sum_all(scat[0]) == doctest::Approx(sum_all(Rs)).epsilon(1e-15));

  OpAttrs cat;
  cat.axis = 1;
  const auto parts = gradient_route_rule(OpKind::Cat, {Shape{3, 1}, Shape{3, 3}}, cat, R);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].shape() == Shape{3, 1});
  CHECK(parts[1].shape() == Shape{3, 3});
  CHECK(sum_all(parts[0]) + sum_all(parts[1]) == doctest::Approx(sum_all(R)).epsilon(1e-15));
}

TEST_CASE("maxpool routing") {
  const auto single = maxpool_route({2}, Tensor({1}, {5.0}), {4});
  CHECK(single[2] == 5.0);
  CHECK(sum_all(single) == 5.0);

  const auto two = maxpool_route({0, 3}, Tensor({2}, {1.0, 2.0}), {4});
  CHECK(two[0] == 1.0);
  CHECK(two[3] == 2.0);

  OpAttrs a;
  a.kernel = 2;
  a.stride = 2;
  const Tensor x = rand_tensor({1, 1, 4, 4}, 91);
  const auto pooled = maxpool2d_forward(x, a);
  const Tensor R = rand_tensor({1, 1, 2, 2}, 92);
  const auto routed = maxpool_route(pooled.indices, R, x.shape());
  CHECK(sum_all(routed) == doctest::Approx(sum_all(R)).epsilon(1e-15));

  CHECK_THROWS(maxpool_route({9}, Tensor({1}, {1.0}), {4}));
}

TEST_CASE("layernorm rule") {
  // zero-mean unit-variance rows with a unit affine pass relevance through
  const Tensor x({1, 2}, {1, -1});
  LayerNormStats stats;
  const Tensor g({2}, {1, 1});
  const Tensor b = Tensor::zeros({2});
  layernorm_forward(x, g, b, 1e-5, &stats);
  const Tensor mean({1}, {stats.mean[0]});
  const Tensor rstd({1}, {stats.rstd[0]});
  const Tensor R({1, 2}, {0.3, 0.7});
  Tensor share;
  const auto r = layernorm_rule(x, mean, rstd, g, b, R, 1e-9, &share);
  CHECK(max_abs_diff(r, R) <= 1e-6);

  const auto rz = layernorm_rule(x, mean, rstd, g, b, Tensor::zeros({1, 2}), 1e-9, static_cast<Tensor*>(nullptr));
  CHECK(sum_all(abs(rz)) == 0.0);
}

TEST_CASE("layernorm rule conserves under detached statistics") {
  const Tensor x = rand_tensor({3, 6}, 93);
  const Tensor g = rand_tensor({6}, 94, 0.3);
  const Tensor b = rand_tensor({6}, 95, 0.2);
  LayerNormStats stats;
  layernorm_forward(x, g, b, 1e-5, &stats);
  Tensor mean({3}), rstd({3});
  for (int i = 0; i < 3; ++i) {
    mean[i] = stats.mean[i];
    rstd[i] = stats.rstd[i];
  }
  const Tensor R = rand_tensor({3, 6}, 96);
  Tensor share;
  // eps = 0 makes the split exact; the stabilizer only perturbs near-zero rows
  const auto exact = layernorm_rule(x, mean, rstd, g, b, R, 0.0, &share);
  CHECK(sum_all(exact) + sum_all(share) == doctest::Approx(sum_all(R)).epsilon(1e-12));
  Tensor share2;
  const auto stabilized = layernorm_rule(x, mean, rstd, g, b, R, 1e-9, &share2);
  CHECK(sum_all(stabilized) + sum_all(share2) ==
        doctest::Approx(sum_all(R)).epsilon(1e-6));
}

TEST_CASE("identity rule is the identity") {
  const Tensor R = rand_tensor({7}, 97);
  CHECK(max_abs_diff(identity_rule(R), R) == 0.0);
  CHECK(sum_all(abs(identity_rule(Tensor::zeros({3})))) == 0.0);
}

TEST_CASE("rule config validation") {
  RuleConfig bad;
  bad.epsilon = 0.0;
  CHECK_THROWS(bad.validate());
  bad.epsilon = 1e-9;
  bad.gamma_linear = -1.0;
  CHECK_THROWS(bad.validate());
}
