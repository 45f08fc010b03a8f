#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cpvt/tensor.hpp"

using namespace cpvt;

namespace {

// Triple-loop brute-force reference for a single [m,k] x [k,n] product.
Tensor matmul_reference(const Tensor& a, const Tensor& b) {
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor c = Tensor::zeros({M, N});
  for (std::int64_t m = 0; m < M; ++m) {
    for (std::int64_t n = 0; n < N; ++n) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += a.at({m, k}) * b.at({k, n});
      c.at({m, n}) = acc;
    }
  }
  return c;
}

// Pushes every element at least `margin` away from zero, keeping its sign.
// Used so finite differences never straddle the relu kink.
Tensor away_from_zero(Tensor t, double margin) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (std::abs(t[i]) < margin) t[i] += t[i] >= 0.0 ? margin : -margin;
  }
  return t;
}

}  // namespace

TEST_CASE("factories and element access") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.numel() == 6);
  CHECK(z.rank() == 2);
  CHECK(z.at({1, 2}) == 0.0);

  Tensor f = Tensor::full({2, 2}, 1.5);
  CHECK(f[3] == 1.5);

  Tensor d = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(d.at({0, 1}) == 2.0);
  CHECK(d.at({1, 0}) == 3.0);

  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);

  Tensor s = Tensor::scalar(7.0);
  CHECK(s.numel() == 1);
  CHECK(s.rank() == 0);
}

TEST_CASE("tensor ids increase with creation order") {
  Tensor a = Tensor::zeros({1});
  Tensor b = Tensor::zeros({1});
  Tensor c = add(a, b);
  CHECK(a.id() < b.id());
  CHECK(b.id() < c.id());
}

TEST_CASE("f32 precision quantizes storage, f64 does not") {
  Tensor a32 = Tensor::from_data({1}, {0.1}, Precision::f32);
  CHECK(a32[0] == static_cast<double>(static_cast<float>(0.1)));
  CHECK(a32[0] != 0.1);

  Tensor a64 = Tensor::from_data({1}, {0.1});
  CHECK(a64[0] == 0.1);

  // Mixed-precision ops resolve to the wider type.
  Tensor b64 = Tensor::from_data({1}, {0.2});
  CHECK(add(a32, b64).precision() == Precision::f64);
  CHECK(add(a32, a32).precision() == Precision::f32);

  // f32 op outputs stay exactly float-representable.
  Tensor c = mul(a32, a32);
  CHECK(c[0] == static_cast<double>(static_cast<float>(
                    static_cast<float>(0.1) * static_cast<double>(static_cast<float>(0.1)))));
}

TEST_CASE("matmul identity and 1x1") {
  Tensor a = Tensor::from_data({2, 2}, {3, -1, 4, 2});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(eye, a), a) == 0.0);
  CHECK(max_abs_diff(matmul(a, eye), a) == 0.0);

  Tensor one = Tensor::from_data({1, 1}, {1});
  Tensor three = Tensor::from_data({1, 1}, {3});
  CHECK(matmul(one, three)[0] == 3.0);
}

TEST_CASE("matmul matches triple-loop reference") {
  Rng rng(11);
  Tensor a = random_uniform({3, 4}, rng, -2.0, 2.0);
  Tensor b = random_uniform({4, 2}, rng, -2.0, 2.0);
  CHECK(max_abs_diff(matmul(a, b), matmul_reference(a, b)) <= 1e-12);
}

TEST_CASE("matmul batching: elementwise batches and shared rank-2 operand") {
  Rng rng(12);
  Tensor a = random_uniform({2, 3, 4}, rng, -1.0, 1.0);
  Tensor b = random_uniform({2, 4, 5}, rng, -1.0, 1.0);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  for (int i = 0; i < 2; ++i) {
    Tensor ai = Tensor::from_data({3, 4}, std::vector<double>(
        a.data().begin() + i * 12, a.data().begin() + (i + 1) * 12));
    Tensor bi = Tensor::from_data({4, 5}, std::vector<double>(
        b.data().begin() + i * 20, b.data().begin() + (i + 1) * 20));
    Tensor ci = matmul_reference(ai, bi);
    for (std::int64_t j = 0; j < 15; ++j) {
      CHECK(c[i * 15 + j] == doctest::Approx(ci[j]).epsilon(1e-12));
    }
  }

  Tensor shared = random_uniform({4, 5}, rng, -1.0, 1.0);
  Tensor cs = matmul(a, shared);
  REQUIRE(cs.shape() == Shape{2, 3, 5});
  Tensor a0 = Tensor::from_data({3, 4}, std::vector<double>(
      a.data().begin(), a.data().begin() + 12));
  CHECK(max_abs_diff(Tensor::from_data({3, 5}, std::vector<double>(
                          cs.data().begin(), cs.data().begin() + 15)),
                     matmul_reference(a0, shared)) <= 1e-12);

  Tensor shared_a = random_uniform({3, 4}, rng, -1.0, 1.0);
  CHECK(matmul(shared_a, b).shape() == Shape{2, 3, 5});
}

TEST_CASE("matmul shape errors carry both shapes") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[3, 4]") != std::string::npos);
    CHECK(msg.find("[5, 2]") != std::string::npos);
  }
  Tensor c = Tensor::zeros({2, 3, 4});
  Tensor d = Tensor::zeros({3, 4, 5});
  CHECK_THROWS_AS(matmul(c, d), ShapeError);
}

TEST_CASE("softmax: symmetry, overflow safety, normalization, shift invariance") {
  Tensor u = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Tensor big = softmax(Tensor::from_data({3}, {1000, 0, 0}), 0);
  CHECK(all_finite(big));
  CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big[1] == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(21);
  Tensor x = random_uniform({4, 7}, rng, -3.0, 3.0);
  Tensor y = softmax(x, 1);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) {
      const double v = y.at({r, c});
      CHECK(v > 0.0);
      CHECK(v <= 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  Tensor shifted = softmax(add(x, Tensor::full({4, 7}, 5.25)), 1);
  CHECK(max_abs_diff(y, shifted) <= 1e-12);

  // negative axis addresses the same dimension
  CHECK(max_abs_diff(softmax(x, -1), y) == 0.0);
}

TEST_CASE("backward basics: square, bilinear, accumulation on reuse") {
  {
    Tape tape;
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
  }
  {
    Tape tape;
    Tensor a = Tensor::from_data({3}, {1, 2, 3}).set_requires_grad(true);
    Tensor b = Tensor::from_data({3}, {4, 5, 6});
    Tensor y = sum(mul(a, b));
    tape.backward(y);
    for (int i = 0; i < 3; ++i) CHECK(a.grad()[i] == b[i]);
  }
  {
    // x feeds two consumers; grads must accumulate, and each tape entry must
    // run exactly once: d/dx sum((x+x)*(x+x)) = 8x.
    Tape tape;
    Tensor x = Tensor::from_data({2}, {1.5, -2.0}).set_requires_grad(true);
    Tensor u = add(x, x);
    Tensor y = sum(mul(u, u));
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(8 * 1.5).epsilon(1e-14));
    CHECK(x.grad()[1] == doctest::Approx(8 * -2.0).epsilon(1e-14));
  }
}

TEST_CASE("backward rejects non-scalar root") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("NoGradGuard suspends recording") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  {
    NoGradGuard ng;
    Tensor y = add(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
  Tensor y = add(x, x);
  CHECK(y.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("ops without a tape record nothing") {
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tensor y = add(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check: identity sits at the rounding floor") {
  Rng rng(31);
  Tensor x = random_uniform({3, 3}, rng, -1.0, 1.0);
  double err = grad_check([](const Tensor& t) { return add(t, Tensor::zeros(t.shape())); }, x, 1e-5);
  CHECK(err <= 1e-9);
}

TEST_CASE("grad_check flags nondeterministic functions") {
  Rng rng(32);
  Tensor x = random_uniform({2, 2}, rng, -1.0, 1.0);
  int calls = 0;
  auto flaky = [&calls](const Tensor& t) {
    ++calls;
    return scale(t, calls == 1 ? 1.0 : 1.0 + 1e-12);
  };
  CHECK_THROWS_AS(grad_check(flaky, x, 1e-5), DeterminismError);
}

TEST_CASE("grad_check: every op on at least three shapes") {
  const double tol = 1e-4;
  const double eps = 1e-5;
  const std::vector<Shape> shapes = {{4}, {3, 5}, {2, 3, 4}};
  Rng rng(33);

  for (const Shape& s : shapes) {
    Tensor x = random_uniform(s, rng, -1.5, 1.5);
    Tensor other = random_uniform(s, rng, -1.5, 1.5);

    CHECK(grad_check([&](const Tensor& t) { return add(t, other); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return sub(other, t); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return mul(t, other); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return scale(t, -0.37); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return gelu(t); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return softmax(t, -1); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return sum(t); }, x, eps) <= tol);

    Tensor xr = away_from_zero(x.clone(), 0.1);
    CHECK(grad_check([&](const Tensor& t) { return relu(t); }, xr, eps) <= tol);

    Shape flat = {x.numel()};
    CHECK(grad_check([&](const Tensor& t) { return reshape(t, flat); }, x, eps) <= tol);

    std::vector<int> perm(s.size());
    for (size_t i = 0; i < s.size(); ++i) perm[i] = static_cast<int>(s.size() - 1 - i);
    CHECK(grad_check([&](const Tensor& t) { return permute(t, perm); }, x, eps) <= tol);

    CHECK(grad_check([&](const Tensor& t) { return slice_axis(t, 0, 1, s[0] - 1); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return concat_axis(t, other, 0); }, x, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return concat_axis(other, t, 0); }, x, eps) <= tol);
  }

  // matmul, both operands, three shape families including batched/shared
  {
    Tensor a = random_uniform({3, 4}, rng, -1.0, 1.0);
    Tensor b = random_uniform({4, 2}, rng, -1.0, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return matmul(t, b); }, a, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return matmul(a, t); }, b, eps) <= tol);
  }
  {
    Tensor a = random_uniform({2, 3, 4}, rng, -1.0, 1.0);
    Tensor b = random_uniform({2, 4, 5}, rng, -1.0, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return matmul(t, b); }, a, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return matmul(a, t); }, b, eps) <= tol);
  }
  {
    Tensor a = random_uniform({2, 3, 4}, rng, -1.0, 1.0);
    Tensor b = random_uniform({4, 5}, rng, -1.0, 1.0);  // shared across batch
    CHECK(grad_check([&](const Tensor& t) { return matmul(t, b); }, a, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return matmul(a, t); }, b, eps) <= tol);
  }

  // add_bcast, suffix operand of each rank
  {
    Tensor a = random_uniform({2, 3, 4}, rng, -1.0, 1.0);
    Tensor b1 = random_uniform({4}, rng, -1.0, 1.0);
    Tensor b2 = random_uniform({3, 4}, rng, -1.0, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return add_bcast(t, b1); }, a, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return add_bcast(a, t); }, b1, eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return add_bcast(a, t); }, b2, eps) <= tol);
  }
}

TEST_CASE("grad_check: softmax meets the tight tolerance") {
  Rng rng(34);
  Tensor x = random_uniform({5, 6}, rng, -2.0, 2.0);
  CHECK(grad_check([](const Tensor& t) { return softmax(t, 1); }, x, 1e-5) <= 1e-6);
}

TEST_CASE("composite graph gradient matches finite differences") {
  Rng rng(35);
  Tensor w1 = random_uniform({6, 8}, rng, -0.5, 0.5);
  Tensor w2 = random_uniform({8, 6}, rng, -0.5, 0.5);
  Tensor x = random_uniform({2, 4, 6}, rng, -1.0, 1.0);
  auto f = [&](const Tensor& t) {
    Tensor h = gelu(matmul(t, w1));
    Tensor o = matmul(h, w2);
    return softmax(o, -1);
  };
  CHECK(grad_check(f, x, 1e-5) <= 1e-4);
}

TEST_CASE("reshape and permute round-trip bitwise") {
  Rng rng(41);
  Tensor x = random_uniform({2, 3, 4}, rng, -1.0, 1.0);
  Tensor r = reshape(reshape(x, {4, 3, 2}), {2, 3, 4});
  CHECK(bitwise_equal(x, r));

  Tensor p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK(bitwise_equal(x, p));

  Tensor t2 = permute(permute(x, {0, 2, 1}), {0, 2, 1});
  CHECK(bitwise_equal(x, t2));
}

TEST_CASE("permute moves elements correctly") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = permute(x, {1, 0});
  REQUIRE(t.shape() == Shape{3, 2});
  CHECK(t.at({0, 0}) == 1.0);
  CHECK(t.at({0, 1}) == 4.0);
  CHECK(t.at({2, 0}) == 3.0);
  CHECK(t.at({2, 1}) == 6.0);
}

TEST_CASE("slice and concat invert each other bitwise") {
  Rng rng(42);
  Tensor x = random_uniform({3, 5, 2}, rng, -1.0, 1.0);
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t L = x.dim(axis);
    Tensor head = slice_axis(x, axis, 0, 2);
    Tensor tail = slice_axis(x, axis, 2, L - 2);
    CHECK(bitwise_equal(concat_axis(head, tail, axis), x));
  }
  CHECK_THROWS_AS(slice_axis(x, 1, 4, 3), ContractError);
  CHECK_THROWS_AS(concat_axis(x, Tensor::zeros({3, 5, 3}), 1), ShapeError);
}

TEST_CASE("forward passes are deterministic for the same seed") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = random_uniform({4, 6}, rng, -1.0, 1.0);
    Tensor b = random_normal({6, 4}, rng, 0.5);
    return softmax(matmul(gelu(a), b), -1);
  };
  CHECK(bitwise_equal(run(9), run(9)));
  CHECK_FALSE(bitwise_equal(run(9), run(10)));
}

TEST_CASE("finite inputs stay finite through forward ops") {
  Rng rng(43);
  Tensor a = random_uniform({3, 16}, rng, -50.0, 50.0);
  Tensor w = random_uniform({16, 16}, rng, -2.0, 2.0);
  Tensor y = softmax(matmul(relu(a), w), -1);
  CHECK(all_finite(y));
  CHECK(all_finite(gelu(a)));
}

TEST_CASE("rng: named streams, bounds, permutations, truncation") {
  Rng root(1234);
  Rng s1 = root.stream("weights");
  Rng s2 = root.stream("data");
  CHECK(s1.next_u64() != s2.next_u64());

  // identical stream construction replays identically
  Rng t1 = root.stream("weights");
  CHECK(root.stream("weights").next_u64() == t1.next_u64());

  Rng u = root.stream("u");
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform(-2.0, 3.0);
    CHECK(v >= -2.0);
    CHECK(v < 3.0);
  }
  for (int i = 0; i < 1000; ++i) CHECK(u.below(17) < 17);

  Rng p = root.stream("perm");
  auto perm = p.permutation(25);
  std::vector<bool> seen(25, false);
  for (int v : perm) {
    REQUIRE(v >= 0);
    REQUIRE(v < 25);
    CHECK_FALSE(seen[static_cast<size_t>(v)]);
    seen[static_cast<size_t>(v)] = true;
  }

  Rng tn = root.stream("tn");
  for (int i = 0; i < 2000; ++i) {
    CHECK(std::abs(tn.trunc_normal(0.02)) <= 2.0 * 0.02 + 1e-15);
  }
}

TEST_CASE("clone and detached_copy do not share storage or history") {
  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tensor y = add(x, x);
  Tensor c = y.clone();
  c[0] = 99;
  CHECK(y[0] == 2.0);
  CHECK_FALSE(c.requires_grad());
  Tensor d = y.detached_copy(true);
  CHECK(d.requires_grad());
  CHECK(bitwise_equal(d, y));
}
