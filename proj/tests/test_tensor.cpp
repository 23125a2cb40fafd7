#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numeric>

#include "chainrec/rng.hpp"
#include "chainrec/tensor.hpp"

using namespace chainrec;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.5, double hi = 1.5) {
  std::vector<double> v(shape.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), true);
}

// Weighted sum so that every output coordinate gets a distinct upstream grad.
Tensor weighted_sum(Graph& g, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  return g.sum(g.mul(y, Tensor::from(y.shape(), std::move(w))));
}

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(t.at(i) == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul identity and inner product") {
  Graph g;
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  expect_values(g.matmul(eye, m), {1, 2, 3, 4});
  Tensor row = Tensor::matrix(1, 2, {1, 2});
  Tensor col = Tensor::matrix(2, 1, {3, 4});
  Tensor out = g.matmul(row, col);
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out.item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph g;
  Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  Tensor b = Tensor::matrix(2, 3, std::vector<double>(6, 1.0));
  try {
    g.matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("matmul") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(a x I) w.r.t. a is ones, agrees with finite differences") {
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  {
    Graph g;
    g.backward(g.sum(g.matmul(a, eye)));
  }
  for (double v : a.grad()) CHECK(v == 1.0);

  auto report = grad_check([&](Graph& g, const Tensor& x) { return g.sum(g.matmul(x, eye)); }, a);
  CHECK(report.pass);
  for (double v : report.numeric) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("softmax examples") {
  Graph g;
  expect_values(g.softmax(Tensor::vector({0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_values(g.softmax(Tensor::vector({std::log(1.0), std::log(2.0), std::log(3.0)})),
                {1.0 / 6, 2.0 / 6, 3.0 / 6});

  Tensor masked = g.softmax(Tensor::vector({5, 9, 2}), {true, false, true});
  CHECK(masked.at(1) == 0.0);
  const double z = std::exp(5.0) + std::exp(2.0);
  CHECK(masked.at(0) == doctest::Approx(std::exp(5.0) / z));
  CHECK(masked.at(2) == doctest::Approx(std::exp(2.0) / z));
}

TEST_CASE("softmax with every position masked is degenerate") {
  Graph g;
  CHECK_THROWS_AS(g.softmax(Tensor::vector({1, 2}), {false, false}), DegenerateDistributionError);
  CHECK_THROWS_AS(g.log_softmax(Tensor::vector({1, 2}), {false, false}),
                  DegenerateDistributionError);
}

TEST_CASE("softmax is a distribution over unmasked positions (property)") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(9);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-30, 30);
    Mask mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = rng.bernoulli(0.7);
    mask[rng.index(n)] = true;
    Graph g;
    Tensor p = g.softmax(Tensor::vector(v), mask);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p.at(i) >= 0.0);
      if (!mask[i]) CHECK(p.at(i) == 0.0);
      total += p.at(i);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("elementwise examples") {
  Graph g;
  expect_values(g.max_pool_over_time(Tensor::matrix(2, 2, {1, 5, 3, 2})), {3, 5});
  expect_values(g.sigmoid(Tensor::scalar(0.0)), {0.5});
  expect_values(g.concat({Tensor::vector({1, 2}), Tensor::vector({3})}), {1, 2, 3});
  expect_values(g.add(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::vector({10, 20})),
                {11, 22, 13, 24});
  CHECK_THROWS_AS(g.add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
  CHECK_THROWS_AS(g.mul(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
}

TEST_CASE("max pool ties route gradient to the lowest time index") {
  Tensor x = Tensor::matrix(3, 1, {2, 2, 1}, true);
  Graph g;
  g.backward(g.sum(g.max_pool_over_time(x)));
  expect_values(Tensor::vector(x.grad()), {1, 0, 0});
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::vector({1, 2, 3}, true);
  {
    Graph g;
    g.backward(g.sum(x));
  }
  expect_values(Tensor::vector(x.grad()), {1, 1, 1});

  Tensor z = Tensor::vector({0.0}, true);
  Graph g;
  g.backward(g.sum(g.tanh(z)));
  CHECK(z.grad()[0] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss and a second pass") {
  Tensor x = Tensor::vector({1, 2}, true);
  Graph g;
  Tensor y = g.tanh(x);
  CHECK_THROWS_AS(g.backward(y), GraphError);
  Tensor loss = g.sum(y);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), GraphError);
}

TEST_CASE("tensors cannot cross graphs") {
  Tensor x = Tensor::vector({1, 2}, true);
  Graph a, b;
  Tensor y = a.tanh(x);
  CHECK_THROWS_AS(b.tanh(y), GraphError);
}

TEST_CASE("graph records are topologically ordered") {
  Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  Graph g;
  Tensor y = g.sum(g.tanh(g.matmul(x, g.transpose(x))));
  for (std::size_t n = 0; n < g.size(); ++n)
    for (std::size_t in : g.inputs(n)) CHECK(in < n);
  CHECK(g.kind(0) == OpKind::Leaf);
  CHECK(g.kind(g.size() - 1) == OpKind::Sum);
  (void)y;
}

TEST_CASE("grad_check examples") {
  auto squares = [](Graph& g, const Tensor& x) { return g.sum(g.mul(x, x)); };
  auto report = grad_check(squares, Tensor::vector({1, 2, 3}), 1e-6, 1e-5);
  CHECK(report.pass);
  CHECK(report.max_error < 1e-6);
  expect_values(Tensor::vector(report.analytic), {2, 4, 6});

  auto constant = [](Graph& g, const Tensor& x) { return g.affine(g.sum(x), 0.0, 3.0); };
  auto flat = grad_check(constant, Tensor::vector({1, 2}), 1e-6, 1e-5);
  CHECK(flat.pass);

  // Negative control: tanh with a deliberately wrong derivative.
  auto wrong = [](Graph& g, const Tensor& x) {
    return g.sum(g.unary(x, [](double v) { return std::tanh(v); }, [](double) { return 1.0; }));
  };
  auto bad = grad_check(wrong, Tensor::vector({0.5, -1.0}), 1e-6, 1e-5);
  CHECK_FALSE(bad.pass);
}

TEST_CASE("grad_check detects a non-deterministic function") {
  int calls = 0;
  auto drifting = [&calls](Graph& g, const Tensor& x) {
    ++calls;
    return g.affine(g.sum(x), 1.0, calls * 1e-3);
  };
  CHECK_THROWS_AS(grad_check(drifting, Tensor::vector({1.0})), OracleInvalidError);
}

TEST_CASE("every op passes grad_check on 20 seeded random inputs") {
  using Op = std::function<Tensor(Graph&, const Tensor&)>;
  struct Case {
    const char* name;
    Shape shape;
    Op op;
  };
  Rng fixed(99);
  Tensor other = random_tensor(fixed, Shape{3, 4});
  Tensor right = random_tensor(fixed, Shape{4, 2});
  Tensor bias = random_tensor(fixed, Shape{4});
  const std::vector<int> ids = {2, 0, 2, 1};
  Tensor gru_x = random_tensor(fixed, Shape{4, 6});
  Tensor gru_u = random_tensor(fixed, Shape{2, 6});
  Tensor gru_b = random_tensor(fixed, Shape{6});
  const std::vector<Case> cases = {
      {"matmul_left", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.matmul(x, right); }},
      {"matmul_right", Shape{4, 2}, [&](Graph& g, const Tensor& x) { return g.matmul(other, x); }},
      {"matmul_self", Shape{3, 3}, [](Graph& g, const Tensor& x) { return g.matmul(x, x); }},
      {"transpose", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.transpose(x); }},
      {"add", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.add(x, other); }},
      {"add_broadcast", Shape{4}, [&](Graph& g, const Tensor& x) { return g.add(other, x); }},
      {"sub", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.sub(other, x); }},
      {"mul", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.mul(x, g.tanh(x)); }},
      {"affine", Shape{5}, [](Graph& g, const Tensor& x) { return g.affine(x, -2.5, 0.3); }},
      {"tanh", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.tanh(x); }},
      {"sigmoid", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.sigmoid(x); }},
      {"log", Shape{6}, [](Graph& g, const Tensor& x) { return g.log(g.affine(g.mul(x, x), 1.0, 0.5)); }},
      {"clamp", Shape{6}, [](Graph& g, const Tensor& x) { return g.clamp(x, -5.0, 5.0); }},
      {"concat", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.concat({x, g.tanh(other), x}); }},
      {"concat_vec", Shape{4}, [&](Graph& g, const Tensor& x) { return g.concat({bias, x}); }},
      {"gather_rows", Shape{3, 4}, [&](Graph& g, const Tensor& x) { return g.gather_rows(x, ids); }},
      {"row", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.row(x, 1); }},
      {"slice_cols", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.slice_cols(x, 1, 2); }},
      {"stack_rows", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.stack_rows({g.row(x, 2), x}); }},
      {"repeat_rows", Shape{4}, [](Graph& g, const Tensor& x) { return g.repeat_rows(x, 3); }},
      {"reshape", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.reshape(x, Shape{12}); }},
      {"max_pool_over_time", Shape{5, 3}, [](Graph& g, const Tensor& x) { return g.max_pool_over_time(x); }},
      {"softmax", Shape{5}, [](Graph& g, const Tensor& x) { return g.softmax(x); }},
      {"softmax_masked", Shape{5}, [](Graph& g, const Tensor& x) { return g.softmax(x, {true, false, true, true, false}); }},
      {"log_softmax", Shape{5}, [](Graph& g, const Tensor& x) { return g.log_softmax(x, {true, true, false, true, true}); }},
      {"softmax_rows", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.softmax_rows(x); }},
      {"sum", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.sum(g.tanh(x)); }},
      {"mean", Shape{3, 4}, [](Graph& g, const Tensor& x) { return g.mean(g.tanh(x)); }},
      {"pick", Shape{5}, [](Graph& g, const Tensor& x) { return g.pick(g.softmax(x), 3); }},
      {"gru_sequence_gates", Shape{4, 6}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(x, gru_u, gru_b, false); }},
      {"gru_sequence_hidden", Shape{2, 6}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(gru_x, x, gru_b, true); }},
      {"gru_sequence_bias", Shape{6}, [&](Graph& g, const Tensor& x) { return g.gru_sequence(gru_x, gru_u, x, false); }},
      {"normalize", Shape{5}, [](Graph& g, const Tensor& x) { return g.normalize(g.sigmoid(x)); }},
  };
  for (const Case& c : cases) {
    Rng rng(1000);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_tensor(rng, c.shape);
      const std::uint64_t wseed = 7 + trial;
      auto report = grad_check(
          [&](Graph& g, const Tensor& in) { return weighted_sum(g, c.op(g, in), wseed); }, x, 1e-6,
          1e-5);
      INFO("op ", c.name, " trial ", trial, " max error ", report.max_error);
      CHECK(report.pass);
    }
  }
}

TEST_CASE("same inputs give bit-identical outputs across graphs") {
  Rng rng(5);
  Tensor a = random_tensor(rng, Shape{4, 3});
  Tensor b = random_tensor(rng, Shape{3, 4});
  auto run = [&] {
    Graph g;
    Tensor y = g.softmax_rows(g.tanh(g.matmul(a, b)));
    return y.values();
  };
  std::vector<double> first = run(), second = run();
  CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) == 0);
}
