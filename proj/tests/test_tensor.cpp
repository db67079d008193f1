#include <gtest/gtest.h>

#include "support.hpp"

using namespace aird;
using namespace aird::test;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(Tensor, ReshapeKeepsData) {
  const Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.reshaped({3, 2}).storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, CheckBarrierCatchesNonFinite) {
  Tensor t = Tensor::vector({1.0, std::nan("")});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.check_finite("t"), NumericError);
  Tensor u = Tensor::vector({1.0});
  u.accumulate_grad(std::vector<double>{INFINITY});
  EXPECT_THROW(u.check_finite("u"), NumericError);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Graph g;
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(g.constant(Tensor::eye(2)), g.constant(m)).value(), m);
  EXPECT_EQ(matmul(g.constant(m), g.constant(Tensor::matrix({{0}, {1}}))).value(), Tensor::matrix({{2}, {4}}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3})));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(11);
  const double err = grad_check([](Graph&, const std::vector<Var>& v) { return sum(matmul(v[0], v[1])); },
                                {uniform_tensor(rng, {3, 4}), uniform_tensor(rng, {4, 2})}, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(Elementwise, Examples) {
  Graph g;
  EXPECT_EQ(relu(g.constant(Tensor::vector({-1, 0, 2}))).value(), Tensor::vector({0, 0, 2}));
  EXPECT_EQ(sigmoid(g.constant(Tensor::vector({0}))).item(), 0.5);
  Rng rng(3);
  const double err = grad_check([](Graph&, const std::vector<Var>& v) { return sum(exp(v[0])); },
                                {Tensor::vector({0.1, -0.3})}, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(Elementwise, BroadcastFailureIsDimensionError) {
  Graph g;
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({2}))), DimensionError);
  EXPECT_NO_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({3}))));
  EXPECT_NO_THROW(mul(g.constant(Tensor({2, 3})), g.constant(Tensor({1}))));
}

TEST(Elementwise, LogDomain) {
  Graph g;
  EXPECT_THROW(log(g.constant(Tensor::vector({-0.5}))), NumericError);
  EXPECT_THROW(log(g.constant(Tensor::vector({std::nan("")}))), NumericError);
  // Zero is raised to the floor rather than producing -inf.
  EXPECT_DOUBLE_EQ(log(g.constant(Tensor::vector({0.0}))).item(), std::log(kLogFloor));
}

TEST(Softmax, UniformAndStable) {
  Graph g;
  const Tensor u = softmax(g.constant(Tensor::matrix({{0, 0, 0}}))).value();
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor s = softmax(g.constant(Tensor::matrix({{1000, 0}}))).value();
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-15);
  EXPECT_NEAR(s[1], 0.0, 1e-15);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    const Tensor z = uniform_tensor(rng, {between(rng, 1, 5), between(rng, 1, 8)}, -50, 50);
    const Tensor p = softmax(g.constant(z)).value();
    const std::size_t c = z.dim(1);
    for (std::size_t i = 0; i < z.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(p[i * c + j], 0.0);
        s += p[i * c + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, JacobianVectorProduct) {
  Rng rng(8);
  const double err = grad_check([](Graph&, const std::vector<Var>& v) { return softmax(v[0]); },
                                {uniform_tensor(rng, {1, 4}, -2, 2)}, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(Reduce, Examples) {
  Graph g;
  EXPECT_DOUBLE_EQ(mean(g.constant(Tensor::vector({1, 2, 3}))).item(), 2.0);
  EXPECT_EQ(reduce(ReduceOp::sum, g.constant(Tensor::matrix({{1, 2}, {3, 4}})), 0).value(), Tensor::vector({4, 6}));
  EXPECT_THROW(reduce(ReduceOp::sum, g.constant(Tensor({2, 2})), 2), DimensionError);

  Var x = g.variable(Tensor::vector({5, 1, 7, 3}));
  g.backward(mean(x));
  for (double v : g.grad(x)) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Reduce, MaxTiesRouteToLowestIndex) {
  Graph g;
  Var x = g.variable(Tensor::matrix({{2, 5, 5}, {1, 1, 0}}));
  g.backward(sum(reduce(ReduceOp::max, x, 1)));
  const std::vector<double> expected{0, 1, 0, 1, 0, 0};
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), g.grad(x).begin()));
}

TEST(Backward, Examples) {
  Graph g;
  Var x = g.variable(Tensor::vector({1, 2, 3}));
  g.backward(sum(x));
  for (double v : g.grad(x)) EXPECT_EQ(v, 1.0);

  Graph h;
  Var y = h.variable(Tensor::vector({1, 2}));
  h.backward(sum(mul(y, y)));
  EXPECT_EQ(h.grad(y)[0], 2.0);
  EXPECT_EQ(h.grad(y)[1], 4.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph g;
  Var x = g.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(x), ContractError);
  Graph other;
  EXPECT_THROW(other.backward(sum(x)), ContractError);
}

TEST(Backward, UnreachableGradsUntouched) {
  Graph g;
  Var x = g.variable(Tensor::vector({1, 2}));
  Var unused = g.variable(Tensor::vector({3}));
  g.backward(sum(x));
  EXPECT_TRUE(g.grad(unused).empty());

  Tensor p = Tensor::vector({1, 2});
  p.set_requires_grad();
  Tensor q = Tensor::vector({4});
  q.set_requires_grad();
  Graph h;
  Var pv = h.param(p);
  h.param(q);
  h.backward(sum(pv));
  EXPECT_TRUE(p.has_grad());
  EXPECT_FALSE(q.has_grad());
}

TEST(Backward, DoubleUseAccumulatesBothPaths) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = uniform_tensor(rng, {3, 2}), w1 = uniform_tensor(rng, {2, 2}), w2 = uniform_tensor(rng, {2, 2});
    // x feeds two branches; compare with two independent copies of x.
    Graph g;
    Var x = g.variable(a);
    g.backward(add(sum(exp(matmul(x, g.constant(w1)))), sum(sigmoid(matmul(x, g.constant(w2))))));
    Graph h;
    Var x1 = h.variable(a), x2 = h.variable(a);
    h.backward(add(sum(exp(matmul(x1, h.constant(w1)))), sum(sigmoid(matmul(x2, h.constant(w2))))));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(g.grad(x)[i], h.grad(x1)[i] + h.grad(x2)[i]);
  }
}

TEST(Backward, Deterministic) {
  Rng rng(4);
  const Tensor a = normal_tensor(rng, {4, 3}), b = normal_tensor(rng, {3, 5});
  auto run = [&] {
    Graph g;
    Var x = g.variable(a), y = g.variable(b);
    g.backward(sum(log_softmax(matmul(x, y))));
    return std::pair{std::vector<double>(g.grad(x).begin(), g.grad(x).end()),
                     std::vector<double>(g.grad(y).begin(), g.grad(y).end())};
  };
  EXPECT_EQ(run(), run());
}

TEST(Geometry, L2NormalizeRejectsZeroRowsWhenStrict) {
  Graph g;
  EXPECT_THROW(l2_normalize_rows(g.constant(Tensor({2, 3}))), NumericError);
  EXPECT_TRUE(l2_normalize_rows(g.constant(Tensor({2, 3})), false).value().all_finite());
}

TEST(Conv, GeometryErrors) {
  EXPECT_THROW(conv_geometry({1, 1, 5, 5}, 2, 2, 0), DimensionError);
  EXPECT_THROW(conv_geometry({1, 5, 5}, 3, 1, 1), DimensionError);
  EXPECT_NO_THROW(conv_geometry({1, 1, 5, 5}, 3, 2, 0));
}
