#include <cmath>
#include <unordered_set>

#include <gtest/gtest.h>

#include "orthoplane/grad_check.hpp"
#include "orthoplane/ops.hpp"
#include "orthoplane/rng.hpp"

using namespace orthoplane;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero so relu/clamp kinks are never crossed by
// the finite-difference step.
Tensor off_kink_tensor(Shape shape, Rng& rng) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) {
    x = rng.uniform(0.1, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

// Weighted sum makes every output coordinate matter in the check.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  auto y = ops::softmax(Tensor::from({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Primitives, BackwardOfSumOfSquares) {
  auto x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  ops::sum(ops::mul(x, x)).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Primitives, MatmulOfOnes) {
  auto y = ops::matmul(Tensor::full({2, 3}, 1.0), Tensor::full({3, 2}, 1.0));
  ASSERT_EQ(y.shape(), (Shape{2, 2}));
  for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Primitives, ShapeMismatchNamesOpAndShapes) {
  try {
    ops::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), std::invalid_argument);
  EXPECT_THROW(ops::concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}, 1),
               std::invalid_argument);
}

TEST(Primitives, ScalarBroadcastOnly) {
  auto y = ops::mul(Tensor::scalar(2.0), Tensor::from({3}, {1, 2, 3}));
  EXPECT_DOUBLE_EQ(y[2], 6.0);
  EXPECT_THROW(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
}

TEST(Primitives, ForwardValues) {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto c = ops::concat({x, Tensor::from({2, 1}, {7, 8})}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 4}));
  EXPECT_DOUBLE_EQ(c[3], 7.0);
  EXPECT_DOUBLE_EQ(c[4], 4.0);
  auto s = ops::slice(x, 1, 1, 2);
  EXPECT_EQ(std::vector<Real>(s.data().begin(), s.data().end()), (std::vector<Real>{2, 3, 5, 6}));
  auto g = ops::gather_rows(x, {1, -1, 0});
  EXPECT_EQ(std::vector<Real>(g.data().begin(), g.data().end()),
            (std::vector<Real>{4, 5, 6, 0, 0, 0, 1, 2, 3}));
  auto cs = ops::cumsum_exclusive(x, 1);
  EXPECT_EQ(std::vector<Real>(cs.data().begin(), cs.data().end()),
            (std::vector<Real>{0, 1, 3, 0, 4, 9}));
  auto sa = ops::sum_axis(x, 0);
  EXPECT_EQ(std::vector<Real>(sa.data().begin(), sa.data().end()), (std::vector<Real>{5, 7, 9}));
  EXPECT_DOUBLE_EQ(ops::mean(x).item(), 3.5);
  auto t = ops::transpose(x);
  EXPECT_DOUBLE_EQ(t[1], 4.0);
  EXPECT_NEAR(ops::softplus(Tensor::scalar(-20.0)).item(), std::exp(-20.0), 1e-15);
  EXPECT_NEAR(ops::softplus(Tensor::scalar(30.0)).item(), 30.0, 1e-12);
}

TEST(Primitives, LayerNormZeroMeanUnitVariance) {
  Rng rng(3);
  auto y = ops::layer_norm(random_tensor({4, 6}, rng), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 6; ++i) m += y[r * 6 + i];
    m /= 6;
    for (std::size_t i = 0; i < 6; ++i) v += (y[r * 6 + i] - m) * (y[r * 6 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 6, 1.0, 1e-12);
  }
}

TEST(Primitives, SoftmaxIsADistribution) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 5, 4}, rng, -20.0, 20.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = ops::softmax(x, axis);
      auto totals = ops::sum_axis(y, axis);
      for (auto v : y.data()) EXPECT_GE(v, 0.0);
      for (auto t : totals.data()) EXPECT_NEAR(t, 1.0, 1e-12);
    }
  }
}

// Every primitive against central differences at 64-bit precision.
TEST(GradCheck, EveryPrimitiveBelowThreshold) {
  constexpr double kTol = 1e-6;
  Rng rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto m = random_tensor({4, 2}, rng);
  auto row = random_tensor({4}, rng);
  auto pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  auto kinked = off_kink_tensor({3, 4}, rng);

  struct Case {
    const char* name;
    std::function<Tensor()> f;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases = {
      {"add", [&] { return weighted_sum(ops::add(a, b), 1); }, {a, b}},
      {"sub", [&] { return weighted_sum(ops::sub(a, b), 2); }, {a, b}},
      {"mul", [&] { return weighted_sum(ops::mul(a, b), 3); }, {a, b}},
      {"scalar_mul", [&] { return weighted_sum(ops::mul(ops::slice(row, 0, 0, 1), a), 4); },
       {a, row}},
      {"matmul", [&] { return weighted_sum(ops::matmul(a, m), 5); }, {a, m}},
      {"transpose", [&] { return weighted_sum(ops::transpose(a), 6); }, {a}},
      {"concat", [&] { return weighted_sum(ops::concat({a, b}, 0), 7); }, {a, b}},
      {"exp", [&] { return weighted_sum(ops::exp(a), 8); }, {a}},
      {"log", [&] { return weighted_sum(ops::log(pos), 9); }, {pos}},
      {"softplus", [&] { return weighted_sum(ops::softplus(a), 10); }, {a}},
      {"sigmoid", [&] { return weighted_sum(ops::sigmoid(a), 11); }, {a}},
      {"relu", [&] { return weighted_sum(ops::relu(kinked), 12); }, {kinked}},
      {"clamp", [&] { return weighted_sum(ops::clamp(kinked, -0.05, 0.05), 13); }, {kinked}},
      {"layer_norm", [&] { return weighted_sum(ops::layer_norm(a), 14); }, {a}},
      {"softmax0", [&] { return weighted_sum(ops::softmax(a, 0), 15); }, {a}},
      {"softmax1", [&] { return weighted_sum(ops::softmax(a, 1), 16); }, {a}},
      {"mean", [&] { return ops::mean(ops::mul(a, a)); }, {a}},
      {"sum_axis", [&] { return weighted_sum(ops::sum_axis(a, 1), 17); }, {a}},
      {"slice", [&] { return weighted_sum(ops::slice(a, 1, 1, 2), 18); }, {a}},
      {"gather_rows", [&] { return weighted_sum(ops::gather_rows(a, {2, -1, 0, 2}), 19); }, {a}},
      {"reshape", [&] { return weighted_sum(ops::reshape(a, {2, 6}), 20); }, {a}},
      {"cumsum_exclusive", [&] { return weighted_sum(ops::cumsum_exclusive(a, 1), 21); }, {a}},
      {"add_rowwise", [&] { return weighted_sum(ops::add_rowwise(a, row), 22); }, {a, row}},
      {"mul_rowwise", [&] { return weighted_sum(ops::mul_rowwise(a, row), 23); }, {a, row}},
  };
  for (auto& c : cases) {
    EXPECT_LT(grad_check(c.f, c.params), kTol) << c.name;
  }
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](const Tensor& x) { return ops::sum(ops::mul(x, x)); };
  EXPECT_LT(grad_check(f, Tensor::from({2}, {1.0, 2.0}), 1e-5), 1e-7);
}

TEST(GradCheck, SumOfSoftmaxHasZeroGradient) {
  Rng rng(5);
  auto x = random_tensor({6}, rng, -3, 3).clone(true);
  ops::sum(ops::softmax(x, 0)).backward();
  for (auto g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
  auto f = [](const Tensor& t) { return ops::sum(ops::softmax(t, 0)); };
  EXPECT_LT(grad_check(f, x.detach()), 1e-7);
}

TEST(GradCheck, TwoLayerMlpHead) {
  Rng rng(21);
  auto input = random_tensor({1, 8}, rng);
  auto w1 = random_tensor({8, 16}, rng);
  auto b1 = random_tensor({16}, rng);
  auto w2 = random_tensor({16, 1}, rng);
  auto f = [&] {
    auto h = ops::softplus(ops::add_rowwise(ops::matmul(input, w1), b1));
    return ops::sum(ops::matmul(h, w2));
  };
  EXPECT_LT(grad_check(f, {input, w1, b1, w2}), 1e-6);
}

TEST(GradCheck, RejectsNonScalarOutput) {
  auto f = [](const Tensor& x) { return ops::exp(x); };
  EXPECT_THROW(grad_check(f, Tensor::from({2}, {1.0, 2.0})), std::invalid_argument);
}

TEST(GradCheck, SparseAttentionMultiHead) {
  Rng rng(31);
  auto q = random_tensor({5, 4}, rng);
  auto k = random_tensor({6, 4}, rng);
  auto v = random_tensor({6, 6}, rng);
  ops::KeyIndex index;
  index.push_query({0, 1, 2});
  index.push_query({5});
  index.push_query({3, 4, 5, 0});
  index.push_query({2, 3});
  index.push_query({0, 1, 2, 3, 4, 5});
  auto f = [&] { return weighted_sum(ops::sparse_attention(q, k, v, index, 2), 41); };
  EXPECT_LT(grad_check(f, {q, k, v}), 1e-6);
}

TEST(SparseAttention, FullIndexMatchesDenseComposition) {
  Rng rng(8);
  auto q = random_tensor({4, 3}, rng);
  auto k = random_tensor({5, 3}, rng);
  auto v = random_tensor({5, 2}, rng);
  ops::KeyIndex index;
  for (int n = 0; n < 4; ++n) index.push_query({0, 1, 2, 3, 4});
  auto sparse = ops::sparse_attention(q, k, v, index);
  auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(3.0));
  auto dense = ops::matmul(ops::softmax(scores, 1), v);
  for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(sparse[i], dense[i], 1e-14);
}

TEST(Tape, TopologicalOrderPutsInputsFirst) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = ops::exp(x);
  auto z = ops::add(ops::mul(y, x), y);
  auto order = topological_order(ops::sum(z));
  std::unordered_set<const TensorImpl*> seen;
  for (const auto& t : order) {
    if (t->grad_fn) {
      for (const auto& in : t->grad_fn->inputs) EXPECT_TRUE(seen.count(in.get()));
    }
    EXPECT_TRUE(seen.insert(t.get()).second) << "visited twice";
  }
  EXPECT_EQ(order.size(), 5u);
}

TEST(Tape, SharedSubexpressionAccumulatesOnce) {
  // d/dx (e^x * x + e^x) = e^x (x + 2)
  auto x = Tensor::from({1}, {0.3}, true);
  auto y = ops::exp(x);
  ops::sum(ops::add(ops::mul(y, x), y)).backward();
  EXPECT_NEAR(x.grad()[0], std::exp(0.3) * 2.3, 1e-14);
}

TEST(Tape, IndependentSubgraphsAreLinear) {
  Rng rng(12);
  auto a = random_tensor({3}, rng).clone(true);
  auto b = random_tensor({2, 2}, rng).clone(true);
  auto fa = [&] { return ops::sum(ops::softplus(ops::mul(a, a))); };
  auto fb = [&] { return ops::mean(ops::exp(b)); };

  fa().backward();
  std::vector<Real> ga(a.grad().begin(), a.grad().end());
  a.zero_grad();
  fb().backward();
  std::vector<Real> gb(b.grad().begin(), b.grad().end());
  b.zero_grad();

  ops::add(fa(), fb()).backward();
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(a.grad()[i], ga[i]);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_EQ(b.grad()[i], gb[i]);
}

TEST(Tape, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    auto y = ops::exp(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
  }
  EXPECT_TRUE(ops::exp(x).requires_grad());
}

TEST(Tape, CorruptedAdjointIsDetected) {
  Rng rng(2);
  auto x = random_tensor({4}, rng);
  auto f = [](const Tensor& t) { return ops::sum(ops::sigmoid(t)); };
  EXPECT_LT(grad_check(f, x), 1e-8);
  set_corrupted_adjoint("sigmoid");
  const double err = grad_check(f, x);
  set_corrupted_adjoint("");
  EXPECT_GT(err, 1e-4);
}

TEST(Rng, DeterministicUnderSeed) {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
  Rng c(1);
  double m = 0, v = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double z = c.normal();
    m += z;
    v += z * z;
  }
  EXPECT_NEAR(m / n, 0.0, 0.01);
  EXPECT_NEAR(v / n, 1.0, 0.01);
}
