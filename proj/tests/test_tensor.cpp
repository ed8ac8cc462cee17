// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "xlnet/autodiff.hpp"
#include "xlnet/checks.hpp"
#include "xlnet/gradcheck.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {
namespace {

Tensor make(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_EQ(t.reshaped({4, 6}).shape(), (Shape{4, 6}));
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
}

TEST(Softmax, UniformLogits) {
  Graph g;
  const Tensor p = softmax(g.constant(make({3}, {0, 0, 0}))).value();
  for (double x : p.data()) EXPECT_DOUBLE_EQ(x, 1.0 / 3.0);
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreExactlyZero) {
  Rng rng(3);
  Graph g;
  BoolMatrix mask(4, 6, true);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) mask.set(r, c, (r + 2 * c) % 3 != 0);
  const Tensor p = masked_softmax(g.constant(random_tensor({2, 4, 6}, rng, 5.0)), mask).value();
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) {
        if (!mask(r, c)) {
          EXPECT_EQ(p.at(h, r, c), 0.0);
        }
        s += p.at(h, r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, FullyMaskedRowIsAnError) {
  Graph g;
  BoolMatrix mask(2, 3, true);
  for (std::size_t c = 0; c < 3; ++c) mask.set(1, c, false);
  EXPECT_THROW(masked_softmax(g.constant(Tensor({2, 3})), mask), MaskError);
  const Tensor p = masked_softmax(g.constant(Tensor({2, 3})), mask, EmptyRows::kZero).value();
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.at(1, c), 0.0);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(5);
  Graph g;
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  const Tensor x = random_tensor({3, 4}, rng);
  EXPECT_TRUE(same_values(matmul(g.constant(eye), g.constant(x)).value(), x));
}

TEST(Matmul, ShapeErrorNamesPrimitiveAndShapes) {
  Graph g;
  try {
    matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({4, 5})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
    EXPECT_EQ(e.op(), "matmul");
  }
  EXPECT_THROW(add(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 2}))), ShapeError);
  EXPECT_THROW(bmm(g.constant(Tensor({2, 3, 4})), g.constant(Tensor({3, 4, 2}))), ShapeError);
}

TEST(Autodiff, SquareSumDerivative) {
  Graph g;
  const Var x = g.variable(make({1}, {3.0}));
  g.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 6.0);
}

TEST(Autodiff, SharedSubexpressionAccumulatesBeforePropagating) {
  // y = (x*x) + (x*x)*3 uses one node twice; dy/dx = 8x.
  Graph g;
  const Var x = g.variable(make({2}, {1.5, -2.0}));
  const Var sq = mul(x, x);
  g.backward(sum(add(sq, scale(sq, 3.0))));
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 12.0);
  EXPECT_DOUBLE_EQ(g.grad(x)[1], -16.0);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  Graph g;
  const Var c = g.constant(make({2}, {1, 2}));
  const Var x = g.variable(make({2}, {3, 4}));
  g.backward(sum(mul(c, x)));
  EXPECT_EQ(g.grad(c)[0], 0.0);
  EXPECT_EQ(g.grad(x)[1], 2.0);
}

TEST(Concat, BackwardSplitsUpstreamWithoutLoss) {
  Rng rng(8);
  Graph g;
  const Var a = g.variable(random_tensor({2, 3}, rng));
  const Var b = g.variable(random_tensor({4, 3}, rng));
  const Var cat = concat({a, b}, 0);
  const Tensor w = random_tensor({6, 3}, rng);
  g.backward(sum(mul(cat, g.constant(w))));
  const Tensor ga = g.grad(a), gb = g.grad(b);
  double na = 0, nb = 0, nu = 0;
  for (double x : ga.data()) na += x * x;
  for (double x : gb.data()) nb += x * x;
  for (double x : w.data()) nu += x * x;
  EXPECT_NEAR(na + nb, nu, 1e-12);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(ga[i], w[i]);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(gb[i], w[6 + i]);
}

TEST(Embedding, OutOfRangeIdThrows) {
  Graph g;
  const std::vector<int> ids{0, 4};
  EXPECT_THROW(embedding(g.constant(Tensor({4, 2})), ids), std::out_of_range);
}

TEST(LayerNorm, NormalizesRows) {
  Rng rng(2);
  Graph g;
  const Tensor y =
      layer_norm(g.constant(random_tensor({3, 8}, rng, 4.0)), g.constant(Tensor({8}, 1.0)), g.constant(Tensor({8})))
          .value();
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(Gelu, MatchesErfDefinition) {
  Graph g;
  const Tensor y = gelu(g.constant(make({3}, {-1.0, 0.0, 2.0}))).value();
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = std::vector<double>{-1.0, 0.0, 2.0}[i];
    EXPECT_NEAR(y[i], 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(FiniteDifference, SquareAtThree) {
  const Tensor g = finite_difference_grad([](const Tensor& x) { return x[0] * x[0]; }, make({1}, {3.0}), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDifference, ConstantFunctionHasZeroGradient) {
  const Tensor g = finite_difference_grad([](const Tensor&) { return 4.0; }, Tensor({5}, 1.0), 1e-4);
  for (double x : g.data()) EXPECT_EQ(x, 0.0);
}

TEST(FiniteDifference, RejectsBadStepAndNonFiniteValues) {
  auto f = [](const Tensor& x) { return x[0]; };
  EXPECT_THROW(finite_difference_grad(f, Tensor({1}), 0.0), std::invalid_argument);
  EXPECT_THROW(finite_difference_grad([](const Tensor& x) { return std::log(x[0]); }, Tensor({1}), 1e-3),
               std::runtime_error);
}

TEST(GradientSuite, EveryPrimitiveMatchesFiniteDifferences) {
  for (const GradCheckResult& r : run_gradient_suite(21)) {
    EXPECT_TRUE(r.pass) << r.name << " max relative error " << r.max_error;
    EXPECT_LT(r.max_error, 1e-4) << r.name;
  }
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_NE(x, c.next());
  }
  EXPECT_EQ(Rng::derive(1, 2, 3).next(), Rng::derive(1, 2, 3).next());
  EXPECT_NE(Rng::derive(1, 2, 3).next(), Rng::derive(1, 3, 2).next());
}

TEST(Rng, TruncatedNormalStaysWithinTwoDeviations) {
  Rng r(9);
  for (int i = 0; i < 10000; ++i) EXPECT_LE(std::abs(r.truncated_normal(0.02)), 0.04);
}

}  // namespace
}  // namespace xlnet
