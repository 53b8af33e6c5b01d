#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fln/error.hpp"
#include "fln/tensor.hpp"
#include "op_cases.hpp"
#include "test_support.hpp"

using namespace fln;
using fln::testing::gradient_check;
using fln::testing::op_cases;
using fln::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

using fln::testing::Fn;

}  // namespace

TEST(Tensor, ConstructionAndAccess) {
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_DOUBLE_EQ(t.at({1, 2}), 6.0);
  EXPECT_THROW(t.at({2, 0}), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_THROW(t.dim(2), ShapeError);
}

TEST(Tensor, BroadcastShapes) {
  EXPECT_EQ(broadcast_shapes({3, 1, 4}, {5, 1}), (Shape{3, 5, 4}));
  EXPECT_EQ(broadcast_shapes({}, {2, 2}), (Shape{2, 2}));
  EXPECT_THROW(broadcast_shapes({3}, {4}), ShapeError);
}

TEST(Tensor, ElementwiseValues) {
  const Tensor a = Tensor::from({2}, {1.0, 4.0});
  const Tensor b = Tensor::from({2}, {2.0, 0.5});
  EXPECT_DOUBLE_EQ((a + b).values()[1], 4.5);
  EXPECT_DOUBLE_EQ((a - b).values()[0], -1.0);
  EXPECT_DOUBLE_EQ((a * b).values()[1], 2.0);
  EXPECT_DOUBLE_EQ((a / b).values()[1], 8.0);
  EXPECT_DOUBLE_EQ(sqrt(a).values()[1], 2.0);
  EXPECT_DOUBLE_EQ(relu(Tensor::from({2}, {-1.0, 3.0})).values()[0], 0.0);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(expm1(Tensor::scalar(1e-12)).item(), 1e-12, 1e-24);
}

TEST(Tensor, DomainErrors) {
  EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(sqrt(Tensor::scalar(-1.0)), DomainError);
  EXPECT_THROW(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), DomainError);
}

TEST(Tensor, ShapeErrors) {
  const Tensor a = Tensor::zeros({2, 3});
  EXPECT_THROW(matmul(a, Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(reshape(a, {4}), ShapeError);
  EXPECT_THROW(permute(a, {0, 0}), ShapeError);
  EXPECT_THROW(narrow(a, 1, 2, 2), ShapeError);
  EXPECT_THROW(concat({a, Tensor::zeros({3, 3})}, 1), ShapeError);
  EXPECT_THROW(backward(a), ShapeError);
}

TEST(Tensor, MatmulMatchesLoops) {
  std::mt19937_64 rng(7);
  const Tensor a = random_tensor(rng, {2, 3, 4}, -1, 1, false);
  const Tensor b = random_tensor(rng, {4, 5}, -1, 1, false);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) s += a.at({n, i, k}) * b.at({k, j});
        EXPECT_NEAR(c.at({n, i, j}), s, 1e-14);
      }
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(rng, {4, 6}, -30, 30, false);
  const Tensor p = softmax(x, -1);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += p.at({i, j});
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  const Tensor lse = logsumexp(Tensor::from({2}, {1000.0, 1000.0}), 0);
  EXPECT_NEAR(lse.item(), 1000.0 + std::log(2.0), 1e-12);
}

TEST(Tensor, PermuteNarrowConcatRoundTrip) {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor(rng, {2, 3, 4}, -1, 1, false);
  const Tensor back = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(back.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back.values()[i], x.values()[i]);
  const Tensor joined = concat({narrow(x, 2, 0, 1), narrow(x, 2, 1, 3)}, 2);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(joined.values()[i], x.values()[i]);
}

TEST(Tensor, GradientAccumulatesOnLeavesUntilZeroed) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  backward(sum(square(x)));
  backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Tensor, SharedSubexpressionVisitedOnce) {
  Tensor x = Tensor::scalar(3.0, true);
  const Tensor y = x * x;
  backward(y * y + y);  // x^4 + x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 4 * 27.0 + 6.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor x = Tensor::scalar(2.0, true);
  NoGradGuard guard;
  const Tensor y = x * x;
  EXPECT_FALSE(y.requires_grad());
  EXPECT_FALSE(grad_enabled());
}

TEST(Tensor, DetachCutsGraph) {
  Tensor x = Tensor::scalar(2.0, true);
  const Tensor y = x.detach() * x;
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Tensor, MaxRoutesToFirstMaximum) {
  Tensor x = Tensor::from({3}, {1.0, 5.0, 5.0}, true);
  backward(max(x, 0));
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(TensorGradient, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::size_t trials = 0;
  for (const auto& c : op_cases()) {
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s, c.lo, c.hi));
      const double err = gradient_check(c.f, inputs);
      EXPECT_LT(err, kTol) << c.name << " trial " << rep;
      ++trials;
    }
  }
  EXPECT_GE(trials, 100u);
}

TEST(TensorGradient, ComposedExpression) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::vector<Tensor> inputs{random_tensor(rng, {3, 4}), random_tensor(rng, {4, 4}),
                                     random_tensor(rng, {4})};
    const Fn f = [](const std::vector<Tensor>& v) {
      const Tensor h = gelu(matmul(v[0], v[1]) + v[2]);
      return mean(logsumexp(h, -1)) + mean(square(softmax(h, 0)));
    };
    EXPECT_LT(gradient_check(f, inputs), kTol);
  }
}
