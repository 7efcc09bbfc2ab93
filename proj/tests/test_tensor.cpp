#include "sedan/tensor.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace sedan;
using sedan::testing::max_gradient_error;
using sedan::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

// Weights every output entry differently so the gradient is not symmetric.
Tensor probe(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
  return sum(mul(y, Tensor::from(y.shape(), w)));
}

}  // namespace

TEST(Tensor, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(mul(add(a, b), sub(a, scale(b, 0.5)))); }, {a, b}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(exp(relu(a))); }, {a}), kGradTol);
  auto pos = Tensor::from({3}, {0.5, 1.5, 2.5}, true);
  EXPECT_LT(max_gradient_error([&] { return probe(log(add_scalar(pos, 0.1))); }, {pos}), kGradTol);
}

TEST(Tensor, BroadcastAndReductions) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 4}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(add_broadcast(x, b)); }, {x, b}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(mean_axis(x, 1)); }, {x}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return mean(mul(x, x)); }, {x}), kGradTol);
  auto t = random_tensor({2, 3, 4}, rng, false);
  EXPECT_LT(max_gradient_error([&] { return mse_loss(x, t); }, {x}), kGradTol);
}

TEST(Tensor, ShapeOpsGradients) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(swap_axes12(x)); }, {x}), kGradTol);
  auto y = random_tensor({3, 4}, rng), z = random_tensor({3, 2}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(concat({y, z}, 1)); }, {y, z}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(slice(y, 1, 1, 2)); }, {y}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(stack({y, y})); }, {y}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(select(reshape(y, {3, 2, 2}), 1)); }, {y}), kGradTol);
}

TEST(Tensor, MatmulGradients) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), c = random_tensor({2, 5, 4}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(bmm(a, b)); }, {a, b}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(bmm_nt(a, c)); }, {a, c}), kGradTol);
  auto w = random_tensor({4, 3}, rng), bias = random_tensor({3}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(linear(a, w, &bias)); }, {a, w, bias}), kGradTol);
}

TEST(Tensor, NormalizationGradients) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 4}, rng), g = random_tensor({4}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(softmax(x)); }, {x}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(softmax(reshape(x, {2, 3, 4}), false)); }, {x}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(log_softmax(x)); }, {x}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(layer_norm(x, g, b)); }, {x, g, b}), 1e-5);
  auto m = random_tensor({3, 4}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(l2_normalize(m)); }, {m}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(pairwise_sqdist(m, reshape(x, {6, 4}))); }, {m, x}), kGradTol);
}

TEST(Tensor, CausalSoftmaxMasksFuture) {
  auto s = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto p = softmax(s, true);
  EXPECT_DOUBLE_EQ(p.at(0), 1.0);
  EXPECT_EQ(p.at(1), 0.0);
  EXPECT_EQ(p.at(2), 0.0);
  EXPECT_EQ(p.at(5), 0.0);
  EXPECT_NEAR(p.at(6) + p.at(7) + p.at(8), 1.0, 1e-15);
}

TEST(Tensor, CausalConvIsCausalAndDifferentiable) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 6, 3}, rng), w = random_tensor({3, 3, 2}, rng), b = random_tensor({2}, rng);
  EXPECT_LT(max_gradient_error([&] { return probe(causal_conv1d(x, w, b)); }, {x, w, b}), kGradTol);
  EXPECT_LT(max_gradient_error([&] { return probe(causal_avg_pool(x, 3)); }, {x}), kGradTol);

  const auto base = causal_avg_pool(causal_conv1d(x, w, b), 3).values();
  auto x2 = x.detach();
  x2.mutable_values()[(0 * 6 + 4) * 3 + 1] += 10.0;  // batch 0, step 4
  const auto moved = causal_avg_pool(causal_conv1d(x2, w, b), 3).values();
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t o = 0; o < 2; ++o) EXPECT_EQ(base[t * 2 + o], moved[t * 2 + o]);
  EXPECT_NE(base[4 * 2], moved[4 * 2]);
}

TEST(Tensor, AvgPoolOfConstantIsConstant) {
  auto x = Tensor::full({1, 5, 2}, 3.5);
  const auto y = causal_avg_pool(x, 4);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 3.5);
}

TEST(Tensor, ErrorsAreReported) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(l2_normalize(Tensor::zeros({1, 3})), std::domain_error);
  EXPECT_THROW(Tensor::zeros({2}).item(), ShapeError);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  auto a = Tensor::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(mul(a, a).requires_grad());
  }
  EXPECT_TRUE(mul(a, a).requires_grad());
}

TEST(Tensor, SharedSubgraphAccumulates) {
  auto a = Tensor::from({1}, {3.0}, true);
  auto b = mul(a, a);
  sum(add(b, b)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
}

TEST(Tensor, DropoutZeroRateIsIdentity) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({4, 4}, rng);
  EXPECT_EQ(dropout(x, 0.0, rng).values(), x.values());
  EXPECT_THROW(dropout(x, 1.0, rng), std::invalid_argument);
}
