#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cln/numcore.hpp"
#include "cln/optim.hpp"
#include "cln/random.hpp"
#include "support/grad_cases.hpp"

using namespace cln;

TEST(LayerNormalize, UnitVarianceInputIsUnchanged) {
  const std::vector<double> z{1.0, -1.0};
  EXPECT_EQ(layer_normalize(z, 0.0), z);
}

TEST(LayerNormalize, ConstantInputMapsToZeros) {
  for (double c : {0.0, 3.5, -1e6}) {
    const std::vector<double> z(3, c);
    for (double v : layer_normalize(z, 1e-5)) EXPECT_EQ(v, 0.0);
    for (double v : layer_normalize(z, 0.0)) EXPECT_EQ(v, 0.0);
  }
}

TEST(LayerNormalize, HandEvaluatedThreeVector) {
  const std::vector<double> z{1.0, 2.0, 3.0};
  const auto out = layer_normalize(z, 0.0);
  // (x - 2) / sqrt(2/3)
  EXPECT_NEAR(out[0], -1.2247448713915890, 1e-15);
  EXPECT_NEAR(out[1], 0.0, 1e-15);
  EXPECT_NEAR(out[2], 1.2247448713915890, 1e-15);
}

TEST(LayerNormalize, EmptyInputThrows) {
  EXPECT_THROW(
      {
        try {
          layer_normalize(std::vector<double>{});
        } catch (const std::invalid_argument& e) {
          EXPECT_STREQ(e.what(), "empty vector");
          throw;
        }
      },
      std::invalid_argument);
}

TEST(LayerNormalize, OutputHasZeroMeanAndUnitVariance) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 30;
    std::vector<double> z(n);
    for (auto& v : z) v = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 10));
    const auto out = layer_normalize(z, 0.0);
    double mean = 0.0, var = 0.0;
    for (double v : out) mean += v;
    mean /= n;
    for (double v : out) var += (v - mean) * (v - mean);
    var /= n;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-12);
  }
}

TEST(CosineSimilarity, Examples) {
  const std::vector<double> a{0.3, -2.0, 5.0};
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 1}), 1.0 / std::sqrt(2.0),
              1e-15);
}

TEST(CosineSimilarity, DegenerateVectorThrows) {
  try {
    cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 1});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "degenerate vector");
  }
  EXPECT_THROW(cosine_similarity(std::vector<double>{1, 1}, std::vector<double>{1e-13, 0}), std::invalid_argument);
}

TEST(CosineSimilarity, SymmetricBoundedAndScaleInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double c = cosine_similarity(a, b);
    EXPECT_EQ(c, cosine_similarity(b, a));
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    std::vector<double> a5 = a;
    for (auto& v : a5) v *= 5.0;
    EXPECT_NEAR(cosine_similarity(a5, b), c, 1e-14);
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  const std::vector<double> logits(4, 0.7);
  EXPECT_NEAR(softmax_cross_entropy(logits, 0).loss, std::log(4.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, ConfidentPrediction) {
  const std::vector<double> logits{10.0, 0.0, 0.0};
  const double expected = std::log1p(2.0 * std::exp(-10.0));
  EXPECT_NEAR(softmax_cross_entropy(logits, 0).loss, expected, 1e-15);
  EXPECT_NEAR(expected, 9.08e-5, 1e-7);
}

TEST(SoftmaxCrossEntropy, MaskRestrictsTheSoftmax) {
  const std::vector<double> logits{5, 1, 7, 2};
  const std::vector<bool> mask{false, false, true, true};
  const auto r = softmax_cross_entropy(logits, 2, &mask);
  EXPECT_NEAR(r.loss, std::log1p(std::exp(-5.0)), 1e-15);
  EXPECT_NEAR(r.loss, 0.006715, 1e-6);
  EXPECT_EQ(r.grad[0], 0.0);
  EXPECT_EQ(r.grad[1], 0.0);
  EXPECT_NEAR(r.grad[2] + r.grad[3], 0.0, 1e-15);
}

TEST(SoftmaxCrossEntropy, InvalidLabels) {
  const std::vector<double> logits{1, 2, 3};
  const std::vector<bool> mask{true, false, true};
  for (std::size_t label : {std::size_t{3}, std::size_t{1}}) {
    try {
      softmax_cross_entropy(logits, label, &mask);
      FAIL();
    } catch (const std::invalid_argument& e) {
      EXPECT_STREQ(e.what(), "invalid label");
    }
  }
}

TEST(SoftmaxCrossEntropy, NonNegativeAndStableForLargeLogits) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> logits(5);
    for (auto& v : logits) v = rng.normal(0.0, 300.0);
    const auto r = softmax_cross_entropy(logits, trial % 5);
    EXPECT_GE(r.loss, 0.0);
    EXPECT_TRUE(std::isfinite(r.loss));
  }
}

TEST(AdamStep, ZeroGradientLeavesParamUnchanged) {
  Tensor p({3}, std::vector<double>{0.5, -1.0, 2.0});
  const Tensor before = p;
  AdamState s;
  adam_step(p, std::vector<double>(3, 0.0), s, AdamConfig{});
  EXPECT_TRUE(p.bit_equal(before));
  EXPECT_EQ(s.step_count, 1u);
}

TEST(AdamStep, FirstStepMovesByLearningRate) {
  for (double g : {1.0, -1.0}) {
    Tensor p({1}, 0.0);
    AdamState s;
    adam_step(p, std::vector<double>{g}, s, AdamConfig{.lr = 0.1});
    EXPECT_NEAR(p[0], -0.1 * g, 1e-8);
  }
}

TEST(AdamStep, ShapeMismatchThrows) {
  Tensor p({2}, 0.0);
  AdamState s;
  EXPECT_THROW(adam_step(p, std::vector<double>{1.0}, s, AdamConfig{}), std::invalid_argument);
}

TEST(AdamStep, Deterministic) {
  auto run = [] {
    Tensor p({4}, std::vector<double>{1, 2, 3, 4});
    AdamState s;
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
      std::vector<double> g(4);
      for (auto& v : g) v = rng.normal();
      adam_step(p, g, s, AdamConfig{.lr = 0.01});
    }
    return p;
  };
  EXPECT_TRUE(run().bit_equal(run()));
}

TEST(GradCheck, Quadratic) {
  Tensor w({1}, 3.0);
  w.set_requires_grad(true);
  std::vector<Tensor*> p{&w};
  const double err = grad_check(
      [&](Graph& g) {
        Var v = g.param(w);
        return g.sum(g.mul_row_broadcast(g.scale(v, 1.0), v));
      },
      p);
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, NonFiniteGradientThrows) {
  Tensor w({1}, 0.0);
  w.set_requires_grad(true);
  std::vector<Tensor*> p{&w};
  EXPECT_THROW(grad_check([&](Graph& g) { return g.scale(g.param(w), std::nan("")); }, p), std::runtime_error);
}

TEST(GradCheck, EveryDifferentiableOperation) {
  for (const auto& c : cln::testing::gradient_cases()) {
    SCOPED_TRACE(c.name);
    EXPECT_LT(c.run(), 1e-4);
  }
}

TEST(Graph, BackwardAccumulatesIntoTensors) {
  Tensor w({2}, std::vector<double>{1.0, 2.0});
  w.set_requires_grad(true);
  for (int i = 0; i < 2; ++i) {
    Graph g;
    g.backward(g.sum(g.scale(g.param(w), 3.0)));
  }
  EXPECT_EQ(w.grad()[0], 6.0);
  EXPECT_EQ(w.grad()[1], 6.0);
  w.zero_grad();
  EXPECT_EQ(w.grad()[0], 0.0);
}
