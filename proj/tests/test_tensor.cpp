#include "outlier_lab/tensor.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace olab {
namespace {

using testing::random_tensor;

TEST(Tensor, RejectsShapeDataMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({0}, {}), ShapeError);
}

TEST(Primitives, MatmulIdentity) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor c = ops::matmul(a, eye);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()),
            (std::vector<double>{1, 2, 3, 4}));
}

TEST(Primitives, MatmulTransposedAndBatched) {
  Tensor a({2, 1, 2}, {1, 2, 3, 4});
  Tensor b({2, 2, 1}, {5, 6, 7, 8});
  Tensor c = ops::matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17.0);
  EXPECT_DOUBLE_EQ(c[1], 53.0);
  Tensor x({1, 2}, {1, 2});
  Tensor w({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor y = ops::matmul(x, w, {.transpose_b = true});
  ASSERT_EQ(y.shape(), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(y[2], 3.0);
}

TEST(Primitives, ShapeMismatchNamesOpAndShapes) {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({2, 3}, std::vector<double>(6, 1.0));
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(ops::add(a, Tensor({2}, {1, 2})), ShapeError);
}

TEST(Primitives, ClipDefinition) {
  Tensor x({3}, {-0.5, 0.3, 1.7});
  Tensor y = ops::clip(x, 0.0, 1.0);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.3);
  EXPECT_EQ(y[2], 1.0);
}

TEST(Primitives, LayerNormOfConstantIsZero) {
  Tensor x({1, 4}, {2.5, 2.5, 2.5, 2.5});
  Tensor y = ops::layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, LogOfNonPositiveIsAnError) {
  EXPECT_THROW(ops::log(Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(ops::log(Tensor({1}, {-2.0})), DomainError);
}

TEST(Primitives, SoftmaxNanRowsPropagateFullyMaskedRowsThrow) {
  for (double bad : {NAN, INFINITY}) {
    Tensor y = ops::softmax(Tensor({2, 3}, {0.0, bad, 1.0, 0.0, 1.0, 2.0}));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_TRUE(std::isnan(y[j])) << bad;
    EXPECT_FALSE(std::isnan(y[3]));
  }
  EXPECT_TRUE(std::isnan(ops::softmax(Tensor({2}, {-INFINITY, NAN}))[0]));
  EXPECT_THROW(ops::softmax(Tensor({2}, {-INFINITY, -INFINITY})), DomainError);
}

TEST(Primitives, SoftmaxHandlesLargeLogitsAndMaskedEntries) {
  Tensor y = ops::softmax(Tensor({2}, {1000.0, 0.0}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_GE(y[1], 0.0);
  EXPECT_LT(y[1], 1e-300);
  Tensor z = ops::softmax(Tensor({3}, {0.0, -INFINITY, 0.0}));
  EXPECT_EQ(z[1], 0.0);
  EXPECT_DOUBLE_EQ(z[0], 0.5);
}

TEST(Primitives, CrossEntropyOfUniformLogitsIsLogV) {
  Tensor logits = Tensor::zeros({3, 10});
  std::vector<std::int32_t> t{1, -1, 7};
  EXPECT_NEAR(ops::cross_entropy(logits, t).item(), std::log(10.0), 1e-12);
  std::vector<std::int32_t> none{-1, -1, -1};
  EXPECT_THROW(ops::cross_entropy(logits, none), std::invalid_argument);
}

TEST(Backward, ClipGradientIsStrictInterior) {
  Tensor x({3}, {-1.0, 0.5, 2.0}, true);
  Tape tape;
  Tensor loss;
  {
    RecordingScope rec(tape);
    loss = ops::sum(ops::clip(x, 0.0, 1.0));
  }
  backward(tape, loss);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);

  Tensor at_bounds({2}, {0.0, 1.0}, true);
  Tape t2;
  {
    RecordingScope rec(t2);
    loss = ops::sum(ops::clip(at_bounds, 0.0, 1.0));
  }
  t2.backward(loss);
  EXPECT_EQ(at_bounds.grad()[0], 0.0);
  EXPECT_EQ(at_bounds.grad()[1], 0.0);
}

TEST(Backward, SquareGradient) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor loss;
  {
    RecordingScope rec(tape);
    loss = ops::sum(ops::mul(x, x));
  }
  tape.backward(loss);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_TRUE(loss.node_id().has_value());
}

TEST(Backward, Errors) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tape tape;
  Tensor y;
  {
    RecordingScope rec(tape);
    y = ops::scale(x, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ShapeError);
  Tensor unrecorded = ops::sum(x);
  EXPECT_THROW(tape.backward(unrecorded), std::logic_error);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(3);
  Tensor x = random_tensor({4, 7}, rng, 2.0);
  Tape tape;
  Tensor loss;
  {
    RecordingScope rec(tape);
    loss = ops::sum(ops::softmax(x));
  }
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Rng rng(4);
  Tensor x = random_tensor({3, 3}, rng);
  Tape tape;
  {
    RecordingScope rec(tape);
    ops::sum(ops::exp(ops::matmul(x, x)));
  }
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (const auto& in : tape.entry(i).inputs) {
      EXPECT_LT(in->id, tape.entry(i).output->id);
    }
  }
}

// Each primitive checked against central differences in 64-bit arithmetic.
TEST(FiniteDifference, ExpSum) {
  Tensor x({2}, {0.0, 1.0}, true);
  const double err = finite_diff_check([](const Tensor& t) { return ops::sum(ops::exp(t)); }, x);
  EXPECT_LT(err, 1e-6);
}

TEST(FiniteDifference, SoftmaxSumOfSquares) {
  Rng rng(11);
  Tensor x = random_tensor({8}, rng);
  const double err = finite_diff_check(
      [](const Tensor& t) {
        Tensor p = ops::softmax(t);
        return ops::sum(ops::mul(p, p));
      },
      x);
  EXPECT_LT(err, 1e-5);
}

class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
  Rng rng(100 + GetParam());
  Tensor w = random_tensor({3, 4}, rng);  // random linear read-out keeps gradients O(1)
  auto readout = [&](const Tensor& y) {
    Tensor flat = ops::reshape(y, {y.numel()});
    std::vector<double> coef(y.numel());
    for (std::size_t i = 0; i < coef.size(); ++i) coef[i] = std::sin(1.0 + 0.37 * i);
    return ops::sum(ops::mul(flat, Tensor({y.numel()}, coef)));
  };
  Tensor a = random_tensor({2, 3, 3}, rng);
  Tensor b = random_tensor({2, 3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  Tensor pos({2, 3}, {0.5, 1.2, 2.0, 0.7, 1.9, 0.3}, true);
  Tensor g = random_tensor({4}, rng);
  Tensor be = random_tensor({4}, rng);
  Tensor table = random_tensor({5, 3}, rng);
  std::vector<std::int32_t> ids{4, 0, 4, 2};
  std::vector<std::uint8_t> mask{0, 1, 0, 0};
  std::vector<std::int32_t> targets{1, -1, 3};

  auto check = [&](auto f, Tensor x) { EXPECT_LT(finite_diff_check(f, x), 1e-5); };
  check([&](const Tensor& t) { return readout(ops::matmul(t, b)); }, a);
  check([&](const Tensor& t) { return readout(ops::matmul(a, t)); }, b);
  check([&](const Tensor& t) { return readout(ops::matmul(t, w, {.transpose_b = true})); },
        random_tensor({2, 4}, rng));
  check([&](const Tensor& t) { return readout(ops::matmul(a, t, {.transpose_b = false})); }, b);
  check([&](const Tensor& t) { return readout(ops::add(b, t)); }, bias);
  Tensor w34 = random_tensor({3, 4}, rng);
  check([&](const Tensor& t) { return readout(ops::linear(t, w34, bias)); }, a);
  check([&](const Tensor& t) { return readout(ops::linear(a, t, bias)); }, w34);
  check([&](const Tensor& t) { return readout(ops::linear(a, w34, t)); }, bias);
  check([&](const Tensor& t) { return readout(ops::mul(b, t)); }, bias);
  check([&](const Tensor& t) { return readout(ops::mul(t, b)); }, b);
  check([&](const Tensor& t) { return readout(ops::affine(t, -1.5, 0.25)); }, b);
  check([&](const Tensor& t) { return readout(ops::log(t)); }, pos);
  check([&](const Tensor& t) { return readout(ops::gelu(t)); }, b);
  check([&](const Tensor& t) { return readout(ops::sum_axis(t)); }, b);
  check([&](const Tensor& t) { return readout(ops::max_axis(t)); }, b);
  check([&](const Tensor& t) { return readout(ops::softmax(t)); }, b);
  check([&](const Tensor& t) { return readout(ops::layer_norm(t, g, be)); }, b);
  check([&](const Tensor& t) { return readout(ops::layer_norm(b, t, be)); }, g);
  check([&](const Tensor& t) { return readout(ops::layer_norm(b, g, t)); }, be);
  check([&](const Tensor& t) { return readout(ops::embedding_lookup(t, ids, {2, 2})); }, table);
  check([&](const Tensor& t) { return readout(ops::transpose(t, {1, 2, 0})); }, b);
  check([&](const Tensor& t) { return readout(ops::masked_fill(t, mask, {4}, -3.0)); }, b);
  check([&](const Tensor& t) { return ops::cross_entropy(t, targets); }, random_tensor({3, 5}, rng));
  check([&](const Tensor& t) { return readout(ops::clip(t, -0.3, 0.4)); },
        Tensor({2, 3}, {-1.0, 0.1, 0.2, 0.9, -0.1, 0.35}, true));
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 3));

TEST(Linear, SameBitsAsMatmulPlusBias) {
  Rng rng(7);
  Tensor x = random_tensor({5, 6, 3}, rng);
  Tensor w = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4}, rng);
  auto grads = [&](bool fused) {
    for (Tensor* t : {&x, &w, &b}) t->zero_grad();
    Tape tape;
    Tensor y;
    {
      RecordingScope rec(tape);
      y = fused ? ops::linear(x, w, b) : ops::add(ops::matmul(x, w), b);
      backward(tape, ops::sum(ops::mul(y, y)));
    }
    std::vector<double> out(y.data().begin(), y.data().end());
    for (const Tensor* t : {&x, &w, &b}) out.insert(out.end(), t->grad().begin(), t->grad().end());
    return out;
  };
  EXPECT_EQ(grads(true), grads(false));
  EXPECT_THROW(ops::linear(x, random_tensor({4, 3}, rng), b), ShapeError);
}

TEST(FiniteDifference, ClipBoundaryIsAnExcludedInput) {
  // At x == hi the one-sided slopes differ (1 and 0); the strict-interior
  // analytic gradient is 0 while the central difference is 0.5. Callers must
  // keep inputs off clip boundaries.
  Tensor x({1}, {1.0}, true);
  const double err =
      finite_diff_check([](const Tensor& t) { return ops::sum(ops::clip(t, 0.0, 1.0)); }, x);
  EXPECT_GT(err, 0.5);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  Rng rng(9);
  Tensor a = random_tensor({4, 6}, rng, 1.0, false);
  Tensor b = random_tensor({6, 5}, rng, 1.0, false);
  auto run = [&] {
    return ops::softmax(ops::gelu(ops::matmul(a, b)));
  };
  Tensor y1 = run();
  Tensor y2 = run();
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(Autograd, NoRecordingWithoutTape) {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y = ops::exp(x);
  EXPECT_FALSE(y.node_id().has_value());
  EXPECT_FALSE(y.requires_grad());
}

}  // namespace
}  // namespace olab
