#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tabench/gradcheck.hpp"
#include "tabench/image_ops.hpp"
#include "tabench/rng.hpp"
#include "support.hpp"

using namespace tabench;
using namespace tabench::testing_support;

namespace {

constexpr double kH = 1e-5;

}  // namespace

TEST(Forward, IdentityGraphRecordsNoArithmetic) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2, 3}), true);
  Var y = x;
  EXPECT_EQ(y.value(), Tensor::vector({1, 2, 3}));
  EXPECT_EQ(tape.arithmetic_node_count(), 0u);
}

TEST(Forward, ElementwiseSquare) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3}), true);
  Var y = x * x;
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Forward, MatmulByIdentity) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var i = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(matmul(a, i).value(), Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Forward, ShapeMismatchNamesOpAndShapes) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({3, 3}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,3]"), std::string::npos);
  }
}

TEST(Backward, SquareDerivative) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3}), true);
  Var y = x * x;
  tape.backward(y);
  EXPECT_EQ(tape.grad(x)[0], 6.0);
}

TEST(Backward, TapeIsSingleUse) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3}), true);
  Var y = x * x;
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), Error);
  EXPECT_THROW(x * x, Error);
}

TEST(Backward, IdentityReluHookAtNegativeInput) {
  auto grad_at = [](HookSet hooks) {
    Tape tape(std::move(hooks));
    Var x = tape.leaf(Tensor::vector({-2}), true);
    Var y = relu(x, "block1.relu");
    tape.backward(y);
    return tape.grad(x)[0];
  };
  const std::vector<LayerLabel> labels{{"block1.relu", LabelKind::relu, 1}};
  HookSet hooked;
  hooked.install({HookKind::identity_relu_grad, {"block1.relu"}}, labels);
  EXPECT_EQ(grad_at({}), 0.0);
  EXPECT_EQ(grad_at(hooked), 1.0);
}

TEST(Backward, SoftplusReluHookUsesSigmoid) {
  const std::vector<LayerLabel> labels{{"r", LabelKind::relu, 1}};
  HookSet hooks;
  hooks.install({HookKind::softplus_relu_grad, {"r"}}, labels);
  Tape tape(std::move(hooks));
  Var x = tape.leaf(Tensor::vector({-2, 0.5}), true);
  Var y = relu(x, "r");
  EXPECT_EQ(y.value(), Tensor::vector({0, 0.5}));
  tape.backward(sum(y));
  EXPECT_NEAR(tape.grad(x)[0], 1.0 / (1.0 + std::exp(2.0)), 1e-15);
  EXPECT_NEAR(tape.grad(x)[1], 1.0 / (1.0 + std::exp(-0.5)), 1e-15);
}

TEST(Backward, MissingHookLabelFailsAtInstall) {
  const std::vector<LayerLabel> labels{{"block1.relu", LabelKind::relu, 1}};
  HookSet hooks;
  EXPECT_THROW(hooks.install({HookKind::identity_relu_grad, {"block9.relu"}}, labels), Error);
  EXPECT_THROW(hooks.install({HookKind::scale_branch_grad, {"block1.relu"}, 0.5}, labels), Error);
}

TEST(Backward, ScaleHookGammaRange) {
  const std::vector<LayerLabel> labels{{"b.skip", LabelKind::skip, 1}};
  HookSet hooks;
  EXPECT_THROW(hooks.install({HookKind::scale_branch_grad, {"b.skip"}, 0.0}, labels), Error);
  EXPECT_THROW(hooks.install({HookKind::scale_branch_grad, {"b.skip"}, 1.5}, labels), Error);
  EXPECT_NO_THROW(hooks.install({HookKind::scale_branch_grad, {"b.skip"}, 1.0}, labels));
}

TEST(Backward, TwoLayerChainMatchesFiniteDifferences) {
  GraphFn f = [](Tape&, std::span<const Var> in) {
    Var h = relu(matmul(in[1], in[0]));
    return sum(matmul(in[2], h));
  };
  const double err = check_gradient(f, {away_from_zero({4, 1}, 1), away_from_zero({6, 4}, 2), away_from_zero({1, 6}, 3)}, kH);
  EXPECT_LE(err, 1e-6);
}

TEST(CaptureHook, StoresDetachedCopy) {
  const std::vector<LayerLabel> labels{{"f", LabelKind::feature, 1}};
  HookSet hooks;
  hooks.install({HookKind::capture_forward, {"f"}}, labels);
  Tape tape(std::move(hooks));
  Var x = tape.leaf(Tensor::vector({1, -2}), true);
  feature_point(scale(x, 2.0), "f");
  ASSERT_EQ(tape.captures().count("f"), 1u);
  EXPECT_EQ(tape.captures().at("f"), Tensor::vector({2, -4}));
}

TEST(CheckGradient, SumIsExact) {
  GraphFn f = [](Tape&, std::span<const Var> in) { return sum(in[0]); };
  EXPECT_LE(check_gradient(f, {random_tensor({5}, 4)}, kH), 1e-10);
}

TEST(CheckGradient, SoftmaxCrossEntropy) {
  const std::vector<int> labels{0, 3, 2};
  GraphFn f = [&](Tape&, std::span<const Var> in) { return sum(cross_entropy_rows(in[0], labels)); };
  EXPECT_LE(check_gradient(f, {random_tensor({3, 5}, 5, -2, 2)}, kH), 1e-6);
}

TEST(CheckGradient, Conv2d3x3) {
  GraphFn f = [](Tape&, std::span<const Var> in) { return conv2d(in[0], in[1], in[2], 1, 1); };
  EXPECT_LE(check_gradient(f, {random_tensor({1, 1, 8, 8}, 6), random_tensor({2, 1, 3, 3}, 7), random_tensor({2}, 8)}, kH), 1e-6);
}

TEST(CheckGradient, NonFiniteEvaluationIsAnError) {
  GraphFn f = [](Tape&, std::span<const Var> in) { return sum(scale(in[0], 1e308 * 10)); };
  EXPECT_THROW(check_gradient(f, {Tensor::vector({1.0})}, kH), Error);
  EXPECT_THROW(check_gradient(f, {Tensor::vector({1.0})}, 0.0), Error);
}

class Primitives : public ::testing::TestWithParam<std::size_t> {};

TEST_P(Primitives, PassFiniteDifferenceCheckAtTenPoints) {
  const auto cases = primitive_cases();
  const auto& c = cases[GetParam()];
  for (std::uint64_t k = 0; k < 10; ++k) {
    const auto point = c.point(100 * k + 11);
    const double err = check_gradient(c.fn, point, kH);
    EXPECT_LE(err, 1e-6) << c.name << " point " << k;
  }
}

INSTANTIATE_TEST_SUITE_P(All, Primitives, ::testing::Range<std::size_t>(0, primitive_cases().size()),
                         [](const auto& info) {
                           std::string n = primitive_cases()[info.param].name;
                           for (auto& ch : n)
                             if (ch == '-') ch = '_';
                           return n;
                         });

TEST(Resize, HalfPixelTwoToFour) {
  Tensor x({1, 1, 1, 2}, {0.0, 1.0});
  Tensor y = resize_bilinear(x, 1, 4);
  EXPECT_EQ(y, Tensor({1, 1, 1, 4}, {0.0, 0.25, 0.75, 1.0}));
}

TEST(Resize, SameSizeIsBitwiseIdentity) {
  Tensor x = random_tensor({2, 3, 7, 5}, 99, 0, 1);
  EXPECT_EQ(resize_bilinear(x, 7, 5), x);
  Tape tape;
  EXPECT_EQ(bilinear_resize(tape.constant(x), 7, 5).value(), x);
  EXPECT_EQ(resize_place(tape.constant(x), {{7, 5, 0, 0}, {7, 5, 0, 0}}, 7, 5).value(), x);
}

TEST(Determinism, SameGraphSameBits) {
  auto run = [] {
    Tape tape;
    Var x = tape.leaf(random_tensor({2, 3, 6, 6}, 5), true);
    Var w = tape.leaf(random_tensor({4, 3, 3, 3}, 6), true);
    Var b = tape.leaf(random_tensor({4}, 7), true);
    Var y = sum(softmax(reshape(relu(conv2d(x, w, b, 1, 1)), {2, 144})));
    tape.backward(y);
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  EXPECT_EQ(run(), run());
}

TEST(Hooks, NeutralHooksAreBitIdentical) {
  const std::vector<LayerLabel> labels{{"s", LabelKind::skip, 1}, {"r", LabelKind::relu, 1}};
  auto run = [&](HookSet hooks) {
    Tape tape(std::move(hooks));
    Var x = tape.leaf(random_tensor({2, 6}, 1), true);
    Var w = tape.constant(random_tensor({6, 6}, 2));
    Var h = relu(matmul(x, w), "r");
    Var y = add(h, branch_point(matmul(h, w), "s"));
    tape.backward(sum(y));
    return tape.grad(x);
  };
  HookSet neutral;
  neutral.install({HookKind::scale_branch_grad, {"s"}, 1.0}, labels);
  neutral.install({HookKind::identity_relu_grad, {}}, labels);
  EXPECT_EQ(run({}), run(neutral));
}
