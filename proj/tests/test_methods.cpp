#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "support.hpp"
#include "tabench/attack.hpp"

using namespace tabench;
using namespace tabench::testing_support;

// ---------------------------------------------------------------------------
// Backward-modification methods

TEST(Sgm, MatchesGammaWeightedPathSum) {
  const Model m = small_model(ArchKind::toy_resnet, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0, 1);
  const int y[] = {2, 5};
  for (double gamma : {0.2, 0.5, 0.9}) {
    MethodParams p;
    p.kind = MethodKind::SGM;
    p.gamma = gamma;
    const Tensor hooked = ce_input_grad(m, x, y, install_backward_method(m.spec(), p));
    // Every input-output path crosses both residual adds, once via skip or branch each.
    Tensor oracle(x.shape(), 0.0);
    for (int mask = 0; mask < 4; ++mask) {
      ForwardOptions opt;
      int branches = 0;
      for (int b = 0; b < 2; ++b) {
        const bool branch = mask >> b & 1;
        branches += branch;
        opt.residual_routes["block" + std::to_string(b + 1) + ".skip"] = branch ? ResidualRoute::branch_only : ResidualRoute::skip_only;
      }
      Tensor g = ce_input_grad(m, x, y, {}, opt);
      g *= std::pow(gamma, branches);
      oracle += g;
    }
    EXPECT_LE(max_abs_diff(hooked, oracle), 1e-12 * max_abs(oracle.data())) << "gamma " << gamma;
  }
}

TEST(Sgm, GammaOneIsPlainGradient) {
  const Model m = small_model(ArchKind::toy_resnet, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0, 1);
  const int y[] = {2, 5};
  MethodParams p;
  p.kind = MethodKind::SGM;
  p.gamma = 1.0;
  EXPECT_EQ(ce_input_grad(m, x, y, install_backward_method(m.spec(), p)), ce_input_grad(m, x, y, {}));
}

TEST(LinBp, MatchesExplicitlyLinearizedGraph) {
  const Model m = small_model(ArchKind::toy_resnet, 8);
  MethodParams p;
  p.kind = MethodKind::LinBP;
  p.layer_index = 2;
  const HookSet hooks = install_backward_method(m.spec(), p);
  // Linearizing block 2 leaves only linear maps after it (no pooling argmax), so the
  // Jacobian of the rewritten graph equals the hooked backward for a linear readout.
  ForwardOptions lin;
  lin.linearize_relus = {"block2.relu1", "block2.relu"};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = random_tensor({2, 3, 8, 8}, 10 + s, 0, 1);
    const Tensor c = random_tensor({2, m.spec().num_classes}, 20 + s);
    const Tensor hooked = input_grad(m, x, c, hooks), oracle = input_grad(m, x, c, {}, lin);
    EXPECT_LE(max_abs_diff(hooked, oracle), 1e-12 * max_abs(oracle.data()));
    EXPECT_GT(max_abs_diff(hooked, input_grad(m, x, c, {})), 0.0);
  }
}

TEST(LinBp, ForwardUnchanged) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  MethodParams p;
  p.kind = MethodKind::ConBP;
  p.layer_index = 1;
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0, 1);
  Tape a, b(install_backward_method(m.spec(), p));
  EXPECT_EQ(m.forward(a, a.constant(x)).logits.value(), m.forward(b, b.constant(x)).logits.value());
}

TEST(Pna, ForwardIdenticalGradientDiffers) {
  const Model m = small_model(ArchKind::toy_vit, 8);
  MethodParams p;
  p.kind = MethodKind::PNA;
  const HookSet h = install_backward_method(m.spec(), p);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0, 1);
  Tape a, b(h);
  EXPECT_EQ(m.forward(a, a.constant(x)).logits.value(), m.forward(b, b.constant(x)).logits.value());
  const int y[] = {0, 1};
  EXPECT_GT(max_abs_diff(ce_input_grad(m, x, y, h), ce_input_grad(m, x, y, {})), 0.0);
}

TEST(Compatibility, MethodsRejectUnsupportedArchitectures) {
  auto spec = [](ArchKind a) { return ModelSpec::defaults(a); };
  EXPECT_THROW(check_compatible(MethodKind::SGM, spec(ArchKind::toy_cnn)), Error);
  EXPECT_NO_THROW(check_compatible(MethodKind::SGM, spec(ArchKind::toy_resnet)));
  EXPECT_NO_THROW(check_compatible(MethodKind::SGM, spec(ArchKind::toy_vit)));
  EXPECT_THROW(check_compatible(MethodKind::LinBP, spec(ArchKind::toy_vit)), Error);
  EXPECT_THROW(check_compatible(MethodKind::ConBP, spec(ArchKind::toy_mixer)), Error);
  EXPECT_THROW(check_compatible(MethodKind::PNA, spec(ArchKind::toy_resnet)), Error);
  EXPECT_THROW(check_compatible(MethodKind::SE, spec(ArchKind::toy_cnn)), Error);
  try {
    check_compatible(MethodKind::PNA, spec(ArchKind::toy_cnn));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("not applicable to toy_cnn"), std::string::npos);
  }
  MethodParams p;
  p.kind = MethodKind::ILA;
  p.layer_index = 9;
  EXPECT_THROW(resolve_layer_index(p, spec(ArchKind::toy_cnn)), Error);
}

TEST(Compatibility, DefaultLayerIsMiddleBlock) {
  MethodParams p;
  ModelSpec s = ModelSpec::defaults(ArchKind::toy_cnn);
  s.depth = 3;
  EXPECT_EQ(resolve_layer_index(p, s), 2u);
  s.depth = 4;
  EXPECT_EQ(feature_label(p, s), "block2.out");
}

TEST(Compatibility, JsonRoundTrip) {
  MethodParams p;
  p.kind = MethodKind::ILApp;
  p.layer_index = 2;
  p.lambda_ridge = 0.25;
  const auto j = nlohmann::json(p);
  EXPECT_EQ(j.at("kind"), "ILA++");
  EXPECT_EQ(nlohmann::json(j.get<MethodParams>()), j);
  for (auto k : kAllMethods) EXPECT_EQ(method_from_string(to_string(k)), k);
  EXPECT_THROW(method_from_string("DeepFool"), Error);
}

// ---------------------------------------------------------------------------
// Feature losses against loop oracles

class FeatureLoss : public ::testing::TestWithParam<MethodKind> {};

TEST_P(FeatureLoss, MatchesLoopOracleOnRandomCases) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Case c = random_case(s);
    c.p.kind = GetParam();
    Tape tape;
    Var v = feature_loss(c.p, c.a, tape.constant(c.f), tape.constant(c.delta), tape.constant(c.logits), c.y);
    ASSERT_EQ(v.shape(), (Shape{c.fshape[0]}));
    for (std::size_t r = 0; r < c.fshape[0]; ++r) {
      const double want = oracle_loss(GetParam(), c, r);
      ASSERT_LE(std::abs(v.value()[r] - want), 1e-10 * std::max(1.0, std::abs(want))) << "case " << s << " row " << r;
    }
  }
}

TEST_P(FeatureLoss, GradientThroughSubstituteMatchesFiniteDifferences) {
  // Post-ReLU features sit at exact zeros where TAP's |f|^alpha has no derivative; ViT features do not.
  const Model m = small_model(ArchKind::toy_vit, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 5, 0.2, 0.8);
  const std::vector<int> y{1, 6};
  const auto ids = iota_ids(2);
  MethodParams p;
  p.kind = GetParam();
  p.layer_index = 1;
  p.n_agg = 2;
  p.ila_reference_iterations = 2;
  const Tensor stats = random_tensor({4, 3, 8, 8}, 6, 0, 1);
  const Aggregates a = precompute_aggregates(p, m, x, y, {{Norm::linf, 0.03, 0.01}, 3, ids, &stats});
  const LossFn loss = method_loss(p, a, m.spec(), y);
  GraphFn f = [&](Tape& tape, std::span<const Var> in) {
    Var z = add(tape.constant(x), in[0]);
    return sum(loss(tape, m.forward(tape, z), in[0]));
  };
  const auto d = nondegenerate_points(f, [](std::uint64_t s) { return random_tensor({2, 3, 8, 8}, s, -0.02, 0.02); }, 1, 7);
  EXPECT_LE(check_gradient(f, {d[0]}, 1e-5), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Methods, FeatureLoss,
                         ::testing::Values(MethodKind::ILA, MethodKind::ILApp, MethodKind::FIA, MethodKind::NAA,
                                           MethodKind::FDA, MethodKind::NRDM, MethodKind::TAP),
                         [](const auto& info) {
                           std::string n = to_string(info.param);
                           return n == "ILA++" ? std::string("ILApp") : n;
                         });

TEST(FeatureLossErrors, MissingAggregateAndWrongKind) {
  Tape tape;
  const Tensor f({1, 2, 2, 2}, 0.5);
  MethodParams p;
  p.kind = MethodKind::ILA;
  const int y[] = {0};
  EXPECT_THROW(feature_loss(p, {}, tape.constant(f), tape.constant(f), tape.constant(Tensor({1, 2}, 0.0)), y), Error);
  p.kind = MethodKind::VT;
  EXPECT_THROW(feature_loss(p, {}, tape.constant(f), tape.constant(f), tape.constant(Tensor({1, 2}, 0.0)), y), Error);
}

// ---------------------------------------------------------------------------
// Aggregates

TEST(Ridge, MatchesPrimalNormalEquations) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng rng{s, 3};
    const std::size_t T = 1 + rng.below(6), F = 1 + rng.below(8);
    std::vector<std::vector<double>> H(T, std::vector<double>(F));
    std::vector<double> r(T);
    for (auto& row : H)
      for (auto& v : row) v = rng.uniform(-1, 1);
    for (auto& v : r) v = rng.uniform(-1, 1);
    const double lambda = rng.uniform(0.1, 2.0);
    const auto w = ridge_weights(H, r, lambda);
    // Primal: (H^T H + lambda I) w = H^T r, solved by Gaussian elimination.
    std::vector<std::vector<double>> A(F, std::vector<double>(F + 1, 0.0));
    for (std::size_t i = 0; i < F; ++i) {
      for (std::size_t j = 0; j < F; ++j)
        for (std::size_t t = 0; t < T; ++t) A[i][j] += H[t][i] * H[t][j];
      A[i][i] += lambda;
      for (std::size_t t = 0; t < T; ++t) A[i][F] += H[t][i] * r[t];
    }
    for (std::size_t i = 0; i < F; ++i) {
      for (std::size_t k = i + 1; k < F; ++k) {
        const double q = A[k][i] / A[i][i];
        for (std::size_t j = i; j <= F; ++j) A[k][j] -= q * A[i][j];
      }
    }
    std::vector<double> want(F);
    for (std::size_t i = F; i-- > 0;) {
      double v = A[i][F];
      for (std::size_t j = i + 1; j < F; ++j) v -= A[i][j] * want[j];
      want[i] = v / A[i][i];
    }
    for (std::size_t i = 0; i < F; ++i) EXPECT_NEAR(w[i], want[i], 1e-10);
  }
  EXPECT_THROW(ridge_weights({{1.0}}, {1.0}, 0.0), Error);
}

class Aggregate : public ::testing::Test {
 protected:
  Model m = small_model(ArchKind::toy_cnn, 8);
  Tensor x = random_tensor({3, 3, 8, 8}, 9, 0, 1);
  std::vector<int> y{0, 3, 7};
  std::vector<std::size_t> ids = iota_ids(3);
  AggregateInputs in{{Norm::linf, 0.03, 0.01}, 4, ids};
};

TEST_F(Aggregate, IlaDirectionIsReferenceEndpoint) {
  MethodParams p;
  p.kind = MethodKind::ILA;
  p.layer_index = 1;
  p.ila_reference_iterations = 3;
  const Aggregates a = precompute_aggregates(p, m, x, y, in);
  const auto tr = reference_attack(m, x, y, in.budget, 3, "block1.out");
  Tensor want = tr.features.back();
  for (std::size_t i = 0; i < want.size(); ++i) want[i] -= tr.clean_features[i];
  EXPECT_EQ(a.delta_y, want);
  EXPECT_EQ(a.clean_features, clean_features(m, x, "block1.out"));
  p.ila_reference_iterations = 0;
  EXPECT_EQ(precompute_aggregates(p, m, x, y, in).delta_y, Tensor(want.shape(), 0.0));
}

TEST_F(Aggregate, FiaDirectionIsUnitNormAndDeterministic) {
  MethodParams p;
  p.kind = MethodKind::FIA;
  p.n_agg = 3;
  const Aggregates a = precompute_aggregates(p, m, x, y, in);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(l2_norm(a.g_bar.row(r)), 1.0, 1e-12);
  EXPECT_EQ(precompute_aggregates(p, m, x, y, in).g_bar, a.g_bar);
}

TEST_F(Aggregate, NaaAttributionVanishesAtBaseline) {
  MethodParams p;
  p.kind = MethodKind::NAA;
  p.n_agg = 2;
  const Tensor zero(x.shape(), 0.0);
  const Aggregates a = precompute_aggregates(p, m, zero, y, in);
  EXPECT_EQ(max_abs(a.attribution.data()), 0.0);
}

TEST_F(Aggregate, FdaNeedsStatisticsBatch) {
  MethodParams p;
  p.kind = MethodKind::FDA;
  EXPECT_THROW(precompute_aggregates(p, m, x, y, in), Error);
  AggregateInputs with = in;
  with.stats_batch = &x;
  const Aggregates a = precompute_aggregates(p, m, x, y, with);
  EXPECT_EQ(a.channel_mean.size(), m.spec().width);
}

TEST_F(Aggregate, IlaPlusPlusWeightsFiniteAndLambdaChecked) {
  MethodParams p;
  p.kind = MethodKind::ILApp;
  p.ila_reference_iterations = 4;
  EXPECT_TRUE(precompute_aggregates(p, m, x, y, in).w_star.all_finite());
  p.lambda_ridge = -1;
  EXPECT_THROW(precompute_aggregates(p, m, x, y, in), Error);
}

// ---------------------------------------------------------------------------
// Output-space estimators and backprop parity

namespace {

std::uint64_t backprops(const MethodParams& p, const AugmentStack& stack, const Model& m, bool through_attack = false) {
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0.2, 0.8), d(x.shape(), 0.0);
  const std::vector<int> y{1, 2};
  const auto ids = iota_ids(2);
  const auto before = Tape::backward_passes();
  if (through_attack) {
    AttackSpec s;
    s.iterations = 3;
    s.method = p;
    s.stack = stack;
    run_attack(m, x, y, s);
  } else {
    VtState vt;
    output_space_gradient(p, {&m}, x, d, y, stack, {1, ids, 0, 0, 0.03, &x}, 0.03, &vt);
  }
  return Tape::backward_passes() - before;
}

}  // namespace

TEST(Parity, VtMatchesVtBaselineBackpropCount) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  for (std::size_t n : {1u, 4u, 20u}) {
    MethodParams vt, base;
    vt.kind = MethodKind::VT;
    base.kind = MethodKind::VT_baseline;
    vt.n_agg = base.n_agg = n;
    EXPECT_EQ(backprops(vt, {}, m), n + 1);
    EXPECT_EQ(backprops(vt, {}, m), backprops(base, {}, m));
    EXPECT_EQ(backprops(vt, {}, m, true), backprops(base, {}, m, true));
  }
}

TEST(Parity, TaigMatchesTaigBaselineBackpropCount) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  for (std::size_t n : {1u, 5u, 20u}) {
    MethodParams t, base;
    t.kind = MethodKind::TAIG;
    base.kind = MethodKind::TAIG_baseline;
    t.n_agg = base.n_agg = n;
    EXPECT_EQ(backprops(t, {}, m), n);
    EXPECT_EQ(backprops(t, {}, m), backprops(base, {}, m));
    const AugmentStack admix({AugmentKind::ADMIX});
    EXPECT_EQ(backprops(t, admix, m, true), backprops(base, admix, m, true));
  }
}

TEST(Parity, IrBaselineUsesConfiguredCopies) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  MethodParams p;
  p.kind = MethodKind::IR_baseline;
  p.n_agg = 6;
  AugmentParams ap;
  ap.dp_patch = 2;
  EXPECT_EQ(backprops(p, AugmentStack({}, ap), m), 6u);
}

TEST(OutputSpace, TaigSingleStepIsFullScaleGradient) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0.2, 0.8), d = random_tensor({2, 3, 8, 8}, 2, -0.01, 0.01);
  const std::vector<int> y{1, 2};
  const auto ids = iota_ids(2);
  MethodParams p;
  p.kind = MethodKind::TAIG;
  p.n_agg = 1;
  const AugmentContext c{1, ids, 0, 0, 0.03};
  const Tensor g = output_space_gradient(p, {&m}, x, d, y, {}, c, 0.03, nullptr).grad;
  EXPECT_EQ(g, single_gradient({&m}, x, d, y, {}, c, output_loss(MethodKind::none, y)).grad);
}

TEST(OutputSpace, VtCarriesVarianceAcrossIterations) {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0.2, 0.8), d(x.shape(), 0.0);
  const std::vector<int> y{1, 2};
  const auto ids = iota_ids(2);
  MethodParams p;
  p.kind = MethodKind::VT;
  p.n_agg = 3;
  VtState vt;
  const LossFn ce = output_loss(MethodKind::none, y);
  const Tensor plain = single_gradient({&m}, x, d, y, {}, {1, ids}, ce).grad;
  const Tensor first = output_space_gradient(p, {&m}, x, d, y, {}, {1, ids, 0}, 0.03, &vt).grad;
  EXPECT_EQ(first, plain);  // v starts at zero
  const Tensor v = vt.v;
  const Tensor second = output_space_gradient(p, {&m}, x, d, y, {}, {1, ids, 1}, 0.03, &vt).grad;
  Tensor want = plain;
  want += v;
  EXPECT_EQ(second, want);
  EXPECT_THROW(output_space_gradient(p, {&m}, x, d, y, {}, {1, ids}, 0.03, nullptr), Error);
}

TEST(OutputSpace, SeAveragesBlockLogitsOnVit) {
  const Model vit = small_model(ArchKind::toy_vit, 8), cnn = small_model(ArchKind::toy_cnn, 8);
  const Tensor x = random_tensor({2, 3, 8, 8}, 1, 0.2, 0.8), d(x.shape(), 0.0);
  const std::vector<int> y{1, 2};
  const auto ids = iota_ids(2);
  MethodParams p;
  p.kind = MethodKind::SE;
  const auto g = output_space_gradient(p, {&vit}, x, d, y, {}, {1, ids}, 0.03, nullptr);
  EXPECT_TRUE(g.grad.all_finite());
  EXPECT_THROW(output_space_gradient(p, {&cnn}, x, d, y, {}, {1, ids}, 0.03, nullptr), Error);
  Tape tape;
  ForwardOptions o;
  o.block_logits = true;
  const auto fr = vit.forward(tape, tape.constant(x), o);
  ASSERT_EQ(fr.block_logits.size(), vit.spec().depth);
  double want = 0;
  for (const auto& bl : fr.block_logits) want += cross_entropy_rows(bl, y).value()[0];
  EXPECT_NEAR(g.loss[0], want / static_cast<double>(fr.block_logits.size()), 1e-12);
}
