#include <gtest/gtest.h>

#include <cmath>

#include "owm/numerics/gradcheck.hpp"
#include "owm/pooling.hpp"

using namespace owm;
using namespace owm::pooling;

namespace {

template <class T>
Array<T> vals(Shape s, std::vector<T> v) {
  return Array<T>(std::move(s), std::move(v));
}

// Pooling parameters with a nonzero learned scorer so the LEARN branch is
// not trivially uniform.
ParamSet<double> pooling_params(int width, std::uint64_t seed) {
  ParamSet<double> ps;
  Rng rng(seed);
  init_pooling(ps, width, rng);
  for (View v : kViews) {
    ps.get(scorer_prefix(v) + ".fc2.weight") = numerics::normal_array<double>({width / 2, 1}, 0.5, rng);
    ps.get(alpha_name(v)) = numerics::normal_array<double>({3}, 0.5, rng);
  }
  return ps;
}

Array<double> pool(const ParamSet<double>& ps, const Array<double>& grid, const PoolingConfig& cfg) {
  Tape<double> tape;
  BoundParams<double> p(tape, ps);
  return pool_view(TokenGrid<double>{tape.constant(grid), View::R}, p, cfg).z.value();
}

}  // namespace

TEST(ScoreTokens, MaxAndSumOfSingleToken) {
  Tape<double> tape;
  auto g = tape.constant(vals<double>({1, 1, 1, 3}, {1, 2, 3}));
  EXPECT_EQ(score_tokens<double>(g, Strategy::Max, std::nullopt).value()[0], 3.0);
  EXPECT_EQ(score_tokens<double>(g, Strategy::Sum, std::nullopt).value()[0], 6.0);
}

TEST(ScoreTokens, LearnOnZeroTokenIsZeroAndRequiresScorer) {
  ParamSet<double> ps;
  Rng rng(1);
  init_pooling(ps, 4, rng);
  Tape<double> tape;
  BoundParams<double> p(tape, ps);
  auto g = tape.constant(Array<double>(Shape{1, 1, 2, 4}, 0.0));
  const auto s = score_tokens(g, Strategy::Learn, std::optional(scorer_for(p, View::W1))).value();
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_THROW(score_tokens<double>(g, Strategy::Learn, std::nullopt), ConfigError);
}

TEST(TokenWeights, ClosedFormExamples) {
  Tape<double> tape;
  auto s = tape.constant(vals<double>({1, 1, 2}, {1, 0}));
  const auto w = token_weights(s, 1.0).value();
  EXPECT_NEAR(w[0], 0.7311, 1e-4);
  EXPECT_NEAR(w[1], 0.2689, 1e-4);
  EXPECT_GE(token_weights(s, 0.01).value()[0], 1 - 1e-6);
  const auto eq = token_weights(tape.constant(vals<double>({1, 1, 4}, {2, 2, 2, 2})), 0.3).value();
  for (double x : eq.vec()) EXPECT_DOUBLE_EQ(x, 0.25);
}

TEST(TokenWeights, NonPositiveTauRaises) {
  Tape<double> tape;
  auto s = tape.constant(vals<double>({1, 1, 2}, {1, 0}));
  EXPECT_THROW(token_weights(s, 0.0), ConfigError);
  EXPECT_THROW(token_weights(s, -1.0), ConfigError);
  PoolingConfig cfg;
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TokenWeights, RowsOnSimplexAcrossTemperatures) {
  Rng rng(4);
  Tape<double> tape;
  auto s = tape.constant(numerics::normal_array<double>({2, 3, 16}, 3.0, rng));
  for (double tau : {1e-3, 1e-1, 1.0, 1e3}) {
    const auto w = token_weights(s, tau).value();
    for (int r = 0; r < 6; ++r) {
      double sum = 0;
      for (int n = 0; n < 16; ++n) sum += w[static_cast<std::size_t>(r * 16 + n)];
      EXPECT_NEAR(sum, 1.0, 1e-6) << "tau " << tau;
    }
  }
}

TEST(PoolBranch, HandExamples) {
  Tape<double> tape;
  auto g1 = tape.constant(vals<double>({1, 1, 2, 1}, {2, 4}));
  auto w1 = tape.constant(vals<double>({1, 1, 2}, {0.25, 0.75}));
  EXPECT_DOUBLE_EQ(pool_branch(g1, w1, Strategy::Sum).value()[0], 3.5);
  auto g2 = tape.constant(vals<double>({1, 1, 2, 2}, {2, -1, 1, 3}));
  auto w2 = tape.constant(vals<double>({1, 1, 2}, {0.5, 0.5}));
  const auto m = pool_branch(g2, w2, Strategy::Max).value();
  EXPECT_DOUBLE_EQ(m[0], 1.0);
  EXPECT_DOUBLE_EQ(m[1], 1.5);
  EXPECT_THROW(pool_branch(g2, tape.constant(vals<double>({1, 1, 3}, {1, 1, 1})), Strategy::Sum), StructuralError);
}

TEST(PoolBranch, UniformSumIsMean) {
  Rng rng(2);
  Tape<double> tape;
  const auto g = numerics::normal_array<double>({1, 1, 5, 3}, 1.0, rng);
  const auto p = pool_branch(tape.constant(g), tape.constant(Array<double>(Shape{1, 1, 5}, 0.2)), Strategy::Sum)
                     .value();
  for (int d = 0; d < 3; ++d) {
    double mean = 0;
    for (int n = 0; n < 5; ++n) mean += g[static_cast<std::size_t>(n * 3 + d)] / 5;
    EXPECT_NEAR(p[static_cast<std::size_t>(d)], mean, 1e-12);
  }
}

TEST(FuseViews, EqualAlphaGivesMeanAndSaturatedAlphaPicksFirst) {
  Tape<double> tape;
  BranchPools<double> pools{tape.constant(vals<double>({1, 1, 2}, {1, 2})),
                            tape.constant(vals<double>({1, 1, 2}, {3, 4})),
                            tape.constant(vals<double>({1, 1, 2}, {5, 9}))};
  PoolingConfig cfg;
  cfg.tau = 0.1;
  auto z = fuse_views(pools, tape.constant(vals<double>({3}, {0.7, 0.7, 0.7})), cfg, View::R).z;
  EXPECT_EQ(z.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_NEAR(z.value()[0], 3.0, 1e-12);
  EXPECT_NEAR(z.value()[1], 5.0, 1e-12);
  auto first = fuse_views(pools, tape.constant(vals<double>({3}, {10, 0, 0})), cfg, View::R).z.value();
  EXPECT_NEAR(first[0], 1.0, 1e-6);
  EXPECT_NEAR(first[1], 2.0, 1e-6);
}

TEST(FusionWeights, BetaOnSimplexAndRespectsDisabledBranches) {
  ParamSet<double> ps = pooling_params(8, 3);
  PoolingConfig cfg;
  const auto b = fusion_beta(ps, View::W2, cfg);
  EXPECT_NEAR(b[0] + b[1] + b[2], 1.0, 1e-12);
  for (double x : b) EXPECT_GT(x, 0.0);
  cfg.branches = {true, false, true};
  const auto b2 = fusion_beta(ps, View::W2, cfg);
  EXPECT_EQ(b2[1], 0.0);
  EXPECT_NEAR(b2[0] + b2[2], 1.0, 1e-12);
  cfg.branches = {false, false, false};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(PoolView, SingleTokenIsIdentity) {
  const auto ps = pooling_params(8, 5);
  Rng rng(7);
  const auto g = numerics::normal_array<double>({2, 3, 1, 8}, 1.0, rng);
  PoolingConfig cfg;
  cfg.tau = 0.5;
  const auto z = pool(ps, g, cfg);
  ASSERT_EQ(z.shape(), (Shape{2, 3, 1, 8}));
  // The MAX branch of a single token w*x with w = 1 is x itself.
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(z[i], g[i], 1e-12);
}

TEST(PoolView, InvariantToTokenPermutation) {
  const auto ps = pooling_params(8, 6);
  Rng rng(8);
  const auto g = numerics::normal_array<double>({1, 2, 6, 8}, 1.0, rng);
  Array<double> perm = g;
  const std::vector<int> order{3, 0, 5, 1, 4, 2};
  for (int f = 0; f < 2; ++f)
    for (int n = 0; n < 6; ++n)
      for (int d = 0; d < 8; ++d)
        perm[static_cast<std::size_t>((f * 6 + n) * 8 + d)] = g[static_cast<std::size_t>((f * 6 + order[static_cast<std::size_t>(n)]) * 8 + d)];
  PoolingConfig cfg;
  const auto a = pool(ps, g, cfg), b = pool(ps, perm, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5 * std::max(1.0, std::abs(a[i])));
}

TEST(PoolView, TemperatureLimits) {
  Rng rng(9);
  Tape<double> tape;
  const auto g = numerics::normal_array<double>({1, 1, 4, 3}, 1.0, rng);
  auto grid = tape.constant(g);
  auto scores = score_tokens<double>(grid, Strategy::Sum, std::nullopt);
  const auto hot = pool_branch(grid, token_weights(scores, 1e6), Strategy::Sum).value();
  const auto cold = pool_branch(grid, token_weights(scores, 1e-4), Strategy::Sum).value();
  int top = 0;
  for (int n = 1; n < 4; ++n)
    if (scores.value()[static_cast<std::size_t>(n)] > scores.value()[static_cast<std::size_t>(top)]) top = n;
  for (int d = 0; d < 3; ++d) {
    double mean = 0;
    for (int n = 0; n < 4; ++n) mean += g[static_cast<std::size_t>(n * 3 + d)] / 4;
    EXPECT_NEAR(hot[static_cast<std::size_t>(d)], mean, 1e-4);
    EXPECT_NEAR(cold[static_cast<std::size_t>(d)], g[static_cast<std::size_t>(top * 3 + d)], 1e-4);
  }
}

TEST(PoolView, OneTokenPerFrameForSixteenAndTwoFiftySix) {
  const auto ps = pooling_params(8, 1);
  Rng rng(1);
  for (int n : {16, 256}) {
    const auto z = pool(ps, numerics::normal_array<double>({2, 3, n, 8}, 1.0, rng), PoolingConfig{});
    EXPECT_EQ(z.shape(), (Shape{2, 3, 1, 8}));
  }
}

TEST(PoolView, TopKEmitsKTokens) {
  const auto ps = pooling_params(8, 1);
  Rng rng(2);
  PoolingConfig cfg;
  cfg.tokens_per_view = 3;
  const auto g = numerics::normal_array<double>({1, 2, 16, 8}, 1.0, rng);
  EXPECT_EQ(pool(ps, g, cfg).shape(), (Shape{1, 2, 3, 8}));
  cfg.tokens_per_view = 17;
  EXPECT_THROW(pool(ps, g, cfg), ConfigError);
}

TEST(PoolView, FrozenAlphaGivesIdenticalBetaAcrossCalls) {
  const auto ps = pooling_params(8, 11);
  PoolingConfig cfg;
  EXPECT_EQ(fusion_beta(ps, View::R, cfg), fusion_beta(ps, View::R, cfg));
}

TEST(PoolView, GradientsPassCheckForGridScorerAndAlpha) {
  const auto ps = pooling_params(8, 12);
  Rng rng(13);
  const auto grid = numerics::normal_array<double>({1, 2, 4, 8}, 1.0, rng);
  const auto readout = numerics::normal_array<double>({1, 2, 1, 8}, 1.0, rng);
  std::vector<Array<double>> inputs{grid};
  std::vector<std::string> names;
  for (const auto& n : ps.names())
    if (n.rfind("pool.r.", 0) == 0) {
      names.push_back(n);
      inputs.push_back(ps.get(n));
    }
  PoolingConfig cfg;
  cfg.tau = 0.5;
  cfg.fusion_tau = 1.0;
  numerics::ScalarFn<double> f = [&](Tape<double>& tape, std::span<const Var<double>> v) {
    BoundParams<double> p(tape, names, v.subspan(1));
    auto z = pool_view(TokenGrid<double>{v[0], View::R}, p, cfg).z;
    return numerics::sum_all(numerics::mul(z, tape.constant(readout)));
  };
  const auto r = numerics::check_gradients("pool_view", f, inputs, 1e-5, 16, 4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}
