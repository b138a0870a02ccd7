#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "owm/numerics/gradcheck.hpp"
#include "owm/numerics/params.hpp"

using namespace owm;
using namespace owm::numerics;

namespace {

using V = Var<double>;

Array<double> arr(Shape s, std::vector<double> v) { return Array<double>(std::move(s), std::move(v)); }

ValueAndGradients<double> fb(ScalarFn<double> f, std::vector<Array<double>> in) {
  return forward_backward<double>(f, std::span<const Array<double>>(in));
}

}  // namespace

TEST(Array, RejectsNonFiniteAndBadExtents) {
  EXPECT_THROW(Array<float>(Shape{2}, std::vector<float>{1.0f, NAN}), NumericalError);
  EXPECT_THROW(Array<float>(Shape{2, 0}), StructuralError);
  EXPECT_THROW(Array<float>(Shape{3}, std::vector<float>{1, 2}), StructuralError);
  Array<float> a(Shape{2, 3}, 1.5f);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(a.reshaped({3, 2}).dim(0), 3);
}

TEST(ForwardBackward, SumOfSquares) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return sum_all(square(v[0])); }, {arr({2}, {1, 2})});
  EXPECT_DOUBLE_EQ(r.value, 5.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][0], 2.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][1], 4.0);
}

TEST(ForwardBackward, SoftmaxFirstEntry) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return slice(softmax(v[0], 0), 0, 0, 1); },
              {arr({2}, {0, 0})});
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  EXPECT_NEAR(r.gradients[0][0], 0.25, 1e-15);
  EXPECT_NEAR(r.gradients[0][1], -0.25, 1e-15);
}

TEST(ForwardBackward, AbsoluteValue) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return sum_all(abs(v[0])); }, {arr({2}, {3, -2})});
  EXPECT_DOUBLE_EQ(r.value, 5.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][0], 1.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][1], -1.0);
}

TEST(ForwardBackward, FrozenInputGetsZeroGradient) {
  std::vector<Array<double>> in{arr({2}, {1, 2}), arr({2}, {3, 4})};
  auto r = forward_backward<double>([](Tape<double>&, std::span<const V> v) { return sum_all(mul(v[0], v[1])); },
                                    std::span<const Array<double>>(in), {true, false});
  EXPECT_DOUBLE_EQ(r.gradients[0][0], 3.0);
  EXPECT_DOUBLE_EQ(r.gradients[1][0], 0.0);
}

TEST(ForwardBackward, ShapeMismatchNamesOpAndExtents) {
  try {
    fb([](Tape<double>&, std::span<const V> v) { return sum_all(add(v[0], v[1])); },
       {arr({2, 3}, {1, 2, 3, 4, 5, 6}), arr({2}, {1, 2})});
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2,3)"), std::string::npos) << msg;
  }
}

TEST(ForwardBackward, BroadcastTrailingSingleton) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return sum_all(mul(v[0], v[1])); },
              {arr({2, 3}, {1, 2, 3, 4, 5, 6}), arr({2, 1}, {10, 100})});
  EXPECT_DOUBLE_EQ(r.value, 10 * 6 + 100 * 15);
  EXPECT_DOUBLE_EQ(r.gradients[1][0], 6.0);
  EXPECT_DOUBLE_EQ(r.gradients[1][1], 15.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][4], 100.0);
}

TEST(ForwardBackward, DetachBlocksGradient) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return sum_all(mul(v[0], detach(v[0]))); },
              {arr({1}, {3})});
  EXPECT_DOUBLE_EQ(r.value, 9.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][0], 3.0);
}

TEST(FiniteDifference, Examples) {
  ScalarFn<double> sq = [](Tape<double>&, std::span<const V> v) { return sum_all(square(v[0])); };
  EXPECT_NEAR(finite_difference_gradient(sq, {arr({1}, {2})}, 1e-4)[0][0], 4.0, 1e-7);
  ScalarFn<double> ex = [](Tape<double>&, std::span<const V> v) { return sum_all(exp(v[0])); };
  EXPECT_NEAR(finite_difference_gradient(ex, {arr({1}, {0})}, 1e-4)[0][0], 1.0, 1e-8);
  ScalarFn<double> l1 = [](Tape<double>&, std::span<const V> v) { return sum_all(abs(v[0])); };
  const auto g = finite_difference_gradient(l1, {arr({2}, {3, -2})}, 1e-4);
  EXPECT_NEAR(g[0][0], 1.0, 1e-8);
  EXPECT_NEAR(g[0][1], -1.0, 1e-8);
}

TEST(FiniteDifference, NonFiniteValueRaises) {
  ScalarFn<double> f = [](Tape<double>&, std::span<const V> v) { return sum_all(exp(v[0])); };
  EXPECT_THROW(finite_difference_gradient(f, {arr({2}, {0, 800})}, 1e-3), NumericalError);
  EXPECT_THROW(finite_difference_gradient(f, {arr({1}, {1})}, 0.0), ConfigError);
}

TEST(CheckGradients, QuadraticPasses) {
  ScalarFn<double> f = [](Tape<double>&, std::span<const V> v) {
    return add(sum_all(square(v[0])), sum_all(mul(v[0], v[1])));
  };
  const auto r = check_gradients("quadratic", f, {arr({3}, {1, 2, 3}), arr({3}, {0.5, -1, 2})}, 1e-5, 16, 1);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.probe_count, 16);
  EXPECT_EQ(r.op_name, "quadratic");
}

TEST(CheckGradients, FactorTwoFaultFails) {
  ScalarFn<double> f = [](Tape<double>&, std::span<const V> v) {
    auto y = sum_all(square(v[0]));
    return add(y, sub(y, detach(y)));  // value unchanged, gradient doubled
  };
  const auto r = check_gradients("faulty", f, {arr({3}, {1, 2, 3})}, 1e-5, 16, 1);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_relative_error, 0.3);
}

TEST(CheckGradients, DeterministicGivenSeed) {
  ScalarFn<double> f = [](Tape<double>&, std::span<const V> v) { return sum_all(tanh(v[0])); };
  const auto a = check_gradients("tanh", f, {arr({4}, {0.1, 0.2, -0.3, 1})}, 1e-5, 8, 42);
  const auto b = check_gradients("tanh", f, {arr({4}, {0.1, 0.2, -0.3, 1})}, 1e-5, 8, 42);
  EXPECT_EQ(a.max_relative_error, b.max_relative_error);
}

TEST(CheckGradients, PassedMatchesTolerance) {
  ScalarFn<double> f = [](Tape<double>&, std::span<const V> v) { return sum_all(exp(v[0])); };
  const auto r = check_gradients("exp", f, {arr({2}, {0.1, 0.2})}, 1e-5, 4, 3);
  EXPECT_EQ(r.passed, r.max_relative_error <= 1e-5);
}

TEST(Softmax, OnSimplexAcrossScales) {
  Tape<float> tape;
  Rng rng(5);
  for (double scale : {1e-3, 1.0, 1e3}) {
    auto x = tape.constant(normal_array<float>({4, 7}, scale, rng));
    const auto y = softmax(x, -1).value();
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) {
        EXPECT_GE(y[static_cast<std::size_t>(r * 7 + c)], 0.0f);
        s += y[static_cast<std::size_t>(r * 7 + c)];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Ops, MatmulAndLayerNormValues) {
  Tape<double> tape;
  auto x = tape.constant(arr({2, 2}, {1, 2, 3, 4}));
  auto w = tape.constant(arr({2, 1}, {1, -1}));
  const auto y = matmul(x, w).value();
  EXPECT_DOUBLE_EQ(y[0], -1);
  EXPECT_DOUBLE_EQ(y[1], -1);
  auto ln = layer_norm(tape.constant(arr({1, 2}, {1, 3})), tape.constant(arr({2}, {1, 1})),
                       tape.constant(arr({2}, {0, 0})), 0.0);
  EXPECT_NEAR(ln.value()[0], -1.0, 1e-12);
  EXPECT_NEAR(ln.value()[1], 1.0, 1e-12);
}

TEST(Ops, MaxTieSendsGradientToLowestIndex) {
  auto r = fb([](Tape<double>&, std::span<const V> v) { return sum_all(max(v[0], 0)); }, {arr({3}, {2, 2, 1})});
  EXPECT_DOUBLE_EQ(r.gradients[0][0], 1.0);
  EXPECT_DOUBLE_EQ(r.gradients[0][1], 0.0);
}

TEST(Ops, ForwardIsBitDeterministic) {
  Rng rng(9);
  const auto a = normal_array<float>({8, 33}, 1.0, rng);
  const auto w = normal_array<float>({33, 17}, 1.0, rng);
  auto run = [&] {
    Tape<float> tape;
    return softmax(gelu(matmul(tape.constant(a), tape.constant(w))), -1).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Ops, GeluMatchesTanhApproximation) {
  Tape<double> tape;
  const auto y = gelu(tape.constant(arr({3}, {-1, 0, 2}))).value();
  auto ref = [](double x) {
    return 0.5 * x * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  };
  EXPECT_NEAR(y[0], ref(-1), 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
  EXPECT_NEAR(y[2], ref(2), 1e-12);
}

TEST(Params, BoundFromVarsSharesTapeVariables) {
  Tape<double> tape;
  std::vector<V> vars{tape.leaf(arr({1}, {2.0}))};
  BoundParams<double> p(tape, {"w"}, vars);
  EXPECT_EQ(p["w"].value()[0], 2.0);
  EXPECT_THROW(p["missing"], StructuralError);
}
