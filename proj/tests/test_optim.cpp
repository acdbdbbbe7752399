#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "hivit/optim.hpp"
#include "hivit/ops.hpp"
#include "test_util.hpp"

using namespace hivit;

namespace {

NamedParam<double> param(const std::string& name, std::vector<double> v, bool decay = true, int layer = 0) {
  const auto n = static_cast<std::int64_t>(v.size());
  return {name, Tensor<double>::from_data({n}, std::move(v), true), layer, decay};
}

}  // namespace

TEST_CASE("AdamW: zero gradient leaves only decoupled decay") {
  ParamList<double> ps{param("w", {1.0, -2.0})};
  ps[0].tensor.mutable_grad();  // zeros
  OptimState<double> st;
  st.init(ps);
  adamw_step(ps, st, 0.1, AdamWConfig{0.9, 0.999, 1e-8, 0.05});
  CHECK(ps[0].tensor.data()[0] == doctest::Approx(0.995).epsilon(1e-15));
  CHECK(ps[0].tensor.data()[1] == doctest::Approx(-1.99).epsilon(1e-15));
}

TEST_CASE("AdamW: first step moves each coordinate by lr against the gradient sign") {
  ParamList<double> ps{param("b", {0.0, 0.0, 0.0}, false)};
  auto g = ps[0].tensor.mutable_grad();
  g[0] = 3.0;
  g[1] = -1e-3;
  g[2] = 0.0;
  OptimState<double> st;
  st.init(ps);
  const std::vector<double> scale{0.5};
  adamw_step(ps, st, 0.01, AdamWConfig{}, scale);
  // Bias-corrected m / sqrt(v) = sign(g) on the first step; lr scaled by 0.5.
  CHECK(ps[0].tensor.data()[0] == doctest::Approx(-0.005).epsilon(1e-6));
  CHECK(ps[0].tensor.data()[1] == doctest::Approx(0.005).epsilon(1e-4));
  CHECK(ps[0].tensor.data()[2] == 0.0);
}

TEST_CASE("AdamW solves a least-squares problem in 100 steps") {
  std::mt19937_64 rng(1);
  const auto a = testutil::randn<double>({20, 4}, rng);
  const std::vector<double> truth{1.0, -0.5, 2.0, 0.25};
  std::vector<double> bv(20, 0.0);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 4; ++j) bv[i] += a.data()[i * 4 + j] * truth[j];
  const auto b = Tensor<double>::from_data({20, 1}, bv);
  ParamList<double> ps{{"x", Tensor<double>::zeros({4, 1}, true), 0, false}};
  OptimState<double> st;
  st.init(ps);
  double loss = 0;
  for (int step = 0; step < 100; ++step) {
    zero_grads(ps);
    const auto r = add(matmul(a, ps[0].tensor), scale(b, -1.0));
    const auto l = mean(mul(r, r));
    loss = l.item();
    backward(l);
    adamw_step(ps, st, 0.1, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  }
  CHECK(loss < 1e-3);
  for (int j = 0; j < 4; ++j) CHECK(ps[0].tensor.data()[j] == doctest::Approx(truth[j]).epsilon(0.02));
}

TEST_CASE("optimizers refuse non-finite gradients before touching anything") {
  ParamList<double> ps{param("a", {1.0}), param("b", {2.0})};
  ps[0].tensor.mutable_grad()[0] = 1.0;
  ps[1].tensor.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  OptimState<double> st;
  st.init(ps);
  try {
    adamw_step(ps, st, 0.1, AdamWConfig{});
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.name == "b");
  }
  CHECK(ps[0].tensor.data()[0] == 1.0);
  CHECK(st.step == 0);
  CHECK_THROWS_AS(lars_step(ps, st, 0.1, LarsConfig{}), NonFiniteGradient);
  CHECK(ps[0].tensor.data()[0] == 1.0);
}

TEST_CASE("frozen or gradient-free parameters are skipped") {
  ParamList<double> ps{param("frozen", {1.0}), param("untouched", {1.0})};
  ps[0].tensor.mutable_grad()[0] = 5.0;
  ps[0].tensor.set_requires_grad(false);
  OptimState<double> st;
  st.init(ps);
  adamw_step(ps, st, 0.1, AdamWConfig{});
  CHECK(ps[0].tensor.data()[0] == 1.0);
  CHECK(ps[1].tensor.data()[0] == 1.0);
}

TEST_CASE("LARS trust ratio on matrices, plain steps elsewhere") {
  // |w| = 2, |g| = 0.5: the step has length lr * |w| whatever the gradient scale.
  ParamList<double> ps{param("w", {2.0, 0.0}, true), param("bias", {1.0}, false)};
  auto g = ps[0].tensor.mutable_grad();
  g[0] = 0.3;
  g[1] = 0.4;
  ps[1].tensor.mutable_grad()[0] = 0.5;
  OptimState<double> st;
  st.init(ps);
  lars_step(ps, st, 0.1, LarsConfig{0.0, 0.0, 0.0});
  CHECK(ps[0].tensor.data()[0] == doctest::Approx(2.0 - 0.1 * 4 * 0.3));
  CHECK(ps[0].tensor.data()[1] == doctest::Approx(-0.1 * 4 * 0.4));
  CHECK(ps[1].tensor.data()[0] == doctest::Approx(1.0 - 0.05));
  // Momentum accumulates the scaled update.
  lars_step(ps, st, 0.1, LarsConfig{0.9, 0.0, 0.0});
  CHECK(st.m[1][0] == doctest::Approx(0.9 * 0.5 + 0.5));
}

TEST_CASE("layer-wise multipliers") {
  CHECK(layer_multiplier(-1, 2, 0.5) == 0.125);
  CHECK(layer_multiplier(0, 2, 0.5) == 0.25);
  CHECK(layer_multiplier(1, 2, 0.5) == 0.5);
  CHECK(layer_multiplier(2, 2, 0.5) == 1.0);
  CHECK(layer_multiplier(-1, 24, 0.65) == doctest::Approx(std::pow(0.65, 25)).epsilon(1e-14));
  for (int l = -1; l <= 24; ++l) CHECK(layer_multiplier(l, 24, 1.0) == 1.0);
  CHECK_THROWS_AS(layer_multiplier(0, 2, 0.0), ContractError);
  CHECK_THROWS_AS(layer_multiplier(0, 2, 1.5), ContractError);
  ParamList<double> ps{param("e", {0}, true, -1), param("h", {0}, true, 2)};
  const auto m = layerwise_multipliers(ps, 2, 0.5);
  CHECK(m == std::vector<double>{0.125, 1.0});
}

TEST_CASE("warmup then cosine") {
  const Schedule s{1.0, 5, 20, 0.0};
  CHECK(lr_at(s, 0) == 0.0);
  CHECK(lr_at(s, 2.5) == doctest::Approx(0.5));
  CHECK(lr_at(s, 5) == doctest::Approx(1.0));
  CHECK(lr_at(s, 12.5) == doctest::Approx(0.5));
  CHECK(lr_at(s, 20) == doctest::Approx(0.0));
  CHECK(lr_at(s, 25) == doctest::Approx(0.0));
  const Schedule floor{1.0, 0, 10, 0.1};
  CHECK(lr_at(floor, 10) == doctest::Approx(0.1));
  CHECK(lr_at(floor, 5) == doctest::Approx(0.55));
}
