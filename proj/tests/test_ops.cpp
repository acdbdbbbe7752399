#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hivit/ops.hpp"
#include "test_util.hpp"

using namespace hivit;
using testutil::grad_check;
using testutil::randn;
using TL = std::vector<Tensor<double>>;

TEST_CASE("matmul gradients match central differences, with broadcasting") {
  std::mt19937_64 rng(1);
  auto a = randn<double>({2, 3, 4, 5}, rng, true);
  auto b = randn<double>({3, 5, 6}, rng, true);
  CHECK(grad_check({a, b}, [](const TL& t) { return matmul(t[0], t[1]); }) < 1e-6);
  auto c = randn<double>({1, 4, 2}, rng, true);
  auto d = randn<double>({3, 2, 3}, rng, true);
  CHECK(grad_check({c, d}, [](const TL& t) { return matmul(t[0], t[1]); }) < 1e-6);
}

TEST_CASE("matmul forward equals explicit sums") {
  const auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = Tensor<double>::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  const auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  const std::vector<double> want{58, 64, 139, 154};
  for (int i = 0; i < 4; ++i) CHECK(c.data()[i] == want[i]);
}

TEST_CASE("softmax gradient matches central differences") {
  std::mt19937_64 rng(2);
  auto x = randn<double>({3, 4, 7}, rng, true, 3.0);
  CHECK(grad_check({x}, [](const TL& t) { return softmax_lastdim(t[0]); }) < 1e-6);
}

TEST_CASE("gelu gradient matches central differences") {
  std::mt19937_64 rng(3);
  auto x = randn<double>({5, 9}, rng, true, 2.0);
  CHECK(grad_check({x}, [](const TL& t) { return gelu(t[0]); }) < 1e-5);
}

TEST_CASE("layer_norm: gradients, zero mean, unit variance, shift and scale invariance") {
  std::mt19937_64 rng(4);
  auto x = randn<double>({2, 5, 8}, rng, true, 2.0);
  auto g = randn<double>({8}, rng, true);
  auto b = randn<double>({8}, rng, true);
  CHECK(grad_check({x, g, b}, [](const TL& t) { return layer_norm(t[0], t[1], t[2]); }) < 1e-6);

  const auto ones = Tensor<double>::full({8}, 1.0);
  const auto zeros = Tensor<double>::zeros({8});
  const auto y = layer_norm(x, ones, zeros, 1e-300);
  for (int r = 0; r < 10; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 8; ++c) m += y.data()[r * 8 + c];
    m /= 8;
    for (int c = 0; c < 8; ++c) v += (y.data()[r * 8 + c] - m) * (y.data()[r * 8 + c] - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto shifted = x.detach();
  for (auto& v : shifted.data()) v = 3.0 * v + 11.0;
  const auto y2 = layer_norm(shifted, ones, zeros, 1e-300);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y2.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-10));
}

TEST_CASE("elementwise and shape ops: gradients") {
  std::mt19937_64 rng(5);
  auto a = randn<double>({2, 3, 4}, rng, true);
  auto b = randn<double>({3, 4}, rng, true);
  auto c = randn<double>({2, 3, 4}, rng, true);
  CHECK(grad_check({a, b}, [](const TL& t) { return add(t[0], t[1]); }) < 1e-6);
  CHECK(grad_check({a, c}, [](const TL& t) { return mul(t[0], t[1]); }) < 1e-6);
  CHECK(grad_check({a}, [](const TL& t) { return scale(t[0], -2.5); }) < 1e-6);
  CHECK(grad_check({a}, [](const TL& t) { return transpose_last2(t[0]); }) < 1e-6);
  CHECK(grad_check({a}, [](const TL& t) { return reshape(t[0], {6, 4}); }) < 1e-6);
  CHECK(grad_check({a}, [](const TL& t) { return mean_tokens(t[0]); }) < 1e-6);
  CHECK(grad_check({a}, [](const TL& t) { return mean(t[0]); }) < 1e-6);
  const std::vector<double> f{0.0, 2.0};
  CHECK(grad_check({a}, [&](const TL& t) { return scale_rows(t[0], std::span<const double>(f)); }) < 1e-6);
  auto w = randn<double>({4, 5}, rng, true);
  auto bias = randn<double>({5}, rng, true);
  CHECK(grad_check({a, w, bias}, [](const TL& t) { return linear(t[0], t[1], t[2]); }) < 1e-6);
  CHECK(grad_check({a, w}, [](const TL& t) { return linear(t[0], t[1], Tensor<double>()); }) < 1e-6);
}

TEST_CASE("attention layout ops: gradients and layout") {
  std::mt19937_64 rng(6);
  auto qkv = randn<double>({2, 3, 3 * 2 * 4}, rng, true);
  for (int part = 0; part < 3; ++part) {
    CHECK(grad_check({qkv}, [part](const TL& t) { return select_heads(t[0], part, 2); }) < 1e-6);
    const auto h = select_heads(qkv, part, 2);
    CHECK(h.shape() == Shape{2, 2, 3, 4});
    // [b=1, head=1, n=2, d=3] comes from qkv[1, 2, part*8 + 1*4 + 3].
    CHECK(h.data()[((1 * 2 + 1) * 3 + 2) * 4 + 3] == qkv.data()[(1 * 3 + 2) * 24 + part * 8 + 4 + 3]);
  }
  auto x = randn<double>({2, 2, 3, 4}, rng, true);
  CHECK(grad_check({x}, [](const TL& t) { return merge_heads(t[0]); }) < 1e-6);
  auto table = randn<double>({9, 2}, rng, true);
  const std::vector<std::int64_t> idx{0, 4, 8, 3, 3, 1, 2, 7};
  CHECK(grad_check({table}, [&](const TL& t) { return bias_lookup(t[0], std::span<const std::int64_t>(idx), 2); }) <
        1e-6);
  const auto out = bias_lookup(table, std::span<const std::int64_t>(idx), 2);
  CHECK(out.shape() == Shape{2, 2, 4});
  CHECK(out.data()[(1 * 2 + 1) * 4 + 2] == table.data()[2 * 2 + 1]);
}

TEST_CASE("gather_units equals multiplication by a selection matrix") {
  std::mt19937_64 rng(7);
  auto x = randn<double>({2, 6, 5}, rng, true);
  const std::vector<std::int64_t> idx{5, 0, 3};
  std::vector<double> sel(3 * 6, 0.0);
  for (int i = 0; i < 3; ++i) sel[i * 6 + idx[i]] = 1.0;
  const auto s = Tensor<double>::from_data({3, 6}, sel);
  const auto g = gather_units(x, std::span<const std::int64_t>(idx), 3);
  const auto m = matmul(s, x);
  REQUIRE(g.shape() == m.shape());
  for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(g.data()[i] == m.data()[i]);
  CHECK(grad_check({x}, [&](const TL& t) { return gather_units(t[0], std::span<const std::int64_t>(idx), 3); }) <
        1e-6);
  const std::vector<std::int64_t> per{1, 2, 4, 0, 5, 3};
  CHECK(grad_check({x}, [&](const TL& t) { return gather_units(t[0], std::span<const std::int64_t>(per), 3); }) <
        1e-6);
}

TEST_CASE("gather_units rejects bad index lists") {
  std::mt19937_64 rng(8);
  auto x = randn<double>({1, 4, 2}, rng);
  const std::vector<std::int64_t> out_of_range{0, 4};
  const std::vector<std::int64_t> dup{1, 1};
  CHECK_THROWS_AS(gather_units(x, std::span<const std::int64_t>(out_of_range), 2), IndexError);
  CHECK_THROWS_AS(gather_units(x, std::span<const std::int64_t>(dup), 2), IndexError);
}

TEST_CASE("scatter of a gather equals replacing the complement") {
  std::mt19937_64 rng(9);
  auto x = randn<double>({2, 6, 2, 3}, rng, true);
  auto fill = randn<double>({2, 3}, rng, true);
  const std::vector<std::int64_t> vis{1, 4}, hidden{0, 2, 3, 5};
  const auto s = scatter_units(gather_units(x, std::span<const std::int64_t>(vis), 2),
                               std::span<const std::int64_t>(vis), 6, fill);
  const auto r = replace_units(x, std::span<const std::int64_t>(hidden), 4, fill);
  REQUIRE(s.shape() == r.shape());
  for (std::int64_t i = 0; i < s.numel(); ++i) CHECK(s.data()[i] == r.data()[i]);
  auto y = randn<double>({2, 2, 2, 3}, rng, true);
  CHECK(grad_check({y, fill}, [&](const TL& t) {
          return scatter_units(t[0], std::span<const std::int64_t>(vis), 6, t[1]);
        }) < 1e-6);
  CHECK(grad_check({x, fill}, [&](const TL& t) {
          return replace_units(t[0], std::span<const std::int64_t>(hidden), 4, t[1]);
        }) < 1e-6);
}

TEST_CASE("space_to_depth neighbour order and gradient") {
  std::vector<double> d(16);
  for (int i = 0; i < 16; ++i) d[i] = i;
  // [B=1, M=1, 4, 4, D=1]
  auto x = Tensor<double>::from_data({1, 1, 4, 4, 1}, d, true);
  const auto y = space_to_depth(x);
  CHECK(y.shape() == Shape{1, 1, 2, 2, 4});
  // Output cell (0, 1): rows 0-1, cols 2-3 in order (0,0), (1,0), (0,1), (1,1).
  const std::vector<double> want{2, 6, 3, 7};
  for (int i = 0; i < 4; ++i) CHECK(y.data()[4 + i] == want[i]);
  CHECK(grad_check({x}, [](const TL& t) { return space_to_depth(t[0]); }) < 1e-6);
}

TEST_CASE("patchify_units layout: unit-major, (channel, row, col) patch vectors") {
  // 2 channels, 4x4 image, unit 2, inner 1 -> M = 4 units of 2x2 patches of 2 values.
  std::vector<double> d(32);
  for (int i = 0; i < 32; ++i) d[i] = i;
  auto img = Tensor<double>::from_data({1, 2, 4, 4}, d, true);
  const auto p = patchify_units(img, 2, 1);
  CHECK(p.shape() == Shape{1, 4, 2, 2, 2});
  // Unit 1 is rows 0-1, cols 2-3; its patch (1, 0) is pixel (1, 2).
  const std::int64_t off = ((1 * 2 + 1) * 2 + 0) * 2;
  CHECK(p.data()[off] == 1 * 4 + 2);
  CHECK(p.data()[off + 1] == 16 + 1 * 4 + 2);
  const auto q = patchify_units(img, 4, 2);
  CHECK(q.shape() == Shape{1, 1, 2, 2, 8});
  // Patch (0, 1): channel 0 rows 0-1 cols 2-3, then channel 1.
  const std::vector<double> want{2, 3, 6, 7, 18, 19, 22, 23};
  for (int i = 0; i < 8; ++i) CHECK(q.data()[8 + i] == want[i]);
  CHECK(grad_check({img}, [](const TL& t) { return patchify_units(t[0], 2, 1); }) < 1e-6);
}

TEST_CASE("cross_entropy and masked_mse values and gradients") {
  const auto z = Tensor<double>::zeros({3, 5}, true);
  const std::vector<int> labels{0, 4, 2};
  CHECK(cross_entropy(z, std::span<const int>(labels)).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  std::mt19937_64 rng(10);
  auto logits = randn<double>({3, 5}, rng, true, 2.0);
  CHECK(grad_check({logits}, [&](const TL& t) { return cross_entropy(t[0], std::span<const int>(labels)); }) < 1e-6);

  const auto pred = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4}, true);
  const std::vector<double> target{0, 0, 3, 3}, w{1, 0};
  // Only unit 0 is scored: (1 + 4) / 2.
  CHECK(masked_mse(pred, std::span<const double>(target), std::span<const double>(w)).item() == 2.5);
  const std::vector<double> w2{1, 1};
  CHECK(masked_mse(pred, std::span<const double>(target), std::span<const double>(w2)).item() ==
        doctest::Approx((2.5 + 0.5) / 2));
  auto p2 = randn<double>({2, 3, 4}, rng, true);
  const auto t2 = randn<double>({2, 3, 4}, rng);
  const std::vector<double> w3{1, 0, 1, 0, 1, 1};
  CHECK(grad_check({p2}, [&](const TL& t) {
          return masked_mse(t[0], std::span<const double>(t2.data()), std::span<const double>(w3));
        }) < 1e-6);
}

TEST_CASE("backward: chain rule, accumulation, no-grad and contract errors") {
  auto x = Tensor<double>::from_data({2}, {2.0, -1.0}, true);
  auto y = Tensor<double>::from_data({2}, {3.0, 5.0}, true);
  // z = sum(x * y + x): dz/dx = y + 1, dz/dy = x.
  auto z = sum(add(mul(x, y), x));
  backward(z);
  CHECK(x.grad()[0] == 4.0);
  CHECK(x.grad()[1] == 6.0);
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == -1.0);
  backward(z);
  CHECK(x.grad()[0] == 8.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());

  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const auto w = mul(x, y);
    CHECK(w.is_leaf());
    CHECK_FALSE(w.requires_grad());
  }
  CHECK(grad_enabled());
  CHECK_THROWS_AS(backward(mul(x, y)), ContractError);
  CHECK_THROWS_AS(mul(x, Tensor<double>::zeros({3})), ShapeError);
}

TEST_CASE("a tensor used twice receives both gradient contributions") {
  auto x = Tensor<double>::from_data({3}, {1.0, 2.0, 3.0}, true);
  backward(sum(mul(x, x)));
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0 * (i + 1));
}
