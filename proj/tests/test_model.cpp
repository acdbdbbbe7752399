#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "hivit/config.hpp"
#include "hivit/model.hpp"
#include "hivit/profile.hpp"
#include "hivit/verify.hpp"
#include "test_util.hpp"

using namespace hivit;
using testutil::randn;

namespace {

template <typename T>
bool same_bits(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(T)) == 0;
}

template <typename T>
void fill_random(Tensor<T> t, std::mt19937_64& rng, double s = 0.3) {
  std::normal_distribution<double> n(0, s);
  for (auto& v : t.data()) v = static_cast<T>(n(rng));
}

}  // namespace

TEST_CASE("toy shapes through every stage") {
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(1);
  const auto enc = init_encoder<float>(cfg, rng);
  const auto img = randn<float>({3, 3, 32, 32}, rng);
  const auto e = patch_embed(img, cfg, enc);
  CHECK(e.shape() == Shape{3, 16, 4, 4, 16});
  const auto l = local_stages(e, cfg, enc, {});
  CHECK(l.shape() == Shape{3, 16, 64});
  CHECK(encoder_forward_dense(img, cfg, enc).shape() == Shape{3, 16, 64});
  CHECK(supervised_forward(img, cfg, enc).shape() == Shape{3, 4});
  CHECK_THROWS_AS(patch_embed(randn<float>({1, 3, 16, 16}, rng), cfg, enc), ShapeError);
}

TEST_CASE("parameter list agrees with the analytic count") {
  for (const char* p : {"toy", "small", "T", "B"}) {
    auto cfg = make_config(p);
    std::mt19937_64 rng(2);
    auto enc = init_encoder<float>(cfg, rng);
    ParamList<float> params;
    collect_params(enc, cfg, params);
    std::int64_t n = 0;
    for (const auto& q : params) n += q.tensor.numel();
    CHECK(n == count_params_flops(cfg).total_params);
  }
}

TEST_CASE("layer indices and weight-decay flags") {
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(3);
  auto enc = init_encoder<float>(cfg, rng);
  ParamList<float> params;
  collect_params(enc, cfg, params);
  std::map<std::string, NamedParam<float>> by;
  for (const auto& p : params) by[p.name] = p;
  const int L = cfg.total_blocks();
  CHECK(by.at("encoder.patch_embed.w").layer == -1);
  CHECK(by.at("encoder.stage1.0.mlp1.fc1.w").layer == 0);
  CHECK(by.at("encoder.merge1.reduce.w").layer == 1);
  CHECK(by.at("encoder.stage2.0.mlp2.fc2.w").layer == 1);
  CHECK(by.at("encoder.main.0.attn.qkv.w").layer == 2);
  CHECK(by.at("encoder.main.3.mlp.fc2.w").layer == 5);
  CHECK(by.at("encoder.norm.gamma").layer == L);
  CHECK(by.at("head.w").layer == L);
  CHECK(by.at("encoder.main.0.attn.qkv.w").decay);
  CHECK_FALSE(by.at("encoder.main.0.attn.qkv.b").decay);
  CHECK_FALSE(by.at("encoder.main.0.norm1.gamma").decay);
  CHECK_FALSE(by.at("encoder.main.0.attn.rpe").decay);
}

TEST_CASE("initialisation: truncated normal weights, unit gamma, linear drop-path ramp") {
  auto cfg = make_config("toy");
  cfg.drop_path_rate = 0.3;
  std::mt19937_64 rng(4);
  auto enc = init_encoder<double>(cfg, rng);
  ParamList<double> params;
  collect_params(enc, cfg, params);
  double sq = 0;
  std::int64_t cnt = 0;
  for (const auto& p : params) {
    const bool gamma = p.name.ends_with("gamma");
    for (double v : p.tensor.data()) {
      if (gamma) CHECK(v == 1.0);
      else CHECK(std::abs(v) <= 0.04 + 1e-12);
      if (p.name.ends_with(".w")) sq += v * v, ++cnt;
    }
    if (p.name.ends_with(".b") || p.name.ends_with("beta")) {
      for (double v : p.tensor.data()) CHECK(v == 0.0);
    }
  }
  // Std of N(0, 0.02) truncated at 2 sigma is 0.02 * 0.8796.
  CHECK(std::sqrt(sq / cnt) == doctest::Approx(0.02 * 0.8796).epsilon(0.02));
  CHECK(enc.stage1[0].drop_path == 0.0);
  CHECK(enc.main.back().drop_path == doctest::Approx(0.3));
  CHECK(enc.stage2[0].drop_path == doctest::Approx(0.3 / 5));
}

TEST_CASE("early block with zeroed output layers is the identity") {
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(5);
  auto enc = init_encoder<float>(cfg, rng);
  auto blk = enc.stage1[0];
  for (auto* t : {&blk.mlp1.fc2.w, &blk.mlp1.fc2.b, &blk.mlp2.fc2.w, &blk.mlp2.fc2.b})
    for (auto& v : t->data()) v = 0;
  const auto x = randn<float>({2, 16, 4, 4, 16}, rng);
  CHECK(same_bits(early_block_forward(x, blk, cfg, {}), x));
}

TEST_CASE("attention over a single token ignores queries, keys and the bias") {
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(6);
  auto enc = init_encoder<double>(cfg, rng);
  auto blk = enc.main[0];
  fill_random(blk.attn.qkv.w, rng);
  fill_random(blk.attn.rpe_table, rng);
  const auto x = randn<double>({2, 1, 64}, rng);
  const std::vector<std::int64_t> units{5};
  const UnitLayout layout{units, 1, cfg.grid()};
  const auto y0 = main_block_forward(x, blk, layout, cfg.ln_eps, {});
  // Scramble the q and k column blocks and the bias table.
  auto other = blk;
  other.attn.qkv.w = blk.attn.qkv.w.detach();
  other.attn.rpe_table = blk.attn.rpe_table.detach();
  auto w = other.attn.qkv.w.data();
  for (std::int64_t r = 0; r < 64; ++r)
    for (std::int64_t c = 0; c < 128; ++c) w[r * 192 + c] *= -3.0;
  fill_random(other.attn.rpe_table, rng, 5.0);
  const auto y1 = main_block_forward(x, other, layout, cfg.ln_eps, {});
  for (std::int64_t i = 0; i < y0.numel(); ++i) CHECK(y1.data()[i] == doctest::Approx(y0.data()[i]).epsilon(1e-12));
}

TEST_CASE("turning the relative position bias off removes only the bias tables") {
  auto on = make_config("toy");
  auto off = on;
  off.use_rpe = false;
  std::mt19937_64 r1(7), r2(7);
  auto ea = init_encoder<double>(on, r1);
  auto eb = init_encoder<double>(off, r2);
  ParamList<double> pa, pb;
  collect_params(ea, on, pa);
  collect_params(eb, off, pb);
  std::size_t j = 0;
  for (auto& p : pa) {
    if (p.name.ends_with(".attn.rpe")) {
      for (auto& v : p.tensor.data()) v = 0;  // zero bias == no bias
      continue;
    }
    REQUIRE(j < pb.size());
    CHECK(pb[j].name == p.name);
    CHECK(pb[j].tensor.shape() == p.tensor.shape());
    std::copy(p.tensor.data().begin(), p.tensor.data().end(), pb[j].tensor.data().begin());
    ++j;
  }
  CHECK(j == pb.size());
  std::mt19937_64 rng(8);
  const auto img = randn<double>({2, 3, 32, 32}, rng);
  const auto ya = encoder_forward_dense(img, on, ea), yb = encoder_forward_dense(img, off, eb);
  CHECK(ya.shape() == yb.shape());
  for (std::int64_t i = 0; i < ya.numel(); ++i) CHECK(ya.data()[i] == doctest::Approx(yb.data()[i]).epsilon(1e-12));
  // A non-zero bias changes the output.
  for (auto& p : pa)
    if (p.name.ends_with(".attn.rpe")) fill_random(p.tensor, rng, 1.0);
  const auto yc = encoder_forward_dense(img, on, ea);
  double diff = 0;
  for (std::int64_t i = 0; i < ya.numel(); ++i) diff = std::max(diff, std::abs(yc.data()[i] - ya.data()[i]));
  CHECK(diff > 1e-3);
}

TEST_CASE("relative position rows") {
  const int g = 4;
  CHECK(rpe_row(0, 0, g) == (g - 1) * (2 * g - 1) + (g - 1));
  CHECK(rpe_row(15, 0, g) == (2 * g - 2) * (2 * g - 1) + (2 * g - 2));
  CHECK(rpe_row(0, 15, g) == 0);
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b) {
      CHECK(rpe_row(a, b, g) >= 0);
      CHECK(rpe_row(a, b, g) < (2 * g - 1) * (2 * g - 1));
      // Same offset, same row.
      if (a % g < g - 1 && b % g < g - 1) CHECK(rpe_row(a + 1, b + 1, g) == rpe_row(a, b, g));
    }
}

TEST_CASE("sine-cosine position table") {
  const int g = 4, d = 8;
  const auto t = sincos_pos_embed(g, d);
  CHECK(t.size() == std::size_t(g * g * d));
  // Unit 0: all sines 0, cosines 1.
  for (int i = 0; i < 2; ++i) {
    CHECK(t[i] == 0.0);
    CHECK(t[2 + i] == 1.0);
    CHECK(t[4 + i] == 0.0);
    CHECK(t[6 + i] == 1.0);
  }
  // Unit 6 = (row 1, col 2): column half uses 2, row half uses 1.
  CHECK(t[6 * d + 0] == doctest::Approx(std::sin(2.0)));
  CHECK(t[6 * d + 1] == doctest::Approx(std::sin(2.0 * 0.01)));
  CHECK(t[6 * d + 4] == doctest::Approx(std::sin(1.0)));
  CHECK(t[6 * d + 6] == doctest::Approx(std::cos(1.0)));
}

TEST_CASE("drop path: identity at eval, unbiased in training") {
  std::mt19937_64 rng(9);
  const auto x = Tensor<double>::full({20000, 1, 1}, 1.0);
  CHECK(same_bits(drop_path(x, 0.3, {}), x));
  ForwardOptions train{true, &rng};
  const auto y = drop_path(x, 0.3, train);
  double s = 0;
  int zeros = 0;
  for (double v : y.data()) {
    s += v;
    if (v == 0) ++zeros;
    else CHECK(v == doctest::Approx(1 / 0.7));
  }
  CHECK(s / 20000 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(zeros / 20000.0 == doctest::Approx(0.3).epsilon(0.05));
}

TEST_CASE("unit locality before the main stage") {
  const auto cfg = make_config("toy");
  for (int unit : {0, 5, 15}) CHECK(locality_violations(cfg, 100 + unit, unit) == 0);
  auto broken = cfg;
  broken.debug_cross_unit_mix = true;
  CHECK(locality_violations(broken, 1, 5) > 0);
}
