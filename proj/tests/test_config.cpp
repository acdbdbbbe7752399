#include <doctest.h>

#include <string>

#include "hivit/config.hpp"
#include "hivit/kv.hpp"

using namespace hivit;

TEST_CASE("table presets") {
  const auto t = make_config("T"), s = make_config("S"), b = make_config("B");
  CHECK(t.depths == std::array<int, 3>{1, 1, 10});
  CHECK(s.depths == std::array<int, 3>{2, 2, 20});
  CHECK(b.depths == std::array<int, 3>{2, 2, 20});
  CHECK(t.dims == std::array<int, 3>{96, 192, 384});
  CHECK(s.dims == std::array<int, 3>{96, 192, 384});
  CHECK(b.dims == std::array<int, 3>{128, 256, 512});
  CHECK(t.heads == 6);
  CHECK(s.heads == 6);
  CHECK(b.heads == 8);
  CHECK(t.drop_path_rate == 0.05);
  CHECK(s.drop_path_rate == 0.3);
  CHECK(b.drop_path_rate == 0.5);
  for (const auto& c : {t, s, b}) {
    CHECK(c.img_size == 224);
    CHECK(c.unit_size == 16);
    CHECK(c.inner_patch == 4);
    CHECK(c.mlp_ratio_main == 4.0);
    CHECK(c.mlp_ratio_replace == 3.0);
    CHECK(c.num_units() == 196);
    CHECK(c.decoder_depth == 6);
    CHECK(c.decoder_dim == 512);
  }
  CHECK(make_config("hivit-b").name == "hivit-b");
}

TEST_CASE("toy preset") {
  const auto c = make_config("toy");
  CHECK(c.img_size == 32);
  CHECK(c.unit_size == 8);
  CHECK(c.inner_patch == 2);
  CHECK(c.depths == std::array<int, 3>{1, 1, 4});
  CHECK(c.dims == std::array<int, 3>{16, 32, 64});
  CHECK(c.heads == 4);
  CHECK(c.grid() == 4);
  CHECK(c.unit_tokens_side() == 4);
}

TEST_CASE("unknown preset and invalid geometry are rejected") {
  CHECK_THROWS_AS(make_config("huge"), ConfigError);
  CHECK_THROWS_AS(parse_config("preset = toy\nunit_size = 6\n"), ConfigError);   // 6 / 2 = 3 tokens
  CHECK_THROWS_AS(parse_config("preset = toy\nimg_size = 36\n"), ConfigError);   // not a multiple of 8
  CHECK_THROWS_AS(parse_config("preset = toy\nheads = 5\n"), ConfigError);       // 64 % 5
  CHECK_THROWS_AS(parse_config("preset = toy\ndims = 16, 32, 60\n"), ConfigError);  // D3 != 2 D2
}

TEST_CASE("config text: preset seeding, overrides, round trip") {
  const auto c = parse_config("# comment\npreset = B\n\nuse_rpe = false\ndecoder_depth = 4\ndecoder_dim = 384\n"
                              "decoder_heads = 12\n");
  CHECK(c.dims == std::array<int, 3>{128, 256, 512});
  CHECK_FALSE(c.use_rpe);
  CHECK(c.decoder_depth == 4);
  CHECK(c.decoder_dim == 384);
  const auto back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
}

TEST_CASE("parse errors carry the line number") {
  try {
    parse_config("preset = toy\nheads = 4\nthis line is wrong\n", "my.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:3") != std::string::npos);
  }
  try {
    parse_config("preset = toy\n\nheads = four\n", "my.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:3") != std::string::npos);
  }
  try {
    parse_config("preset = toy\nhead_count = 4\n", "my.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("head_count") != std::string::npos);
  }
}

TEST_CASE("visible unit count") {
  CHECK(visible_count(196, 0.75) == 49);
  CHECK(visible_count(16, 0.75) == 4);
  CHECK(visible_count(16, 0.99) == 1);
  CHECK(visible_count(16, 0.01) == 15);
  CHECK_THROWS_AS(visible_count(16, 0.0), ConfigError);
  CHECK_THROWS_AS(visible_count(16, 1.0), ConfigError);
  CHECK_THROWS_AS(visible_count(1, 0.5), ConfigError);
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1e-6, 1.5e-4, 3.0, 0.65, 1.0 / 3.0}) CHECK(std::stod(format_double(v)) == v);
}
