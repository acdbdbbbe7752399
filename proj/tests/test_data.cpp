#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hivit/checkpoint.hpp"
#include "hivit/corpus.hpp"
#include "hivit/metrics.hpp"
#include "hivit/mim.hpp"

using namespace hivit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("hivit-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::vector<std::uint8_t> slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::string& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("synthetic corpora are deterministic and self-describing") {
  TempDir d;
  synth_corpus(d / "a.hvc", 20, 16, SynthKind::GaussianBlobs, 3);
  synth_corpus(d / "b.hvc", 20, 16, SynthKind::GaussianBlobs, 3);
  synth_corpus(d / "c.hvc", 20, 16, SynthKind::GaussianBlobs, 4);
  CHECK(slurp(d / "a.hvc") == slurp(d / "b.hvc"));
  CHECK(slurp(d / "a.hvc") != slurp(d / "c.hvc"));
  CorpusReader r(d / "a.hvc");
  CHECK(r.size() == 20);
  CHECK(r.header().height == 16);
  CHECK(r.header().channels == 3);
  CHECK_FALSE(r.header().labeled);
  CHECK(fs::file_size(d / "a.hvc") == r.header().file_bytes());
  CHECK(r.header().header_bytes() == 56);
  CHECK_FALSE(fs::exists(d / "a.hvc.tmp"));
}

TEST_CASE("normalised batches have zero mean and unit variance per channel") {
  TempDir d;
  synth_corpus(d / "t.hvc", 64, 16, SynthKind::Textures, 1);
  CorpusReader r(d / "t.hvc");
  std::vector<std::int64_t> idx(64);
  for (int i = 0; i < 64; ++i) idx[i] = i;
  std::vector<double> out(64 * 3 * 16 * 16);
  r.load_batch<double>(idx, out, {});
  for (int c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (int b = 0; b < 64; ++b)
      for (int p = 0; p < 256; ++p) {
        const double v = out[(b * 3 + c) * 256 + p];
        s += v;
        sq += v * v;
      }
    const double n = 64 * 256, m = s / n;
    CHECK(std::abs(m) < 1e-3);
    CHECK(sq / n - m * m == doctest::Approx(1.0).epsilon(1e-2));
  }
}

TEST_CASE("labeled shapes: labels in range, every class present, classes differ") {
  TempDir d;
  synth_corpus(d / "s.hvc", 200, 32, SynthKind::LabeledShapes, 7, 4);
  CorpusReader r(d / "s.hvc");
  CHECK(r.header().labeled);
  CHECK(r.header().record_bytes() == 32 * 32 * 3 + 2);
  std::vector<std::uint8_t> px(r.header().pixel_bytes());
  std::set<int> seen;
  for (std::int64_t i = 0; i < r.size(); ++i) {
    const int l = r.read_record(i, px);
    CHECK(l >= 0);
    CHECK(l < 4);
    seen.insert(l);
  }
  CHECK(seen.size() == 4);
  std::vector<std::int64_t> idx{0, 1, 2};
  std::vector<float> out(3 * 3 * 32 * 32);
  std::vector<int> labels(3);
  r.load_batch<float>(idx, out, labels);
  for (int i = 0; i < 3; ++i) CHECK(labels[i] == r.read_record(i, px));
  CHECK_THROWS_AS(synth_corpus(d / "x.hvc", 10, 32, SynthKind::LabeledShapes, 1, 7), CorpusError);
}

TEST_CASE("corrupt corpora are rejected with a reason") {
  TempDir d;
  synth_corpus(d / "ok.hvc", 4, 8, SynthKind::Textures, 1);
  const auto bytes = slurp(d / "ok.hvc");

  auto truncated = bytes;
  truncated.pop_back();
  spit(d / "short.hvc", truncated);
  CHECK_THROWS_WITH_AS(CorpusReader(d / "short.hvc"), doctest::Contains("length"), CorpusError);

  auto magic = bytes;
  magic[0] = 'X';
  spit(d / "magic.hvc", magic);
  CHECK_THROWS_WITH_AS(CorpusReader(d / "magic.hvc"), doctest::Contains("magic"), CorpusError);

  auto version = bytes;
  version[4] = 9;
  spit(d / "version.hvc", version);
  CHECK_THROWS_WITH_AS(CorpusReader(d / "version.hvc"), doctest::Contains("version"), CorpusError);

  spit(d / "tiny.hvc", {'H', 'V'});
  CHECK_THROWS_AS(CorpusReader(d / "tiny.hvc"), CorpusError);
  CHECK_THROWS_AS(CorpusReader(d / "missing.hvc"), CorpusError);

  CorpusReader r(d / "ok.hvc");
  std::vector<std::uint8_t> px(r.header().pixel_bytes());
  CHECK_THROWS_AS(r.read_record(4, px), CorpusError);
  CHECK_THROWS_AS(r.read_record(-1, px), CorpusError);
}

TEST_CASE("corpus writer patches the record count on close") {
  TempDir d;
  CorpusHeader h;
  h.height = h.width = 2;
  h.channels = 3;
  h.labeled = true;
  h.mean = {0.5f, 0.5f, 0.5f};
  h.std = {0.25f, 0.25f, 0.25f};
  {
    CorpusWriter w(d / "w.hvc", h);
    std::vector<std::uint8_t> px(12, 7);
    w.append(px, 3);
    w.append(px, 65535);
    CHECK_THROWS_AS(w.append(std::vector<std::uint8_t>(5), 0), CorpusError);
    CHECK_THROWS_AS(w.append(px, 70000), CorpusError);
    w.close();
  }
  CorpusReader r(d / "w.hvc");
  CHECK(r.size() == 2);
  std::vector<std::uint8_t> px(12);
  CHECK(r.read_record(1, px) == 65535);
  CHECK(px[11] == 7);
}

TEST_CASE("checkpoint: round trip is byte-identical") {
  TempDir d;
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(1);
  auto m = init_mim<float>(cfg, rng);
  auto params = mim_params(m, cfg);
  Checkpoint ck;
  ck.step = 123;
  ck.config = to_text(cfg);
  ck.meta = "mode = pretrain\n";
  ck.rng = "1 2 3";
  store_params(ck, params, "param/");
  const std::vector<double> extra{1.5, -2.5};
  ck.put<double>("extra", {2}, extra);
  save_checkpoint(ck, d / "a.hvck");
  const auto back = load_checkpoint(d / "a.hvck");
  save_checkpoint(back, d / "b.hvck");
  CHECK(slurp(d / "a.hvck") == slurp(d / "b.hvck"));
  CHECK(back.step == 123);
  CHECK(back.rng == "1 2 3");
  CHECK(back.config == ck.config);
  std::vector<double> e(2);
  back.get<double>("extra", {2}, e);
  CHECK(e == extra);
  std::vector<float> wrong(2);
  CHECK_THROWS_AS(back.get<float>("extra", {2}, wrong), CheckpointError);
  CHECK_THROWS_AS(back.get<double>("extra", {1, 2}, e), CheckpointError);
  CHECK_FALSE(fs::exists(d / "a.hvck.tmp"));
}

TEST_CASE("checkpoint: corrupt files and mismatched models") {
  TempDir d;
  const auto cfg = make_config("toy");
  std::mt19937_64 rng(2);
  auto m = init_mim<float>(cfg, rng);
  auto params = mim_params(m, cfg);
  Checkpoint ck;
  store_params(ck, params, "param/");
  const auto bytes = encode_checkpoint(ck);

  auto version = bytes;
  version[4] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(version, "v"), doctest::Contains("version"), CheckpointError);
  auto shortened = bytes;
  shortened.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(shortened, "s"), CheckpointError);
  auto magic = bytes;
  magic[1] = 'Z';
  CHECK_THROWS_AS(decode_checkpoint(magic, "m"), CheckpointError);

  // A different architecture: the first mismatching shape is named.
  auto other_cfg = cfg;
  other_cfg.mlp_ratio_replace = 2.0;
  std::mt19937_64 r2(3);
  auto other = init_mim<float>(other_cfg, r2);
  auto other_params = mim_params(other, other_cfg);
  const auto before = std::vector<float>(other_params[0].tensor.data().begin(), other_params[0].tensor.data().end());
  CHECK_THROWS_WITH_AS(restore_params(ck, other_params, "param/"),
                       doctest::Contains("encoder.stage1.0.mlp1.fc1.w"), CheckpointError);
  // Nothing was modified.
  CHECK(std::equal(before.begin(), before.end(), other_params[0].tensor.data().begin()));

  // Extra arrays are rejected; a narrower scope ignores them.
  auto bigger = ck;
  const std::vector<float> one{1.0f};
  bigger.put<float>("param/stray", {1}, one);
  CHECK_THROWS_WITH_AS(restore_params(bigger, params, "param/"), doctest::Contains("param/stray"), CheckpointError);
  ParamList<float> enc_only;
  collect_params(m.enc, cfg, enc_only, "encoder.", false);
  restore_params(bigger, enc_only, "param/", "param/encoder.");
}

TEST_CASE("metrics rows are single JSON lines") {
  TempDir d;
  MetricsRow row;
  row.step = 10;
  row.epoch = 1;
  row.loss = 0.5;
  row.lr = 1e-3;
  row.accuracy = 0.75;
  const auto line = metrics_line(row);
  CHECK(line.find('\n') == std::string::npos);
  const auto j = nlohmann::json::parse(line);
  CHECK(j["step"] == 10);
  CHECK(j["split"] == "train");
  CHECK(j["accuracy"] == 0.75);
  CHECK_FALSE(j.contains("config"));
  {
    MetricsWriter w(d / "m.jsonl", true);
    w.append(row);
    row.step = 11;
    row.accuracy.reset();
    w.append(row);
  }
  std::ifstream in(d / "m.jsonl");
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK_FALSE(std::getline(in, l3));
  CHECK(nlohmann::json::parse(l2)["step"] == 11);
  CHECK_FALSE(nlohmann::json::parse(l2).contains("accuracy"));
}
