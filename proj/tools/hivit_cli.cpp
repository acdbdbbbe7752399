#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hivit/bench.hpp"
#include "hivit/checkpoint.hpp"
#include "hivit/config.hpp"
#include "hivit/corpus.hpp"
#include "hivit/kernels.hpp"
#include "hivit/metrics.hpp"
#include "hivit/profile.hpp"
#include "hivit/train.hpp"
#include "hivit/verify.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

std::string default_out() {
  const char* env = std::getenv("HIVIT_OUT");
  return env && *env ? env : "runs";
}

void write_file(const std::string& path, const std::string& text) {
  if (auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream out(path);
  if (!out) throw hivit::ConfigError("cannot write '" + path + "'");
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HiViT encoder, masked-image-modeling training and benchmarks"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Kernel threads (0 = OpenMP default; 1 for bit-exact runs)");

  std::string config = "toy";
  double ratio = 0.75;
  std::uint64_t seed = 0;

  auto* profile = app.add_subcommand("profile", "Parameter and FLOP report");
  std::string profile_json_path;
  bool profile_json_stdout = false;
  profile->add_option("--config", config, "Preset name or config file")->required();
  profile->add_option("--ratio", ratio, "Mask ratio for the sparse column");
  profile->add_option("--out", profile_json_path, "Write the JSON report to this file");
  profile->add_flag("--json", profile_json_stdout, "Print JSON instead of the table");

  auto* verify = app.add_subcommand("verify", "Oracle, locality, gradient, optimizer and checkpoint checks");
  double tol = -1;
  int trials = 10;
  verify->add_option("--config", config, "Preset name or config file");
  verify->add_option("--seed", seed, "Seed");
  verify->add_option("--tol", tol, "Oracle tolerance for both oracles (default 1e-6 / 1e-5)");
  verify->add_option("--trials", trials, "Random trials per oracle and locality check");

  auto* bench = app.add_subcommand("bench", "Sparse vs dense MIM step timing");
  hivit::BenchOptions bo;
  std::string bench_out;
  bool bench_json = false;
  bench->add_option("--config", config, "Preset name or config file");
  bench->add_option("--ratio", bo.mask_ratio, "Mask ratio");
  bench->add_option("--batch", bo.batch, "Images per step");
  bench->add_option("--repeats", bo.repeats, "Timed repeats");
  bench->add_option("--warmup", bo.warmup, "Untimed warmup steps");
  bench->add_option("--seed", bo.seed, "Seed");
  bench->add_option("--out", bench_out, "Directory for bench.jsonl and bench.json");
  bench->add_flag("--json", bench_json, "Print JSON instead of the table");

  hivit::RunOptions ro;
  ro.out_dir = default_out();
  std::string recipe_path;
  std::int64_t max_steps = -1;
  int epochs = -1;
  auto add_train = [&](const char* name, const char* help) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--config", config, "Preset name or config file")->required();
    sc->add_option("--recipe", recipe_path, "Recipe file")->required();
    sc->add_option("--corpus", ro.corpus, "HVC1 corpus")->required();
    sc->add_option("--out", ro.out_dir, "Output directory (default $HIVIT_OUT or ./runs)");
    sc->add_option("--resume", ro.resume_checkpoint, "Continue from this run's checkpoint");
    sc->add_option("--epochs", epochs, "Override recipe epochs");
    sc->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
    sc->add_flag("--quiet", ro.quiet, "No per-epoch output");
    return sc;
  };
  auto* pretrain = add_train("pretrain", "Masked-image-modeling pre-training");
  auto* finetune = add_train("finetune", "Supervised fine-tuning");
  auto* linprobe = add_train("linprobe", "Linear probe on a frozen encoder");
  finetune->add_option("--init", ro.init_checkpoint, "Pre-trained checkpoint");
  linprobe->add_option("--init", ro.init_checkpoint, "Pre-trained checkpoint")->required();

  auto* synth = app.add_subcommand("synth", "Write a synthetic HVC1 corpus");
  std::string synth_kind = "gaussian-blobs", synth_path;
  std::int64_t synth_n = 64;
  int synth_size = 32, synth_classes = 4;
  synth->add_option("--kind", synth_kind, "gaussian-blobs, textures or labeled-shapes");
  synth->add_option("--n", synth_n, "Number of images");
  synth->add_option("--size", synth_size, "Image side in pixels");
  synth->add_option("--classes", synth_classes, "Classes for labeled-shapes");
  synth->add_option("--seed", seed, "Seed");
  synth->add_option("--out", synth_path, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  if (threads > 0) hivit::kernels::set_threads(threads);

  try {
    if (*profile) {
      const auto cfg = hivit::resolve_config(config);
      const auto r = hivit::count_params_flops(cfg, ratio);
      if (profile_json_stdout) std::cout << hivit::profile_json(r) << '\n';
      else std::cout << hivit::profile_table(r);
      if (!profile_json_path.empty()) write_file(profile_json_path, hivit::profile_json(r) + "\n");
      const auto msg = hivit::check_golden(r);
      if (!msg.empty()) {
        std::cerr << "profile check failed: " << msg << '\n';
        return kCheckFailed;
      }
      return kOk;
    }
    if (*verify) {
      const auto cfg = hivit::resolve_config(config);
      hivit::VerifyOptions vo;
      vo.seed = seed;
      vo.oracle_trials = trials;
      vo.locality_trials = trials;
      if (tol >= 0) vo.tol = {tol, tol};
      bool ok = true;
      std::string first_fail;
      for (const auto& c : hivit::run_verify(cfg, vo)) {
        std::printf("%-22s %s  %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL", c.detail.c_str());
        if (!c.pass && ok) first_fail = c.name;
        ok = ok && c.pass;
      }
      if (!ok) {
        std::fprintf(stderr, "verify failed: %s\n", first_fail.c_str());
        return kCheckFailed;
      }
      return kOk;
    }
    if (*bench) {
      const auto cfg = hivit::resolve_config(config);
      const auto r = hivit::bench_mim(cfg, bo);
      if (bench_json) std::cout << r.json() << '\n';
      else std::cout << r.table();
      if (!bench_out.empty()) {
        std::filesystem::create_directories(bench_out);
        hivit::MetricsWriter w((std::filesystem::path(bench_out) / "bench.jsonl").string());
        for (const auto& row : r.rows()) w.append(row);
        write_file((std::filesystem::path(bench_out) / "bench.json").string(), r.json() + "\n");
      }
      return kOk;
    }
    if (*pretrain || *finetune || *linprobe) {
      const auto cfg = hivit::resolve_config(config);
      auto recipe = hivit::load_recipe(recipe_path);
      if (epochs > 0) recipe.epochs = epochs;
      if (max_steps >= 0) recipe.max_steps = max_steps;
      hivit::RunResult res;
      if (*pretrain) res = hivit::run_pretrain(cfg, recipe, ro);
      else if (*finetune) res = hivit::run_finetune(cfg, recipe, ro);
      else res = hivit::run_linprobe(cfg, recipe, ro);
      if (!ro.quiet)
        std::printf("metrics: %s\ncheckpoint: %s\n", res.metrics_path.c_str(), res.checkpoint_path.c_str());
      return kOk;
    }
    if (*synth) {
      hivit::synth_corpus(synth_path, synth_n, synth_size, hivit::parse_synth_kind(synth_kind), seed, synth_classes);
      std::printf("wrote %lld %s images (%dx%d) to %s\n", static_cast<long long>(synth_n), synth_kind.c_str(),
                  synth_size, synth_size, synth_path.c_str());
      return kOk;
    }
  } catch (const hivit::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const hivit::CorpusError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const hivit::CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}
