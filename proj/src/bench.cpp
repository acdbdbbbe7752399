#include "hivit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <sstream>

#include <json.hpp>

#include "hivit/kernels.hpp"
#include "hivit/mim.hpp"
#include "hivit/optim.hpp"

namespace hivit {

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

BenchReport bench_mim(const HiViTConfig& cfg, const BenchOptions& opts) {
  BenchReport r;
  r.config = cfg.name;
  r.opts = opts;
  r.threads = kernels::max_threads();
  r.units = cfg.num_units();
  r.visible = visible_count(cfg.num_units(), opts.mask_ratio);

  const auto prof = count_params_flops(cfg, opts.mask_ratio);
  // Encoder only: the classifier head is not part of either step.
  r.flop_ratio_total = (prof.total_flops_sparse - prof.flops_of(CostKind::Head, true)) /
                       (prof.total_flops_dense - prof.flops_of(CostKind::Head, false));
  r.flop_ratio_attention = prof.flops_of(CostKind::Attention, true) / prof.flops_of(CostKind::Attention, false);
  r.flop_ratio_token = prof.flops_of(CostKind::Token, true) / prof.flops_of(CostKind::Token, false);

  std::mt19937_64 rng(opts.seed);
  auto sparse = init_mim<float>(cfg, rng);
  auto dense = init_dense_baseline<float>(cfg, rng);
  auto sparse_params = mim_params(sparse, cfg);
  auto dense_params = dense_baseline_params(dense, cfg);

  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> pix(static_cast<std::size_t>(opts.batch * cfg.in_chans * cfg.img_size * cfg.img_size));
  for (auto& v : pix) v = n(rng);
  const auto images = Tensor<float>::from_data({opts.batch, cfg.in_chans, cfg.img_size, cfg.img_size}, pix);
  const auto mask = sample_batch_mask(cfg, opts.batch, opts.mask_ratio, rng());

  auto time_step = [&](auto&& loss_fn, ParamList<float>& params) {
    const auto t0 = std::chrono::steady_clock::now();
    zero_grads(params);
    backward(loss_fn());
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  auto sparse_step = [&] { return mim_loss(images, mask, cfg, sparse); };
  auto dense_step = [&] { return dense_baseline_loss(images, mask, cfg, dense); };

  for (int i = 0; i < opts.warmup; ++i) {
    time_step(sparse_step, sparse_params);
    time_step(dense_step, dense_params);
  }
  // Interleaved so both paths see the same machine conditions.
  for (int i = 0; i < opts.repeats; ++i) {
    r.sparse_ms.push_back(time_step(sparse_step, sparse_params));
    r.dense_ms.push_back(time_step(dense_step, dense_params));
  }
  r.sparse_median_ms = median(r.sparse_ms);
  r.dense_median_ms = median(r.dense_ms);
  r.time_ratio = r.sparse_median_ms / r.dense_median_ms;
  return r;
}

std::vector<MetricsRow> BenchReport::rows() const {
  std::vector<MetricsRow> out;
  for (int k = 0; k < 2; ++k) {
    MetricsRow row;
    row.split = k == 0 ? "bench-sparse" : "bench-dense";
    const double ms = k == 0 ? sparse_median_ms : dense_median_ms;
    row.step = opts.repeats;
    row.wall_ms = ms;
    row.throughput_img_s = ms > 0 ? static_cast<double>(opts.batch) / (ms / 1000.0) : 0.0;
    row.config = config;
    out.push_back(row);
  }
  return out;
}

std::string BenchReport::json() const {
  nlohmann::ordered_json j;
  j["schema"] = "hivit.bench/1";
  j["config"] = config;
  j["mask_ratio"] = opts.mask_ratio;
  j["batch"] = opts.batch;
  j["repeats"] = opts.repeats;
  j["warmup"] = opts.warmup;
  j["threads"] = threads;
  j["units"] = units;
  j["visible_units"] = visible;
  j["sparse_ms"] = sparse_ms;
  j["dense_ms"] = dense_ms;
  j["sparse_median_ms"] = sparse_median_ms;
  j["dense_median_ms"] = dense_median_ms;
  j["time_ratio"] = time_ratio;
  j["speedup"] = speedup();
  j["flop_ratio"] = {{"encoder", flop_ratio_total}, {"attention", flop_ratio_attention}, {"token", flop_ratio_token}};
  return j.dump(2);
}

std::string BenchReport::table() const {
  char buf[256];
  std::ostringstream os;
  std::snprintf(buf, sizeof buf,
                "config %s  batch %lld  mask ratio %.2f (%lld of %lld units visible)  threads %d  "
                "repeats %d after %d warmup\n",
                config.c_str(), static_cast<long long>(opts.batch), opts.mask_ratio,
                static_cast<long long>(visible), static_cast<long long>(units), threads, opts.repeats, opts.warmup);
  os << buf;
  std::snprintf(buf, sizeof buf, "sparse (serialized encoder + decoder)  %10.2f ms  %8.1f img/s\n",
                sparse_median_ms, opts.batch / (sparse_median_ms / 1000.0));
  os << buf;
  std::snprintf(buf, sizeof buf, "dense  (mask tokens, full grid)        %10.2f ms  %8.1f img/s\n",
                dense_median_ms, opts.batch / (dense_median_ms / 1000.0));
  os << buf;
  std::snprintf(buf, sizeof buf, "wall-clock sparse/dense %.3f  (speedup %.2fx)\n", time_ratio, speedup());
  os << buf;
  std::snprintf(buf, sizeof buf, "analytic encoder MACs sparse/dense %.4f  attention %.4f  per-token %.4f\n",
                flop_ratio_total, flop_ratio_attention, flop_ratio_token);
  os << buf;
  return os.str();
}

}  // namespace hivit
