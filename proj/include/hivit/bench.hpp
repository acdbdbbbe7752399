#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hivit/config.hpp"
#include "hivit/metrics.hpp"
#include "hivit/profile.hpp"

namespace hivit {

struct BenchOptions {
  double mask_ratio = 0.75;
  std::int64_t batch = 8;
  int repeats = 5;
  int warmup = 3;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::string config;
  BenchOptions opts;
  int threads = 1;
  std::int64_t visible = 0;
  std::int64_t units = 0;
  std::vector<double> sparse_ms;  // one forward+backward step per repeat
  std::vector<double> dense_ms;
  double sparse_median_ms = 0;
  double dense_median_ms = 0;
  double time_ratio = 0;  // sparse / dense
  // Analytic encoder multiply-adds, dense grid vs serialized visible units.
  double flop_ratio_total = 0;
  double flop_ratio_attention = 0;
  double flop_ratio_token = 0;

  double speedup() const { return dense_median_ms / sparse_median_ms; }
  std::vector<MetricsRow> rows() const;
  std::string json() const;
  std::string table() const;
};

double median(std::vector<double> v);

// Times one MIM training step (loss forward + backward, float) of the
// serialized encoder + decoder against the mask-token dense baseline.
BenchReport bench_mim(const HiViTConfig& cfg, const BenchOptions& opts);

}  // namespace hivit
