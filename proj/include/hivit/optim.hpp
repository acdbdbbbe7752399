#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hivit/model.hpp"

namespace hivit {

// Linear warmup from 0 to base_lr, then half-cosine down to min_lr.
struct Schedule {
  double base_lr = 1e-3;
  double warmup_epochs = 0;
  double total_epochs = 1;
  double min_lr = 0;
};

double lr_at(const Schedule& s, double epoch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct LarsConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
  double eps = 1e-8;
};

// Raised before any parameter is touched.
struct NonFiniteGradient : std::runtime_error {
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), name(param) {}
  std::string name;
};

// Per-parameter moment buffers, aligned with a ParamList. LARS uses `m` as
// its momentum buffer.
template <typename T>
struct OptimState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const ParamList<T>& params);
};

// Skips parameters that are frozen or received no gradient. Weight decay is
// decoupled: p -= lr * scale * wd * p, then the bias-corrected Adam update
// with the same scaled lr. `lr_scale` may be empty (all 1).
template <typename T>
void adamw_step(ParamList<T>& params, OptimState<T>& st, double lr, const AdamWConfig& cfg,
                std::span<const double> lr_scale = {});

// Parameters with decay=true (matrices) get the trust ratio
// |w| / (|g| + wd |w| + eps) and weight decay; the rest use ratio 1, no decay.
template <typename T>
void lars_step(ParamList<T>& params, OptimState<T>& st, double lr, const LarsConfig& cfg);

// decay^(L - layer), where layer -1 is the embedding and L the head.
double layer_multiplier(int layer, int total_blocks, double decay);

template <typename T>
std::vector<double> layerwise_multipliers(const ParamList<T>& params, int total_blocks, double decay);

template <typename T>
void zero_grads(ParamList<T>& params);

}  // namespace hivit
