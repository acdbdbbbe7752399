#include "hivit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hivit {
namespace {

template <typename T>
bool active(const NamedParam<T>& p) {
  return p.tensor.requires_grad() && p.tensor.has_grad();
}

template <typename T>
void check_finite(const ParamList<T>& params) {
  for (const auto& p : params) {
    if (!active(p)) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(g)) throw NonFiniteGradient(p.name);
  }
}

template <typename T>
void check_state(const ParamList<T>& params, const OptimState<T>& st) {
  if (st.m.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
}

}  // namespace

double lr_at(const Schedule& s, double epoch) {
  if (s.warmup_epochs > 0 && epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
  const double span = s.total_epochs - s.warmup_epochs;
  if (span <= 0) return s.base_lr;
  const double t = std::clamp((epoch - s.warmup_epochs) / span, 0.0, 1.0);
  return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
void OptimState<T>::init(const ParamList<T>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
}

template <typename T>
void adamw_step(ParamList<T>& params, OptimState<T>& st, double lr, const AdamWConfig& cfg,
                std::span<const double> lr_scale) {
  check_state(params, st);
  if (!lr_scale.empty() && lr_scale.size() != params.size())
    throw ContractError("adamw_step: lr_scale does not match parameter list");
  check_finite(params);
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!active(p)) continue;
    const double a = lr * (lr_scale.empty() ? 1.0 : lr_scale[i]);
    const double wd = p.decay ? cfg.weight_decay : 0.0;
    auto w = p.tensor.data();
    const auto g = p.tensor.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double x = static_cast<double>(w[j]) * (1.0 - a * wd);
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      x -= a * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      w[j] = static_cast<T>(x);
    }
  }
}

template <typename T>
void lars_step(ParamList<T>& params, OptimState<T>& st, double lr, const LarsConfig& cfg) {
  check_state(params, st);
  check_finite(params);
  ++st.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!active(p)) continue;
    auto w = p.tensor.data();
    const auto g = p.tensor.grad();
    const double wd = p.decay ? cfg.weight_decay : 0.0;
    double ratio = 1.0;
    if (p.decay) {
      double wn = 0, gn = 0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        wn += static_cast<double>(w[j]) * w[j];
        gn += static_cast<double>(g[j]) * g[j];
      }
      wn = std::sqrt(wn);
      gn = std::sqrt(gn);
      ratio = wn / (gn + wd * wn + cfg.eps);
    }
    auto& mu = st.m[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double upd = ratio * (static_cast<double>(g[j]) + wd * w[j]);
      const double mj = cfg.momentum * mu[j] + upd;
      mu[j] = static_cast<T>(mj);
      w[j] = static_cast<T>(w[j] - lr * mj);
    }
  }
}

double layer_multiplier(int layer, int total_blocks, double decay) {
  if (!(decay > 0 && decay <= 1)) throw ContractError("layer decay must lie in (0, 1]");
  const int l = std::clamp(layer, -1, total_blocks);
  return std::pow(decay, total_blocks - l);
}

template <typename T>
std::vector<double> layerwise_multipliers(const ParamList<T>& params, int total_blocks, double decay) {
  std::vector<double> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(layer_multiplier(p.layer, total_blocks, decay));
  return out;
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

#define HIVIT_INSTANTIATE_OPTIM(T)                                                                 \
  template struct OptimState<T>;                                                                   \
  template void adamw_step<T>(ParamList<T>&, OptimState<T>&, double, const AdamWConfig&,           \
                              std::span<const double>);                                            \
  template void lars_step<T>(ParamList<T>&, OptimState<T>&, double, const LarsConfig&);            \
  template std::vector<double> layerwise_multipliers<T>(const ParamList<T>&, int, double);         \
  template void zero_grads<T>(ParamList<T>&);

HIVIT_INSTANTIATE_OPTIM(float)
HIVIT_INSTANTIATE_OPTIM(double)

}  // namespace hivit
