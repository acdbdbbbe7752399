#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hivit/ops.hpp"
#include "hivit/tensor.hpp"

namespace testutil {

using hivit::Shape;
using hivit::Tensor;

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, bool requires_grad = false, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<T> d(static_cast<std::size_t>(hivit::shape_numel(shape)));
  for (auto& v : d) v = static_cast<T>(n(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(d), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Central-difference check of every input of `f`. The scalar is
// sum(f(inputs) * w) for fixed random w, so every output element matters.
// Returns max |fd - ad| / max(1, max |fd|).
inline double grad_check(std::vector<Tensor<double>> inputs,
                         const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                         std::uint64_t seed = 1, double h = 1e-6) {
  std::mt19937_64 rng(seed);
  const auto probe = f(inputs);
  const auto w = randn<double>(probe.shape(), rng);
  auto scalar = [&] {
    const auto out = f(inputs);
    double s = 0;
    for (std::int64_t i = 0; i < out.numel(); ++i) s += out.data()[i] * w.data()[i];
    return s;
  };
  for (auto& in : inputs) in.zero_grad();
  hivit::backward(hivit::sum(hivit::mul(f(inputs), w)));
  double worst = 0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> ad(in.grad().begin(), in.grad().end());
    if (ad.empty()) ad.assign(static_cast<std::size_t>(in.numel()), 0.0);
    std::vector<double> fd(ad.size());
    auto d = in.data();
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double keep = d[i];
      d[i] = keep + h;
      const double up = scalar();
      d[i] = keep - h;
      const double down = scalar();
      d[i] = keep;
      fd[i] = (up - down) / (2 * h);
    }
    double scale = 1;
    for (double v : fd) scale = std::max(scale, std::abs(v));
    worst = std::max(worst, max_abs_diff(fd, ad) / scale);
  }
  return worst;
}

}  // namespace testutil
