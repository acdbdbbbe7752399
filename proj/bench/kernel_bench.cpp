// Parallel kernels against their serial references.
#include <algorithm>
#include <cstdlib>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "hivit/kernels.hpp"

namespace {

double median_ms(const std::function<void()>& fn, int repeats) {
  fn();
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

void report(const char* name, double fast, double ref) {
  std::printf("%-28s %10.3f ms %10.3f ms %8.2fx\n", name, fast, ref, ref / fast);
}

}  // namespace

int main(int argc, char** argv) {
  namespace k = hivit::kernels;
  const int repeats = argc > 1 ? std::atoi(argv[1]) : 5;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.f, 1.f);
  auto rand_vec = [&](std::size_t len) {
    std::vector<float> v(len);
    for (auto& x : v) x = n(rng);
    return v;
  };
  std::printf("threads %d, median of %d\n", k::max_threads(), repeats);
  std::printf("%-28s %13s %13s %9s\n", "kernel", "parallel", "reference", "speedup");

  for (int s : {128, 256, 512}) {
    const auto a = rand_vec(std::size_t(s) * s), b = rand_vec(std::size_t(s) * s);
    std::vector<float> c(std::size_t(s) * s);
    char name[64];
    std::snprintf(name, sizeof name, "gemm %dx%dx%d", s, s, s);
    report(name, median_ms([&] { k::gemm<float>(false, false, s, s, s, a.data(), b.data(), c.data(), false); }, repeats),
           median_ms([&] { k::reference::gemm<float>(false, false, s, s, s, a.data(), b.data(), c.data(), false); },
                     repeats));
    std::snprintf(name, sizeof name, "gemm A^T %dx%dx%d", s, s, s);
    report(name, median_ms([&] { k::gemm<float>(true, false, s, s, s, a.data(), b.data(), c.data(), false); }, repeats),
           median_ms([&] { k::reference::gemm<float>(true, false, s, s, s, a.data(), b.data(), c.data(), false); },
                     repeats));
  }

  const std::int64_t rows = 4096, cols = 256;
  const auto x = rand_vec(rows * cols);
  std::vector<float> y(x.size()), dx(x.size()), mean(rows), rstd(rows);
  const std::vector<float> gamma(cols, 1.f), beta(cols, 0.f);
  report("softmax 4096x256", median_ms([&] { k::softmax_rows<float>(x.data(), y.data(), rows, cols); }, repeats),
         median_ms([&] { k::reference::softmax_rows<float>(x.data(), y.data(), rows, cols); }, repeats));
  report("layer_norm 4096x256",
         median_ms([&] { k::layer_norm_rows<float>(x.data(), gamma.data(), beta.data(), 1e-6f, y.data(), mean.data(),
                                                   rstd.data(), rows, cols); }, repeats),
         median_ms([&] { k::reference::layer_norm_rows<float>(x.data(), gamma.data(), beta.data(), 1e-6f, y.data(),
                                                              mean.data(), rstd.data(), rows, cols); }, repeats));
  report("gelu 1M", median_ms([&] { k::gelu<float>(x.data(), y.data(), rows * cols); }, repeats),
         median_ms([&] { k::reference::gelu<float>(x.data(), y.data(), rows * cols); }, repeats));
  return 0;
}
