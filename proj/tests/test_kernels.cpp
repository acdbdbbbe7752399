#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "hivit/kernels.hpp"

namespace k = hivit::kernels;

namespace {

template <typename T>
std::vector<T> rand_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <typename T>
double max_rel(const std::vector<T>& a, const std::vector<T>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(double(a[i]) - double(b[i])));
    den = std::max(den, std::abs(double(b[i])));
  }
  return den > 0 ? num / den : num;
}

template <typename T>
bool same_bits(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE_TEMPLATE("gemm matches the serial loops for every transpose", T, float, double) {
  const double tol = sizeof(T) == 4 ? 1e-5 : 1e-13;
  std::mt19937_64 rng(3);
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb)
      for (auto [m, n, kk] : {std::array<int, 3>{1, 1, 1}, {7, 5, 3}, {33, 65, 17}, {64, 48, 130}}) {
        const auto a = rand_vec<T>(std::size_t(m) * kk, rng);
        const auto b = rand_vec<T>(std::size_t(kk) * n, rng);
        auto c0 = rand_vec<T>(std::size_t(m) * n, rng);
        auto c1 = c0;
        for (bool acc : {false, true}) {
          k::gemm<T>(ta, tb, m, n, kk, a.data(), b.data(), c0.data(), acc);
          k::reference::gemm<T>(ta, tb, m, n, kk, a.data(), b.data(), c1.data(), acc);
          CHECK(max_rel(c0, c1) < tol);
        }
      }
}

TEST_CASE("kernels are bit-identical across thread counts") {
  std::mt19937_64 rng(5);
  const int m = 97, n = 61, kk = 45;
  const auto a = rand_vec<float>(std::size_t(m) * kk, rng);
  const auto b = rand_vec<float>(std::size_t(kk) * n, rng);
  const auto x = rand_vec<float>(std::size_t(m) * n, rng);
  const std::vector<float> g(n, 1.3f), be(n, 0.2f);
  auto run = [&](int threads) {
    k::set_threads(threads);
    std::vector<float> c(std::size_t(m) * n), s(c.size()), ln(c.size()), mu(m), rs(m), ge(c.size());
    std::vector<float> dw(std::size_t(kk) * n);
    k::gemm<float>(false, false, m, n, kk, a.data(), b.data(), c.data(), false);
    k::gemm<float>(true, false, kk, n, m, a.data(), x.data(), dw.data(), false);
    k::softmax_rows<float>(x.data(), s.data(), m, n);
    k::layer_norm_rows<float>(x.data(), g.data(), be.data(), 1e-6f, ln.data(), mu.data(), rs.data(), m, n);
    std::vector<float> dx(c.size()), dg(n), db(n);
    k::layer_norm_rows_backward<float>(x.data(), g.data(), mu.data(), rs.data(), c.data(), dx.data(), dg.data(),
                                       db.data(), m, n);
    k::gelu<float>(x.data(), ge.data(), m * n);
    std::vector<std::vector<float>> out{c, dw, s, ln, dx, dg, db, ge};
    return out;
  };
  const auto one = run(1);
  const auto four = run(4);
  k::set_threads(0);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(same_bits(one[i], four[i]));
}

TEST_CASE_TEMPLATE("row kernels match their references", T, float, double) {
  const double tol = sizeof(T) == 4 ? 1e-5 : 1e-13;
  std::mt19937_64 rng(7);
  const int rows = 37, cols = 29;
  const auto x = rand_vec<T>(std::size_t(rows) * cols, rng);
  const auto dy = rand_vec<T>(x.size(), rng);
  const auto g = rand_vec<T>(cols, rng), b = rand_vec<T>(cols, rng);
  std::vector<T> y0(x.size()), y1(x.size());
  k::softmax_rows<T>(x.data(), y0.data(), rows, cols);
  k::reference::softmax_rows<T>(x.data(), y1.data(), rows, cols);
  CHECK(max_rel(y0, y1) < tol);
  std::vector<T> d0(x.size()), d1(x.size());
  k::softmax_rows_backward<T>(y0.data(), dy.data(), d0.data(), rows, cols);
  k::reference::softmax_rows_backward<T>(y1.data(), dy.data(), d1.data(), rows, cols);
  CHECK(max_rel(d0, d1) < tol);

  std::vector<T> m0(rows), r0(rows), m1(rows), r1(rows);
  k::layer_norm_rows<T>(x.data(), g.data(), b.data(), T(1e-6), y0.data(), m0.data(), r0.data(), rows, cols);
  k::reference::layer_norm_rows<T>(x.data(), g.data(), b.data(), T(1e-6), y1.data(), m1.data(), r1.data(), rows,
                                   cols);
  CHECK(max_rel(y0, y1) < tol);
  std::vector<T> dx0(x.size()), dx1(x.size()), dg0(cols), dg1(cols), db0(cols), db1(cols);
  k::layer_norm_rows_backward<T>(x.data(), g.data(), m0.data(), r0.data(), dy.data(), dx0.data(), dg0.data(),
                                 db0.data(), rows, cols);
  k::reference::layer_norm_rows_backward<T>(x.data(), g.data(), m1.data(), r1.data(), dy.data(), dx1.data(),
                                            dg1.data(), db1.data(), rows, cols);
  CHECK(max_rel(dx0, dx1) < tol);
  CHECK(max_rel(dg0, dg1) < tol);
  CHECK(max_rel(db0, db1) < tol);

  k::gelu<T>(x.data(), y0.data(), rows * cols);
  k::reference::gelu<T>(x.data(), y1.data(), rows * cols);
  CHECK(max_rel(y0, y1) < tol);
  std::fill(d0.begin(), d0.end(), T(0));
  std::fill(d1.begin(), d1.end(), T(0));
  k::gelu_backward<T>(x.data(), dy.data(), d0.data(), rows * cols);
  k::reference::gelu_backward<T>(x.data(), dy.data(), d1.data(), rows * cols);
  CHECK(max_rel(d0, d1) < tol);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const std::vector<double> x{1000, 1001, 1002, -5, 0, 5};
  std::vector<double> y(6);
  k::softmax_rows<double>(x.data(), y.data(), 2, 3);
  for (int r = 0; r < 2; ++r) CHECK(y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[2] == doctest::Approx(1 / (1 + std::exp(-1.0) + std::exp(-2.0))).epsilon(1e-14));
}

TEST_CASE("gelu tanh approximation at known points") {
  const std::vector<double> x{0.0, 1.0, -1.0, 3.0};
  std::vector<double> y(4);
  k::gelu<double>(x.data(), y.data(), 4);
  auto ref = [](double v) { return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))); };
  CHECK(y[0] == 0.0);
  for (int i = 1; i < 4; ++i) CHECK(y[i] == doctest::Approx(ref(x[i])).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(0.8411919906).epsilon(1e-9));
}
