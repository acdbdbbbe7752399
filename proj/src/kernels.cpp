#include "hivit/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace hivit::kernels {
namespace {

constexpr std::int64_t kRowGroup = 4;
constexpr std::int64_t kColBlock = 512;
// Below this many multiply-adds the parallel region costs more than it saves.
constexpr std::int64_t kParallelWork = 1 << 15;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Four output rows at once over a column block. The per-element accumulation
// order is k = 0..K-1 in every code path, so a row's result never depends on
// which rows it was grouped with.
template <typename T>
void gemm_group(std::int64_t n, std::int64_t k, const T* __restrict a, std::int64_t lda,
                const T* __restrict b, T* __restrict c, std::int64_t ldc) {
  T* __restrict c0 = c;
  T* __restrict c1 = c + ldc;
  T* __restrict c2 = c + 2 * ldc;
  T* __restrict c3 = c + 3 * ldc;
  for (std::int64_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::int64_t jn = std::min(n - j0, kColBlock);
    for (std::int64_t p = 0; p < k; ++p) {
      const T a0 = a[p];
      const T a1 = a[lda + p];
      const T a2 = a[2 * lda + p];
      const T a3 = a[3 * lda + p];
      const T* __restrict brow = b + p * n + j0;
      T* __restrict d0 = c0 + j0;
      T* __restrict d1 = c1 + j0;
      T* __restrict d2 = c2 + j0;
      T* __restrict d3 = c3 + j0;
#pragma omp simd
      for (std::int64_t j = 0; j < jn; ++j) {
        const T bj = brow[j];
        d0[j] += a0 * bj;
        d1[j] += a1 * bj;
        d2[j] += a2 * bj;
        d3[j] += a3 * bj;
      }
    }
  }
}

template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (m == 0 || n == 0 || k == 0) return;
  const std::int64_t groups = (m + kRowGroup - 1) / kRowGroup;
  const bool par = m * n * k >= kParallelWork && groups > 1;
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t g = 0; g < groups; ++g) {
    const std::int64_t i0 = g * kRowGroup;
    const std::int64_t rows = std::min(kRowGroup, m - i0);
    if (rows == kRowGroup) {
      gemm_group(n, k, a + i0 * k, k, b, c + i0 * n, n);
    } else {
      // Pad the tail so it runs through the same instruction sequence.
      std::vector<T> pa(static_cast<std::size_t>(kRowGroup * k), T(0));
      std::vector<T> pc(static_cast<std::size_t>(kRowGroup * n), T(0));
      std::copy(a + i0 * k, a + (i0 + rows) * k, pa.begin());
      std::copy(c + i0 * n, c + (i0 + rows) * n, pc.begin());
      gemm_group(n, k, pa.data(), k, b, pc.data(), n);
      std::copy(pc.begin(), pc.begin() + rows * n, c + i0 * n);
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* x, std::int64_t rows, std::int64_t cols) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  return out;
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> at, bt;
  if (trans_a) {
    at = transposed(a, k, m);
    a = at.data();
  }
  if (trans_b) {
    bt = transposed(b, n, k);
    b = bt.data();
  }
  gemm_nn(m, n, k, a, b, c, accumulate);
}

template <typename T>
void softmax_rows(const T* x, T* y, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* gr = dy + r * cols;
    T* dr = dx + r * cols;
    T dot = 0;
    for (std::int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
    for (std::int64_t j = 0; j < cols; ++j) dr[j] += yr[j] * (gr[j] - dot);
  }
}

template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                     std::int64_t rows, std::int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu = 0;
    for (std::int64_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= T(cols);
    T var = 0;
    for (std::int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }
}

template <typename T>
void layer_norm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd,
                              const T* dy, T* dx, T* dgamma, T* dbeta, std::int64_t rows,
                              std::int64_t cols) {
  const bool par = rows * cols >= kParallelWork;
  if (dx) {
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * cols;
      const T* gr = dy + r * cols;
      T* dr = dx + r * cols;
      const T mu = mean[r];
      const T rs = rstd[r];
      T sum_g = 0, sum_gx = 0;
      for (std::int64_t j = 0; j < cols; ++j) {
        const T g = gr[j] * gamma[j];
        sum_g += g;
        sum_gx += g * (xr[j] - mu) * rs;
      }
      sum_g /= T(cols);
      sum_gx /= T(cols);
      for (std::int64_t j = 0; j < cols; ++j) {
        const T xhat = (xr[j] - mu) * rs;
        dr[j] += rs * (gr[j] * gamma[j] - sum_g - xhat * sum_gx);
      }
    }
  }
  if (dgamma || dbeta) {
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t j = 0; j < cols; ++j) {
      T sg = 0, sb = 0;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T g = dy[r * cols + j];
        sg += g * (x[r * cols + j] - mean[r]) * rstd[r];
        sb += g;
      }
      if (dgamma) dgamma[j] += sg;
      if (dbeta) dbeta[j] += sb;
    }
  }
}

template <typename T>
void gelu(const T* x, T* y, std::int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
    y[i] = T(0.5) * v * (T(1) + t);
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
    const T du = T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v);
    dx[i] += dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
  }
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    T mx = x[r * cols];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[r * cols + j]);
    T sum = 0;
    for (std::int64_t j = 0; j < cols; ++j) sum += std::exp(x[r * cols + j] - mx);
    for (std::int64_t j = 0; j < cols; ++j) y[r * cols + j] = std::exp(x[r * cols + j] - mx) / sum;
  }
}

template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::int64_t rows, std::int64_t cols) {
  // Explicit Jacobian: J_ij = y_i (delta_ij - y_j).
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    for (std::int64_t i = 0; i < cols; ++i) {
      T acc = 0;
      for (std::int64_t j = 0; j < cols; ++j)
        acc += (yr[j] * ((i == j ? T(1) : T(0)) - yr[i])) * dy[r * cols + j];
      dx[r * cols + i] += acc;
    }
  }
}

template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                     std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::int64_t j = 0; j < cols; ++j) mu += x[r * cols + j];
    mu /= T(cols);
    T var = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const T d = x[r * cols + j] - mu;
      var += d * d;
    }
    var /= T(cols);
    mean[r] = mu;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < cols; ++j)
      y[r * cols + j] = (x[r * cols + j] - mu) / std::sqrt(var + eps) * gamma[j] + beta[j];
  }
}

template <typename T>
void layer_norm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd,
                              const T* dy, T* dx, T* dgamma, T* dbeta, std::int64_t rows,
                              std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const T mu = mean[r];
    const T rs = rstd[r];
    for (std::int64_t j = 0; j < cols; ++j) {
      const T xhat = (x[r * cols + j] - mu) * rs;
      if (dgamma) dgamma[j] += dy[r * cols + j] * xhat;
      if (dbeta) dbeta[j] += dy[r * cols + j];
    }
    if (!dx) continue;
    // d xhat_j / d x_i = rs (delta_ij - 1/n - xhat_i xhat_j / n)
    for (std::int64_t i = 0; i < cols; ++i) {
      const T xi = (x[r * cols + i] - mu) * rs;
      T acc = 0;
      for (std::int64_t j = 0; j < cols; ++j) {
        const T xj = (x[r * cols + j] - mu) * rs;
        const T jac = rs * ((i == j ? T(1) : T(0)) - T(1) / T(cols) - xi * xj / T(cols));
        acc += jac * gamma[j] * dy[r * cols + j];
      }
      dx[r * cols + i] += acc;
    }
  }
}

template <typename T>
void gelu(const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    y[i] = T(0.5) * v * (T(1) + std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v)));
  }
}

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = x[i];
    const T u = T(kGeluC) * (v + T(kGeluA) * v * v * v);
    const T sech2 = T(1) / (std::cosh(u) * std::cosh(u));
    dx[i] += dy[i] * (T(0.5) * (T(1) + std::tanh(u)) +
                      T(0.5) * v * sech2 * T(kGeluC) * (T(1) + T(3 * kGeluA) * v * v));
  }
}

}  // namespace reference

int max_threads() { return omp_get_max_threads(); }
void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

#define HIVIT_INSTANTIATE_KERNELS(T)                                                           \
  template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const T*,         \
                        const T*, T*, bool);                                                    \
  template void softmax_rows<T>(const T*, T*, std::int64_t, std::int64_t);                      \
  template void softmax_rows_backward<T>(const T*, const T*, T*, std::int64_t, std::int64_t);   \
  template void layer_norm_rows<T>(const T*, const T*, const T*, T, T*, T*, T*, std::int64_t,   \
                                   std::int64_t);                                               \
  template void layer_norm_rows_backward<T>(const T*, const T*, const T*, const T*, const T*,   \
                                            T*, T*, T*, std::int64_t, std::int64_t);            \
  template void gelu<T>(const T*, T*, std::int64_t);                                            \
  template void gelu_backward<T>(const T*, const T*, T*, std::int64_t);                         \
  namespace reference {                                                                         \
  template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const T*,         \
                        const T*, T*, bool);                                                    \
  template void softmax_rows<T>(const T*, T*, std::int64_t, std::int64_t);                      \
  template void softmax_rows_backward<T>(const T*, const T*, T*, std::int64_t, std::int64_t);   \
  template void layer_norm_rows<T>(const T*, const T*, const T*, T, T*, T*, T*, std::int64_t,   \
                                   std::int64_t);                                               \
  template void layer_norm_rows_backward<T>(const T*, const T*, const T*, const T*, const T*,   \
                                            T*, T*, T*, std::int64_t, std::int64_t);            \
  template void gelu<T>(const T*, T*, std::int64_t);                                            \
  template void gelu_backward<T>(const T*, const T*, T*, std::int64_t);                         \
  }

HIVIT_INSTANTIATE_KERNELS(float)
HIVIT_INSTANTIATE_KERNELS(double)

}  // namespace hivit::kernels
