#pragma once

#include <cstdint>

// Dense row-major kernels used by the autodiff ops.
//
// Every parallel kernel splits work over output rows (or output columns for
// the column reductions) and never reduces across threads, so results are
// bit-identical for any thread count. The serial versions in `reference`
// are straightforward loops kept as the test oracle and benchmark baseline.
namespace hivit::kernels {

// C[m,n] (+)= op(A) * op(B); op(A) is m x k, op(B) is k x n.
// trans_a: A is stored k x m. trans_b: B is stored n x k.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate);

// Numerically stable softmax over each row of length `cols`.
template <typename T>
void softmax_rows(const T* x, T* y, std::int64_t rows, std::int64_t cols);

// dx += J^T dy, with y the softmax output.
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::int64_t rows, std::int64_t cols);

// y = (x - mean) * rstd * gamma + beta per row; mean/rstd saved per row.
template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                     std::int64_t rows, std::int64_t cols);

// Accumulates into dx, dgamma, dbeta (any of which may be null).
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd,
                              const T* dy, T* dx, T* dgamma, T* dbeta, std::int64_t rows,
                              std::int64_t cols);

// tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
void gelu(const T* x, T* y, std::int64_t n);

template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::int64_t n);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void softmax_rows(const T* x, T* y, std::int64_t rows, std::int64_t cols);
template <typename T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::int64_t rows, std::int64_t cols);
template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T eps, T* y, T* mean, T* rstd,
                     std::int64_t rows, std::int64_t cols);
template <typename T>
void layer_norm_rows_backward(const T* x, const T* gamma, const T* mean, const T* rstd,
                              const T* dy, T* dx, T* dgamma, T* dbeta, std::int64_t rows,
                              std::int64_t cols);
template <typename T>
void gelu(const T* x, T* y, std::int64_t n);
template <typename T>
void gelu_backward(const T* x, const T* dy, T* dx, std::int64_t n);

}  // namespace reference

int max_threads();
void set_threads(int n);

}  // namespace hivit::kernels
