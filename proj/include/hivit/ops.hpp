#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hivit/tensor.hpp"

// Differentiable tensor operations. All are templated on the scalar type and
// instantiated for float (training, benchmarks) and double (gradient checks,
// 64-bit oracles).
namespace hivit {

// Batched product a[.., M, K] x b[.., K, N]; leading extents broadcast
// (missing or size-1 extents repeat).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

// x[.., in] * w[in, out] + b[out]. `b` may be an undefined tensor.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// a + b where b's shape equals a trailing suffix of a's shape.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Selects `count` rows along axis 1. `idx` holds either `count` indices shared
// by the whole batch or batch*count indices (one list per batch element).
// Indices must be in range and unique within each list.
template <typename T>
Tensor<T> gather_units(const Tensor<T>& x, std::span<const std::int64_t> idx, std::int64_t count);

// Inverse layout of gather_units: writes x[:, i] to slot idx[i] of a fresh
// [B, total, ..] tensor and fills every other slot with `fill`.
template <typename T>
Tensor<T> scatter_units(const Tensor<T>& x, std::span<const std::int64_t> idx,
                        std::int64_t total, const Tensor<T>& fill);

// Replaces x[:, idx[i]] with `fill`; the rest pass through.
template <typename T>
Tensor<T> replace_units(const Tensor<T>& x, std::span<const std::int64_t> idx,
                        std::int64_t count, const Tensor<T>& fill);

// qkv[B, N, 3*H*dh] laid out as (part, head, dh) -> [B, H, N, dh] for part 0..2.
template <typename T>
Tensor<T> select_heads(const Tensor<T>& qkv, int part, std::int64_t heads);

// [B, H, N, dh] -> [B, N, H*dh].
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

// [B, M, k, k, D] -> [B, M, k/2, k/2, 4D]. The 4D vector concatenates the
// 2x2 neighbours in order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x);

// images[B, C, H, W] -> [B, M, k, k, C*p*p] with masking units of `unit`
// pixels in row-major unit order and inner patches of p = `inner` pixels.
// Patch vectors are ordered (channel, row, col).
template <typename T>
Tensor<T> patchify_units(const Tensor<T>& images, std::int64_t unit, std::int64_t inner);

// out[b, h, p] = table[index[b*P + p], h] for table[R, H]; P = index.size()/batch.
template <typename T>
Tensor<T> bias_lookup(const Tensor<T>& table, std::span<const std::int64_t> index,
                      std::int64_t batch);

// Mean over axis 1 of [B, N, D].
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Multiplies every element of batch row b by factors[b] (drop path).
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors);

// Mean cross-entropy of logits[B, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// pred, target: [B, M, P]; weight: B*M per-unit weights (1 = scored).
// Returns sum_w(mean_p (pred - target)^2) / sum(weight).
template <typename T>
Tensor<T> masked_mse(const Tensor<T>& pred, std::span<const T> target, std::span<const T> weight);

}  // namespace hivit
