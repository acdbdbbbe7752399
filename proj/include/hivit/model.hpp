#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hivit/config.hpp"
#include "hivit/tensor.hpp"

namespace hivit {

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out], may be undefined
};

template <typename T>
struct Norm {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;
};

// Stage 1/2 block: two per-token (norm, MLP) residual branches. The first MLP
// replaces window attention, so nothing here looks outside its own token.
template <typename T>
struct EarlyBlock {
  Norm<T> norm1;
  Mlp<T> mlp1;  // hidden = mlp_ratio_replace * D
  Norm<T> norm2;
  Mlp<T> mlp2;  // hidden = mlp_ratio_main * D
  double drop_path = 0;
};

template <typename T>
struct Attention {
  Linear<T> qkv;
  Linear<T> proj;
  Tensor<T> rpe_table;  // [(2G-1)^2, heads] or undefined
  int heads = 1;
};

template <typename T>
struct MainBlock {
  Norm<T> norm1;
  Attention<T> attn;
  Norm<T> norm2;
  Mlp<T> mlp;
  double drop_path = 0;
};

// 2x2 child tokens -> LN(4D) -> bias-free linear to 2D.
template <typename T>
struct PatchMerge {
  Norm<T> norm;
  Linear<T> reduce;
};

template <typename T>
struct EncoderParams {
  Linear<T> patch_embed;
  std::vector<EarlyBlock<T>> stage1;
  PatchMerge<T> merge1;
  std::vector<EarlyBlock<T>> stage2;
  PatchMerge<T> merge2;
  std::vector<MainBlock<T>> main;
  Norm<T> norm;
  Linear<T> head;  // classifier; undefined when num_classes == 0
};

// A parameter with its optimizer metadata. `layer` runs from -1 (embedding)
// through total_blocks (final norm and classifier).
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  int layer = 0;
  bool decay = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

struct ForwardOptions {
  bool training = false;  // enables drop path
  std::mt19937_64* rng = nullptr;
};

// Which masking units a token batch holds. `units` has either `count`
// entries shared by the batch or batch*count entries.
struct UnitLayout {
  std::span<const std::int64_t> units;
  std::int64_t count = 0;
  int grid = 0;

  bool shared() const { return static_cast<std::int64_t>(units.size()) == count; }
  std::int64_t unit(std::int64_t b, std::int64_t i) const {
    return units[static_cast<std::size_t>(shared() ? i : b * count + i)];
  }
};

std::vector<std::int64_t> all_units(int num_units);

// Truncated normal (sigma 0.02, cut at 2 sigma) weights, zero biases, unit
// gamma. Drop-path rates rise linearly over all blocks to drop_path_rate.
template <typename T>
EncoderParams<T> init_encoder(const HiViTConfig& cfg, std::mt19937_64& rng);

template <typename T>
void collect_params(EncoderParams<T>& enc, const HiViTConfig& cfg, ParamList<T>& out,
                    const std::string& prefix = "encoder.", bool include_head = true);

template <typename T>
Tensor<T> truncated_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02);

// Fixed 2-D sine-cosine table [grid*grid, dim] over unit coordinates.
std::vector<double> sincos_pos_embed(int grid, int dim);

// Row of the relative-position table for units a, b on a grid of side g.
inline std::int64_t rpe_row(std::int64_t a, std::int64_t b, int g) {
  const std::int64_t dr = a / g - b / g + g - 1;
  const std::int64_t dc = a % g - b % g + g - 1;
  return dr * (2 * g - 1) + dc;
}

// images [B, C, H, W] -> unit-major pixel patches [B, M, k, k, C*p*p].
template <typename T>
Tensor<T> unit_patches(const Tensor<T>& images, const HiViTConfig& cfg);

// Patch pixels -> D1 tokens; shape [B, N, k, k, D1].
template <typename T>
Tensor<T> embed_units(const Tensor<T>& patches, const EncoderParams<T>& enc);

// patch_embed = unit_patches followed by embed_units.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const HiViTConfig& cfg, const EncoderParams<T>& enc);

template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double rate, const ForwardOptions& opts);

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const Mlp<T>& mlp);

template <typename T>
Tensor<T> early_block_forward(const Tensor<T>& x, const EarlyBlock<T>& blk, const HiViTConfig& cfg,
                              const ForwardOptions& opts);

template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x, const PatchMerge<T>& merge, const HiViTConfig& cfg);

// Global multi-head self-attention block over x [B, N, D]; `layout` gives the
// unit of every token for the relative-position bias.
template <typename T>
Tensor<T> main_block_forward(const Tensor<T>& x, const MainBlock<T>& blk, const UnitLayout& layout,
                             double ln_eps, const ForwardOptions& opts);

// Stages 1-2 and both merges on embedded unit tokens [B, N, k, k, D1];
// returns [B, N, D3]. Purely per-unit unless debug_cross_unit_mix is set.
template <typename T>
Tensor<T> local_stages(const Tensor<T>& x, const HiViTConfig& cfg, const EncoderParams<T>& enc,
                       const ForwardOptions& opts);

// Absolute position (if enabled), main blocks and the final norm.
template <typename T>
Tensor<T> main_stage(const Tensor<T>& x, const UnitLayout& layout, const HiViTConfig& cfg,
                     const EncoderParams<T>& enc, const ForwardOptions& opts);

template <typename T>
Tensor<T> encoder_forward_dense(const Tensor<T>& images, const HiViTConfig& cfg,
                                const EncoderParams<T>& enc, const ForwardOptions& opts = {});

// Dense encoder -> token mean -> classifier.
template <typename T>
Tensor<T> supervised_forward(const Tensor<T>& images, const HiViTConfig& cfg,
                             const EncoderParams<T>& enc, const ForwardOptions& opts = {});

}  // namespace hivit
