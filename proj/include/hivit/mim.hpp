#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hivit/config.hpp"
#include "hivit/model.hpp"

namespace hivit {

// Which masking units of one image stay visible.
struct MaskPlan {
  int num_units = 0;
  int grid = 0;
  double mask_ratio = 0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> visible_idx;  // sorted
  std::vector<std::int64_t> masked_idx;   // sorted complement

  std::int64_t visible() const { return static_cast<std::int64_t>(visible_idx.size()); }
  // (row, col) of a unit on the grid.
  std::pair<int, int> coord(std::int64_t unit) const {
    return {static_cast<int>(unit / grid), static_cast<int>(unit % grid)};
  }

  // One text line: "mask M=16 grid=4 ratio=0.75 seed=7 visible=0,3,5,9".
  std::string serialize() const;
  static MaskPlan parse(std::string_view line);
};

// Uniform subset of visible_count(M, ratio) units without replacement; a
// pure function of (M, ratio, seed).
MaskPlan sample_mask(int num_units, double mask_ratio, std::uint64_t seed, int grid = 0);
MaskPlan all_visible(int num_units, int grid = 0);

// Index lists for a whole batch: either one plan shared by every image
// (`visible` has M' entries) or one plan per image (B*M' entries).
struct BatchMask {
  std::int64_t batch = 0;
  int num_units = 0;
  int grid = 0;
  std::int64_t kept = 0;
  std::vector<std::int64_t> visible;
  std::vector<std::int64_t> masked;

  bool shared() const { return static_cast<std::int64_t>(visible.size()) == kept; }
  UnitLayout layout() const { return {visible, kept, grid}; }
  // 1 for masked units, 0 for visible ones; B*M entries.
  template <typename T>
  std::vector<T> masked_weights() const;

  static BatchMask shared_plan(const MaskPlan& plan, std::int64_t batch);
  // All plans must keep the same number of units.
  static BatchMask per_image(const std::vector<MaskPlan>& plans);
};

// Independent plan per image; plan i uses seed mixed from (seed, i).
BatchMask sample_batch_mask(const HiViTConfig& cfg, std::int64_t batch, double mask_ratio,
                            std::uint64_t seed);

template <typename T>
struct DecoderParams {
  Linear<T> embed;       // D3 -> D_dec
  Tensor<T> mask_token;  // [D_dec]
  std::vector<MainBlock<T>> blocks;
  Norm<T> norm;
  Linear<T> pred;  // D_dec -> unit_size^2 * C
};

template <typename T>
DecoderParams<T> init_decoder(const HiViTConfig& cfg, std::mt19937_64& rng);

template <typename T>
void collect_decoder_params(DecoderParams<T>& dec, const HiViTConfig& cfg, ParamList<T>& out,
                            const std::string& prefix = "decoder.");

// Patch-embeds and keeps only visible units, then runs stages 1-2 and the
// main stage over the M' serialized tokens. Returns [B, M', D3].
template <typename T>
Tensor<T> encode_sparse(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                        const EncoderParams<T>& enc, const ForwardOptions& opts = {});

// Visible latents [B, M', D3] -> per-unit pixel predictions [B, M, P].
template <typename T>
Tensor<T> decode(const Tensor<T>& latent, const BatchMask& mask, const HiViTConfig& cfg,
                 const DecoderParams<T>& dec, const ForwardOptions& opts = {});

// Per-unit pixel targets [B, M, P] with P ordered (channel, row, col). With
// `normalize`, each unit is standardized with its own mean and variance.
template <typename T>
std::vector<T> unit_targets(const Tensor<T>& images, const HiViTConfig& cfg, bool normalize,
                            double eps = 1e-6);

// Mean over masked units of the per-unit mean squared error.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& images, const BatchMask& mask,
                              const HiViTConfig& cfg, bool normalize);

template <typename T>
struct MimModel {
  EncoderParams<T> enc;
  DecoderParams<T> dec;
};

// Encoder without classifier head plus decoder.
template <typename T>
MimModel<T> init_mim(const HiViTConfig& cfg, std::mt19937_64& rng);

template <typename T>
ParamList<T> mim_params(MimModel<T>& m, const HiViTConfig& cfg);

template <typename T>
Tensor<T> mim_loss(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                   const MimModel<T>& m, const ForwardOptions& opts = {}, bool normalize = true);

// Mask-token baseline: every unit runs through every stage, masked units
// with a learnable token in place of their embeddings, then a linear
// per-unit pixel head.
template <typename T>
struct DenseBaseline {
  EncoderParams<T> enc;
  Tensor<T> mask_token;  // [D1]
  Linear<T> pred;        // D3 -> unit_size^2 * C
};

template <typename T>
DenseBaseline<T> init_dense_baseline(const HiViTConfig& cfg, std::mt19937_64& rng);

template <typename T>
ParamList<T> dense_baseline_params(DenseBaseline<T>& m, const HiViTConfig& cfg);

template <typename T>
Tensor<T> dense_baseline_loss(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                              const DenseBaseline<T>& m, const ForwardOptions& opts = {},
                              bool normalize = true);

}  // namespace hivit
