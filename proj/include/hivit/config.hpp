#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "hivit/kv.hpp"

namespace hivit {

// Full architectural description of a HiViT encoder plus the MIM decoder
// geometry. Stage 1 and 2 run intra-unit MLP blocks; stage 3 (main) runs
// global attention over one token per masking unit.
struct HiViTConfig {
  std::string name = "custom";
  int img_size = 224;
  int unit_size = 16;   // masking unit side in pixels
  int inner_patch = 4;  // smallest patch side; unit_size / inner_patch == 4
  int in_chans = 3;
  std::array<int, 3> depths{2, 2, 20};
  std::array<int, 3> dims{128, 256, 512};
  int heads = 8;  // main-stage attention heads
  double mlp_ratio_main = 4.0;
  double mlp_ratio_replace = 3.0;  // MLP standing in for early-stage attention
  bool use_rpe = true;
  bool use_abs_pos = true;
  double drop_path_rate = 0.0;
  int num_classes = 1000;  // 0 = headless
  double ln_eps = 1e-6;

  int decoder_depth = 6;
  int decoder_dim = 512;
  int decoder_heads = 16;

  // Negative control only: mixes neighbouring units after stage 1, which
  // breaks unit locality on purpose.
  bool debug_cross_unit_mix = false;

  int grid() const { return img_size / unit_size; }
  int num_units() const { return grid() * grid(); }
  int unit_tokens_side() const { return unit_size / inner_patch; }
  int total_blocks() const { return depths[0] + depths[1] + depths[2]; }
  int hidden(int dim, double ratio) const { return static_cast<int>(dim * ratio); }
  int patch_dim() const { return in_chans * inner_patch * inner_patch; }
  int pixels_per_unit() const { return unit_size * unit_size * in_chans; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
};

// Presets: T, S, B (Table-1 variants), toy, small, bench-medium, custom.
// Also accepts hivit-t / hivit-s / hivit-b.
HiViTConfig make_config(std::string_view preset);

// Visible units kept at a mask ratio: round((1 - ratio) * M) clamped to
// [1, M - 1]. Throws ConfigError unless 0 < ratio < 1 and M >= 2.
int visible_count(int num_units, double mask_ratio);
bool is_preset_name(std::string_view name);

// Key-value config text. A `preset = <name>` line (if present) seeds the
// defaults; every other key overrides one field.
HiViTConfig parse_config(std::string_view text, std::string_view origin = "<config>");
HiViTConfig load_config(const std::string& path);
// Preset name or config file path.
HiViTConfig resolve_config(const std::string& name_or_path);
std::string to_text(const HiViTConfig& cfg);

}  // namespace hivit
