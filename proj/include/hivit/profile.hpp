#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hivit/config.hpp"

// Closed-form parameter and FLOP accounting. One FLOP here is one
// multiply-add of a matrix product; norms, activations, softmax and residual
// adds are not counted.
namespace hivit {

enum class CostKind { Token, Attention, Head, ParamOnly };
const char* cost_kind_name(CostKind k);

struct ProfileItem {
  std::string name;
  CostKind kind = CostKind::Token;
  std::int64_t params = 0;
  double flops_dense = 0;
  double flops_sparse = 0;
};

struct StageProfile {
  int stage = 0;
  int blocks = 0;
  std::int64_t tokens_dense = 0;  // tokens per image entering the stage's blocks
  std::int64_t tokens_sparse = 0;
  std::int64_t params = 0;
  double flops_dense = 0;
  double flops_sparse = 0;
  std::vector<ProfileItem> items;
};

struct ProfileReport {
  HiViTConfig cfg;
  double mask_ratio = 0.75;
  std::int64_t units = 0;
  std::int64_t visible = 0;
  std::vector<StageProfile> stages;
  std::int64_t total_params = 0;
  double total_flops_dense = 0;
  double total_flops_sparse = 0;

  // Sums of one cost kind over all stages.
  double flops_of(CostKind k, bool sparse) const;
};

// MACs of a two-layer MLP over `tokens` tokens of width `dim`.
double mlp_flops(std::int64_t tokens, std::int64_t dim, std::int64_t hidden);

ProfileReport count_params_flops(const HiViTConfig& cfg, double mask_ratio = 0.75);

inline constexpr const char* kProfileSchema = "hivit.profile/1";
std::string profile_json(const ProfileReport& r);
std::string profile_table(const ProfileReport& r);

struct GoldenCounts {
  const char* preset;
  double params_m;
  double flops_g;
};
inline constexpr GoldenCounts kGolden[] = {
    {"hivit-t", 19.2, 4.6},
    {"hivit-s", 37.5, 9.1},
    {"hivit-b", 66.4, 15.9},
};
inline constexpr double kParamTolerance = 0.01;
inline constexpr double kFlopTolerance = 0.05;

// Reference counts for a T/S/B config, matched by name.
std::optional<GoldenCounts> golden_for(const HiViTConfig& cfg);

// Empty when the report matches its golden values (or has none); otherwise a
// message naming the deviating quantity.
std::string check_golden(const ProfileReport& r);

}  // namespace hivit
