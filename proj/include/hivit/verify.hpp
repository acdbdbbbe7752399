#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hivit/config.hpp"
#include "hivit/oracle.hpp"

namespace hivit {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_error = 0;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  OracleTolerance tol;
  int oracle_trials = 10;
  int locality_trials = 10;
  int grad_samples = 20;
  double grad_tol = 1e-4;
};

// Returns the largest unit-locality violation: for a perturbation of unit
// `unit`, the number of elements of other units that changed in the
// patch-embedding or the stage-1/2 output. 0 means bit-identical.
std::int64_t locality_violations(const HiViTConfig& cfg, std::uint64_t seed, int unit);

struct GradCheck {
  double max_rel_error = 0;
  std::string worst_param;
  int samples = 0;
};

// Central differences (h = 1e-5, double precision) of the masked
// reconstruction loss against autodiff at `samples` random scalar entries.
// Relative error is |fd - ad| / max(|fd|, |ad|, 1e-10).
GradCheck mim_gradient_check(const HiViTConfig& cfg, std::uint64_t seed, int samples);

// Oracle A/B, unit locality, gradient check, optimizer purity and checkpoint
// round trip.
std::vector<CheckResult> run_verify(const HiViTConfig& cfg, const VerifyOptions& opts);

}  // namespace hivit
