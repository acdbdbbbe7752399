#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hivit/mim.hpp"

// Independent references for the sparse encoder.
//   A: dense stages 1-2 over every unit, then keep the visible rows.
//   B: plain-loop main stage (double accumulation, no autodiff, no shared
//      kernels) over the visible tokens with their own unit coordinates.
namespace hivit {

struct OracleTolerance {
  double a = 1e-6;
  double b = 1e-5;
};

struct OracleReport {
  double err_a = 0;  // max |sparse - ref| / max |ref|
  double err_b = 0;
  std::int64_t worst_a = -1;  // flat index into [B, M', D3]
  std::int64_t worst_b = -1;
  Shape shape;
  OracleTolerance tol;

  bool pass_a() const { return err_a <= tol.a; }
  bool pass_b() const { return err_b <= tol.b; }
  bool pass() const { return pass_a() && pass_b(); }
  // Names the failing oracle and the (image, token, channel) of the worst
  // element; empty when both pass.
  std::string failure() const;
};

// Max |a - b| / max |b| and the index of the largest |a - b|.
template <typename T, typename U>
double relative_error(const std::vector<T>& a, const std::vector<U>& b, std::int64_t* worst = nullptr);

// Plain-loop main stage in double precision: abs pos, main blocks, final
// norm. x is [B, N, D3] laid out row-major.
template <typename T>
std::vector<double> reference_main_stage(const std::vector<T>& x, std::int64_t batch,
                                         const UnitLayout& layout, const HiViTConfig& cfg,
                                         const EncoderParams<T>& enc);

// Runs without drop path and without recording gradients.
template <typename T>
OracleReport oracle_check(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                          const EncoderParams<T>& enc, OracleTolerance tol);

}  // namespace hivit
