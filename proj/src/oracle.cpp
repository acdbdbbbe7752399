#include "hivit/oracle.hpp"

#include <cmath>
#include <sstream>

#include "hivit/ops.hpp"

namespace hivit {
namespace {

using Mat = std::vector<double>;  // row-major [rows, cols]

template <typename T>
Mat ln_rows(const Mat& x, std::int64_t rows, std::int64_t d, const Norm<T>& n, double eps) {
  Mat y(x.size());
  const auto g = n.gamma.data();
  const auto bt = n.beta.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * d];
    double mu = 0, var = 0;
    for (std::int64_t c = 0; c < d; ++c) mu += xr[c];
    mu /= d;
    for (std::int64_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t c = 0; c < d; ++c) y[r * d + c] = (xr[c] - mu) * inv * g[c] + bt[c];
  }
  return y;
}

template <typename T>
Mat affine(const Mat& x, std::int64_t rows, const Linear<T>& l) {
  const std::int64_t in = l.w.dim(0), out = l.w.dim(1);
  const auto w = l.w.data();
  Mat y(static_cast<std::size_t>(rows * out), 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < out; ++o) {
      double s = l.b.defined() ? static_cast<double>(l.b.data()[o]) : 0.0;
      for (std::int64_t i = 0; i < in; ++i) s += x[r * in + i] * w[i * out + o];
      y[r * out + o] = s;
    }
  return y;
}

double gelu_tanh(double x) {
  const double k = std::sqrt(2.0 / std::acos(-1.0));
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

template <typename T>
void main_block(Mat& x, std::int64_t n, std::int64_t d, const MainBlock<T>& blk,
                const UnitLayout& layout, std::int64_t b, double eps) {
  const std::int64_t heads = blk.attn.heads, dh = d / heads;
  const Mat qkv = affine(ln_rows(x, n, d, blk.norm1, eps), n, blk.attn.qkv);
  Mat o(static_cast<std::size_t>(n * d), 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> s(static_cast<std::size_t>(n));
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::int64_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::int64_t c = 0; c < dh; ++c)
          dot += qkv[i * 3 * d + h * dh + c] * qkv[j * 3 * d + d + h * dh + c];
        s[j] = dot * scale;
        if (blk.attn.rpe_table.defined())
          s[j] += blk.attn.rpe_table.data()[rpe_row(layout.unit(b, i), layout.unit(b, j), layout.grid) * heads + h];
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::int64_t j = 0; j < n; ++j) z += (s[j] = std::exp(s[j] - mx));
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t c = 0; c < dh; ++c)
          o[i * d + h * dh + c] += s[j] / z * qkv[j * 3 * d + 2 * d + h * dh + c];
    }
  const Mat p = affine(o, n, blk.attn.proj);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += p[i];
  Mat hdn = affine(ln_rows(x, n, d, blk.norm2, eps), n, blk.mlp.fc1);
  for (auto& v : hdn) v = gelu_tanh(v);
  const Mat m = affine(hdn, n, blk.mlp.fc2);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += m[i];
}

}  // namespace

std::string OracleReport::failure() const {
  auto where = [&](std::int64_t flat) {
    std::ostringstream os;
    if (shape.size() == 3 && flat >= 0) {
      const std::int64_t n = shape[1], d = shape[2];
      os << " at image " << flat / (n * d) << ", token " << (flat / d) % n << ", channel " << flat % d;
    }
    return os.str();
  };
  std::ostringstream os;
  if (!pass_a())
    os << "oracle A (stages 1-2): relative error " << err_a << " > tol " << tol.a << where(worst_a);
  if (!pass_b()) {
    if (!pass_a()) os << "; ";
    os << "oracle B (main stage): relative error " << err_b << " > tol " << tol.b << where(worst_b);
  }
  return os.str();
}

template <typename T, typename U>
double relative_error(const std::vector<T>& a, const std::vector<U>& b, std::int64_t* worst) {
  if (a.size() != b.size()) throw ShapeError("relative_error: sizes differ");
  double num = 0, den = 0;
  std::int64_t arg = a.empty() ? -1 : 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    if (!(diff <= num)) {  // also catches NaN
      num = diff;
      arg = static_cast<std::int64_t>(i);
    }
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  if (worst) *worst = arg;
  if (std::isnan(num)) return NAN;
  return den > 0 ? num / den : num;
}

template <typename T>
std::vector<double> reference_main_stage(const std::vector<T>& x, std::int64_t batch,
                                         const UnitLayout& layout, const HiViTConfig& cfg,
                                         const EncoderParams<T>& enc) {
  const std::int64_t n = layout.count, d = cfg.dims[2];
  if (static_cast<std::int64_t>(x.size()) != batch * n * d)
    throw ShapeError("reference_main_stage: input size does not match [B, N, D3]");
  const auto pos = cfg.use_abs_pos ? sincos_pos_embed(cfg.grid(), static_cast<int>(d)) : std::vector<double>{};
  std::vector<double> out;
  out.reserve(x.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    Mat h(x.begin() + b * n * d, x.begin() + (b + 1) * n * d);
    if (cfg.use_abs_pos)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c) h[i * d + c] += pos[layout.unit(b, i) * d + c];
    for (const auto& blk : enc.main) main_block(h, n, d, blk, layout, b, cfg.ln_eps);
    h = ln_rows(h, n, d, enc.norm, cfg.ln_eps);
    out.insert(out.end(), h.begin(), h.end());
  }
  return out;
}

template <typename T>
OracleReport oracle_check(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                          const EncoderParams<T>& enc, OracleTolerance tol) {
  NoGradGuard guard;
  const ForwardOptions eval{};
  const std::span<const std::int64_t> vis(mask.visible);

  // Sparse path, split at the main-stage boundary.
  auto sparse_local = local_stages(
      embed_units(gather_units(unit_patches(images, cfg), vis, mask.kept), enc), cfg, enc, eval);
  auto sparse_out = encode_sparse(images, mask, cfg, enc, eval);

  // A: dense stages 1-2, then restrict to the visible units.
  auto dense_local = local_stages(patch_embed(images, cfg, enc), cfg, enc, eval);
  auto dense_kept = gather_units(dense_local, vis, mask.kept);

  OracleReport r;
  r.tol = tol;
  r.shape = sparse_out.shape();
  const std::vector<T> a_sparse(sparse_local.data().begin(), sparse_local.data().end());
  const std::vector<T> a_ref(dense_kept.data().begin(), dense_kept.data().end());
  r.err_a = relative_error(a_sparse, a_ref, &r.worst_a);

  // B: main stage over exactly the visible tokens, computed independently.
  const auto b_ref = reference_main_stage(a_ref, images.dim(0), mask.layout(), cfg, enc);
  const std::vector<T> b_sparse(sparse_out.data().begin(), sparse_out.data().end());
  r.err_b = relative_error(b_sparse, b_ref, &r.worst_b);
  return r;
}

template double relative_error(const std::vector<float>&, const std::vector<float>&, std::int64_t*);
template double relative_error(const std::vector<double>&, const std::vector<double>&, std::int64_t*);
template double relative_error(const std::vector<float>&, const std::vector<double>&, std::int64_t*);
template std::vector<double> reference_main_stage(const std::vector<float>&, std::int64_t,
                                                  const UnitLayout&, const HiViTConfig&,
                                                  const EncoderParams<float>&);
template std::vector<double> reference_main_stage(const std::vector<double>&, std::int64_t,
                                                  const UnitLayout&, const HiViTConfig&,
                                                  const EncoderParams<double>&);
template OracleReport oracle_check(const Tensor<float>&, const BatchMask&, const HiViTConfig&,
                                   const EncoderParams<float>&, OracleTolerance);
template OracleReport oracle_check(const Tensor<double>&, const BatchMask&, const HiViTConfig&,
                                   const EncoderParams<double>&, OracleTolerance);

}  // namespace hivit
