#include "hivit/model.hpp"

#include <cmath>

#include "hivit/ops.hpp"

namespace hivit {
namespace {

template <typename T>
Linear<T> make_linear(std::int64_t in, std::int64_t out, bool bias, std::mt19937_64& rng) {
  Linear<T> l;
  l.w = truncated_normal<T>({in, out}, rng);
  if (bias) l.b = Tensor<T>::zeros({out}, true);
  return l;
}

template <typename T>
Norm<T> make_norm(std::int64_t dim) {
  return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
Mlp<T> make_mlp(std::int64_t dim, std::int64_t hidden, std::mt19937_64& rng) {
  return {make_linear<T>(dim, hidden, true, rng), make_linear<T>(hidden, dim, true, rng)};
}

template <typename T>
EarlyBlock<T> make_early(const HiViTConfig& cfg, int dim, double dp, std::mt19937_64& rng) {
  EarlyBlock<T> b;
  b.norm1 = make_norm<T>(dim);
  b.mlp1 = make_mlp<T>(dim, cfg.hidden(dim, cfg.mlp_ratio_replace), rng);
  b.norm2 = make_norm<T>(dim);
  b.mlp2 = make_mlp<T>(dim, cfg.hidden(dim, cfg.mlp_ratio_main), rng);
  b.drop_path = dp;
  return b;
}

template <typename T>
PatchMerge<T> make_merge(int dim, std::mt19937_64& rng) {
  return {make_norm<T>(4 * dim), make_linear<T>(4 * dim, 2 * dim, false, rng)};
}

void push_linear_names(auto& out, const std::string& name, auto& lin, int layer) {
  out.push_back({name + ".w", lin.w, layer, true});
  if (lin.b.defined()) out.push_back({name + ".b", lin.b, layer, false});
}

void push_norm_names(auto& out, const std::string& name, auto& norm, int layer) {
  out.push_back({name + ".gamma", norm.gamma, layer, false});
  out.push_back({name + ".beta", norm.beta, layer, false});
}

void push_mlp_names(auto& out, const std::string& name, auto& mlp, int layer) {
  push_linear_names(out, name + ".fc1", mlp.fc1, layer);
  push_linear_names(out, name + ".fc2", mlp.fc2, layer);
}

void push_early(auto& out, const std::string& name, auto& blk, int layer) {
  push_norm_names(out, name + ".norm1", blk.norm1, layer);
  push_mlp_names(out, name + ".mlp1", blk.mlp1, layer);
  push_norm_names(out, name + ".norm2", blk.norm2, layer);
  push_mlp_names(out, name + ".mlp2", blk.mlp2, layer);
}

}  // namespace

std::vector<std::int64_t> all_units(int num_units) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(num_units));
  for (int i = 0; i < num_units; ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

template <typename T>
Tensor<T> truncated_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) {
    double s;
    do s = dist(rng);
    while (std::abs(s) > 2 * stddev);
    v = static_cast<T>(s);
  }
  return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

template <typename T>
EncoderParams<T> init_encoder(const HiViTConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int L = cfg.total_blocks();
  auto rate = [&](int i) { return L > 1 ? cfg.drop_path_rate * i / (L - 1) : 0.0; };
  EncoderParams<T> enc;
  enc.patch_embed = make_linear<T>(cfg.patch_dim(), cfg.dims[0], true, rng);
  int idx = 0;
  for (int i = 0; i < cfg.depths[0]; ++i) enc.stage1.push_back(make_early<T>(cfg, cfg.dims[0], rate(idx++), rng));
  enc.merge1 = make_merge<T>(cfg.dims[0], rng);
  for (int i = 0; i < cfg.depths[1]; ++i) enc.stage2.push_back(make_early<T>(cfg, cfg.dims[1], rate(idx++), rng));
  enc.merge2 = make_merge<T>(cfg.dims[1], rng);
  const int d = cfg.dims[2];
  const int g = cfg.grid();
  for (int i = 0; i < cfg.depths[2]; ++i) {
    MainBlock<T> b;
    b.norm1 = make_norm<T>(d);
    b.attn.qkv = make_linear<T>(d, 3 * d, true, rng);
    b.attn.proj = make_linear<T>(d, d, true, rng);
    b.attn.heads = cfg.heads;
    if (cfg.use_rpe) b.attn.rpe_table = truncated_normal<T>({(2 * g - 1) * (2 * g - 1), cfg.heads}, rng);
    b.norm2 = make_norm<T>(d);
    b.mlp = make_mlp<T>(d, cfg.hidden(d, cfg.mlp_ratio_main), rng);
    b.drop_path = rate(idx++);
    enc.main.push_back(std::move(b));
  }
  enc.norm = make_norm<T>(d);
  if (cfg.num_classes > 0) enc.head = make_linear<T>(d, cfg.num_classes, true, rng);
  return enc;
}

template <typename T>
void collect_params(EncoderParams<T>& enc, const HiViTConfig& cfg, ParamList<T>& out,
                    const std::string& prefix, bool include_head) {
  const int L = cfg.total_blocks();
  push_linear_names(out, prefix + "patch_embed", enc.patch_embed, -1);
  int layer = 0;
  for (std::size_t i = 0; i < enc.stage1.size(); ++i)
    push_early(out, prefix + "stage1." + std::to_string(i), enc.stage1[i], layer++);
  // Merges share the layer index of the block that consumes their output.
  push_norm_names(out, prefix + "merge1.norm", enc.merge1.norm, layer);
  push_linear_names(out, prefix + "merge1.reduce", enc.merge1.reduce, layer);
  for (std::size_t i = 0; i < enc.stage2.size(); ++i)
    push_early(out, prefix + "stage2." + std::to_string(i), enc.stage2[i], layer++);
  push_norm_names(out, prefix + "merge2.norm", enc.merge2.norm, layer);
  push_linear_names(out, prefix + "merge2.reduce", enc.merge2.reduce, layer);
  for (std::size_t i = 0; i < enc.main.size(); ++i) {
    auto& b = enc.main[i];
    const std::string n = prefix + "main." + std::to_string(i);
    push_norm_names(out, n + ".norm1", b.norm1, layer);
    push_linear_names(out, n + ".attn.qkv", b.attn.qkv, layer);
    push_linear_names(out, n + ".attn.proj", b.attn.proj, layer);
    if (b.attn.rpe_table.defined()) out.push_back({n + ".attn.rpe", b.attn.rpe_table, layer, false});
    push_norm_names(out, n + ".norm2", b.norm2, layer);
    push_mlp_names(out, n + ".mlp", b.mlp, layer);
    ++layer;
  }
  push_norm_names(out, prefix + "norm", enc.norm, L);
  if (include_head && enc.head.w.defined()) push_linear_names(out, "head", enc.head, L);
}

std::vector<double> sincos_pos_embed(int grid, int dim) {
  // First half encodes the column, second half the row; each half is
  // [sin(pos * w_i), cos(pos * w_i)] with w_i = 10000^(-i / (dim/4)).
  const int quarter = dim / 4;
  std::vector<double> out(static_cast<std::size_t>(grid) * grid * dim);
  for (int u = 0; u < grid * grid; ++u) {
    const double pos[2] = {static_cast<double>(u % grid), static_cast<double>(u / grid)};
    for (int half = 0; half < 2; ++half)
      for (int i = 0; i < quarter; ++i) {
        const double w = std::pow(10000.0, -static_cast<double>(i) / quarter);
        double* row = out.data() + static_cast<std::size_t>(u) * dim + half * 2 * quarter;
        row[i] = std::sin(pos[half] * w);
        row[quarter + i] = std::cos(pos[half] * w);
      }
  }
  return out;
}

template <typename T>
Tensor<T> unit_patches(const Tensor<T>& images, const HiViTConfig& cfg) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_chans || images.dim(2) != cfg.img_size ||
      images.dim(3) != cfg.img_size)
    throw ShapeError("images " + shape_str(images.shape()) + " do not match config img_size " +
                     std::to_string(cfg.img_size));
  return patchify_units(images, cfg.unit_size, cfg.inner_patch);
}

template <typename T>
Tensor<T> embed_units(const Tensor<T>& patches, const EncoderParams<T>& enc) {
  return linear(patches, enc.patch_embed.w, enc.patch_embed.b);
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& images, const HiViTConfig& cfg, const EncoderParams<T>& enc) {
  return embed_units(unit_patches(images, cfg), enc);
}

template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double rate, const ForwardOptions& opts) {
  if (!opts.training || rate <= 0) return branch;
  if (!opts.rng) throw ContractError("drop_path: training mode needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<T> factors(static_cast<std::size_t>(branch.dim(0)));
  for (auto& f : factors) f = keep(*opts.rng) ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  return scale_rows(branch, std::span<const T>(factors));
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const Mlp<T>& mlp) {
  return linear(gelu(linear(x, mlp.fc1.w, mlp.fc1.b)), mlp.fc2.w, mlp.fc2.b);
}

template <typename T>
Tensor<T> early_block_forward(const Tensor<T>& x, const EarlyBlock<T>& blk, const HiViTConfig& cfg,
                              const ForwardOptions& opts) {
  const T eps = static_cast<T>(cfg.ln_eps);
  auto h = add(x, drop_path(mlp_forward(layer_norm(x, blk.norm1.gamma, blk.norm1.beta, eps), blk.mlp1),
                            blk.drop_path, opts));
  return add(h, drop_path(mlp_forward(layer_norm(h, blk.norm2.gamma, blk.norm2.beta, eps), blk.mlp2),
                          blk.drop_path, opts));
}

template <typename T>
Tensor<T> patch_merge(const Tensor<T>& x, const PatchMerge<T>& merge, const HiViTConfig& cfg) {
  auto s = space_to_depth(x);
  auto n = layer_norm(s, merge.norm.gamma, merge.norm.beta, static_cast<T>(cfg.ln_eps));
  return linear(n, merge.reduce.w, merge.reduce.b);
}

template <typename T>
Tensor<T> main_block_forward(const Tensor<T>& x, const MainBlock<T>& blk, const UnitLayout& layout,
                             double ln_eps, const ForwardOptions& opts) {
  if (x.rank() != 3) throw ShapeError("main block expects [B, N, D], got " + shape_str(x.shape()));
  const std::int64_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  const std::int64_t heads = blk.attn.heads;
  if (layout.count != n ||
      (static_cast<std::int64_t>(layout.units.size()) != n &&
       static_cast<std::int64_t>(layout.units.size()) != batch * n))
    throw ShapeError("main block: " + std::to_string(layout.units.size()) +
                     " unit coordinates for " + std::to_string(n) + " tokens");
  const T eps = static_cast<T>(ln_eps);
  auto h = layer_norm(x, blk.norm1.gamma, blk.norm1.beta, eps);
  auto qkv = linear(h, blk.attn.qkv.w, blk.attn.qkv.b);
  const T sc = T(1) / std::sqrt(static_cast<T>(d / heads));
  auto q = scale(select_heads(qkv, 0, heads), sc);
  auto k = select_heads(qkv, 1, heads);
  auto v = select_heads(qkv, 2, heads);
  auto scores = matmul(q, transpose_last2(k));
  if (blk.attn.rpe_table.defined()) {
    const std::int64_t lists = layout.shared() ? 1 : batch;
    std::vector<std::int64_t> rows(static_cast<std::size_t>(lists * n * n));
    for (std::int64_t b = 0; b < lists; ++b)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          rows[(b * n + i) * n + j] = rpe_row(layout.unit(b, i), layout.unit(b, j), layout.grid);
    auto bias = bias_lookup(blk.attn.rpe_table, std::span<const std::int64_t>(rows), lists);
    bias = layout.shared() ? reshape(bias, {heads, n, n}) : reshape(bias, {batch, heads, n, n});
    scores = add(scores, bias);
  }
  auto attn = softmax_lastdim(scores);
  auto o = linear(merge_heads(matmul(attn, v)), blk.attn.proj.w, blk.attn.proj.b);
  auto y = add(x, drop_path(o, blk.drop_path, opts));
  return add(y, drop_path(mlp_forward(layer_norm(y, blk.norm2.gamma, blk.norm2.beta, eps), blk.mlp),
                          blk.drop_path, opts));
}

template <typename T>
Tensor<T> local_stages(const Tensor<T>& x, const HiViTConfig& cfg, const EncoderParams<T>& enc,
                       const ForwardOptions& opts) {
  auto h = x;
  for (const auto& blk : enc.stage1) h = early_block_forward(h, blk, cfg, opts);
  if (cfg.debug_cross_unit_mix) {
    const std::int64_t n = h.dim(1);
    std::vector<std::int64_t> next(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) next[i] = (i + 1) % n;
    h = add(h, scale(gather_units(h, std::span<const std::int64_t>(next), n), T(0.5)));
  }
  h = patch_merge(h, enc.merge1, cfg);
  for (const auto& blk : enc.stage2) h = early_block_forward(h, blk, cfg, opts);
  h = patch_merge(h, enc.merge2, cfg);
  return reshape(h, {h.dim(0), h.dim(1), static_cast<std::int64_t>(cfg.dims[2])});
}

template <typename T>
Tensor<T> main_stage(const Tensor<T>& x, const UnitLayout& layout, const HiViTConfig& cfg,
                     const EncoderParams<T>& enc, const ForwardOptions& opts) {
  auto h = x;
  if (cfg.use_abs_pos) {
    const std::int64_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
    const auto table = sincos_pos_embed(cfg.grid(), static_cast<int>(d));
    const std::int64_t lists = layout.shared() ? 1 : batch;
    std::vector<T> pos(static_cast<std::size_t>(lists * n * d));
    for (std::int64_t b = 0; b < lists; ++b)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c)
          pos[(b * n + i) * d + c] = static_cast<T>(table[layout.unit(b, i) * d + c]);
    Shape shape = layout.shared() ? Shape{n, d} : Shape{batch, n, d};
    h = add(h, Tensor<T>::from_data(std::move(shape), std::move(pos)));
  }
  for (const auto& blk : enc.main) h = main_block_forward(h, blk, layout, cfg.ln_eps, opts);
  return layer_norm(h, enc.norm.gamma, enc.norm.beta, static_cast<T>(cfg.ln_eps));
}

template <typename T>
Tensor<T> encoder_forward_dense(const Tensor<T>& images, const HiViTConfig& cfg,
                                const EncoderParams<T>& enc, const ForwardOptions& opts) {
  auto local = local_stages(patch_embed(images, cfg, enc), cfg, enc, opts);
  const auto units = all_units(cfg.num_units());
  UnitLayout layout{units, cfg.num_units(), cfg.grid()};
  return main_stage(local, layout, cfg, enc, opts);
}

template <typename T>
Tensor<T> supervised_forward(const Tensor<T>& images, const HiViTConfig& cfg,
                             const EncoderParams<T>& enc, const ForwardOptions& opts) {
  if (cfg.num_classes <= 0 || !enc.head.w.defined())
    throw ContractError("supervised_forward: config '" + cfg.name + "' has no classifier head");
  auto feats = encoder_forward_dense(images, cfg, enc, opts);
  return linear(mean_tokens(feats), enc.head.w, enc.head.b);
}

#define HIVIT_INSTANTIATE_MODEL(T)                                                                 \
  template Tensor<T> truncated_normal<T>(Shape, std::mt19937_64&, double);                         \
  template EncoderParams<T> init_encoder<T>(const HiViTConfig&, std::mt19937_64&);                 \
  template void collect_params<T>(EncoderParams<T>&, const HiViTConfig&, ParamList<T>&,            \
                                  const std::string&, bool);                                       \
  template Tensor<T> unit_patches<T>(const Tensor<T>&, const HiViTConfig&);                        \
  template Tensor<T> embed_units<T>(const Tensor<T>&, const EncoderParams<T>&);                    \
  template Tensor<T> patch_embed<T>(const Tensor<T>&, const HiViTConfig&, const EncoderParams<T>&); \
  template Tensor<T> drop_path<T>(const Tensor<T>&, double, const ForwardOptions&);                \
  template Tensor<T> mlp_forward<T>(const Tensor<T>&, const Mlp<T>&);                              \
  template Tensor<T> early_block_forward<T>(const Tensor<T>&, const EarlyBlock<T>&,                \
                                            const HiViTConfig&, const ForwardOptions&);            \
  template Tensor<T> patch_merge<T>(const Tensor<T>&, const PatchMerge<T>&, const HiViTConfig&);   \
  template Tensor<T> main_block_forward<T>(const Tensor<T>&, const MainBlock<T>&,                  \
                                           const UnitLayout&, double, const ForwardOptions&);      \
  template Tensor<T> local_stages<T>(const Tensor<T>&, const HiViTConfig&,                         \
                                     const EncoderParams<T>&, const ForwardOptions&);              \
  template Tensor<T> main_stage<T>(const Tensor<T>&, const UnitLayout&, const HiViTConfig&,        \
                                   const EncoderParams<T>&, const ForwardOptions&);                \
  template Tensor<T> encoder_forward_dense<T>(const Tensor<T>&, const HiViTConfig&,                \
                                              const EncoderParams<T>&, const ForwardOptions&);     \
  template Tensor<T> supervised_forward<T>(const Tensor<T>&, const HiViTConfig&,                   \
                                           const EncoderParams<T>&, const ForwardOptions&);

HIVIT_INSTANTIATE_MODEL(float)
HIVIT_INSTANTIATE_MODEL(double)

}  // namespace hivit
