#include "hivit/mim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hivit/ops.hpp"

namespace hivit {
namespace {

std::vector<std::int64_t> complement(const std::vector<std::int64_t>& sorted, int n) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(n) - sorted.size());
  std::size_t j = 0;
  for (std::int64_t u = 0; u < n; ++u) {
    if (j < sorted.size() && sorted[j] == u) ++j;
    else out.push_back(u);
  }
  return out;
}

int infer_grid(int num_units) {
  int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(num_units))));
  if (g * g != num_units) throw ConfigError("unit count " + std::to_string(num_units) + " is not a square");
  return g;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string MaskPlan::serialize() const {
  std::ostringstream os;
  os << "mask M=" << num_units << " grid=" << grid << " ratio=" << format_double(mask_ratio)
     << " seed=" << seed << " visible=";
  for (std::size_t i = 0; i < visible_idx.size(); ++i) os << (i ? "," : "") << visible_idx[i];
  return os.str();
}

MaskPlan MaskPlan::parse(std::string_view line) {
  std::istringstream is{std::string(line)};
  std::string tok;
  if (!(is >> tok) || tok != "mask") throw ConfigError("mask plan line must start with 'mask'");
  MaskPlan p;
  bool have_m = false, have_vis = false;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ConfigError("mask plan: malformed field '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    try {
      if (key == "M") p.num_units = std::stoi(val), have_m = true;
      else if (key == "grid") p.grid = std::stoi(val);
      else if (key == "ratio") p.mask_ratio = std::stod(val);
      else if (key == "seed") p.seed = std::stoull(val);
      else if (key == "visible") {
        have_vis = true;
        std::stringstream vs(val);
        std::string item;
        while (std::getline(vs, item, ',')) p.visible_idx.push_back(std::stoll(item));
      } else throw ConfigError("mask plan: unknown field '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("mask plan: bad value in '" + tok + "'");
    }
  }
  if (!have_m || !have_vis) throw ConfigError("mask plan needs M= and visible= fields");
  if (p.grid == 0) p.grid = infer_grid(p.num_units);
  std::sort(p.visible_idx.begin(), p.visible_idx.end());
  if (p.visible_idx.empty() || std::adjacent_find(p.visible_idx.begin(), p.visible_idx.end()) != p.visible_idx.end() ||
      p.visible_idx.front() < 0 || p.visible_idx.back() >= p.num_units)
    throw ConfigError("mask plan: visible indices must be unique and within [0, M)");
  p.masked_idx = complement(p.visible_idx, p.num_units);
  return p;
}

MaskPlan sample_mask(int num_units, double mask_ratio, std::uint64_t seed, int grid) {
  const int kept = visible_count(num_units, mask_ratio);
  MaskPlan p;
  p.num_units = num_units;
  p.grid = grid ? grid : infer_grid(num_units);
  p.mask_ratio = mask_ratio;
  p.seed = seed;
  std::vector<std::int64_t> perm = all_units(num_units);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `kept` slots are a uniform subset.
  for (int i = 0; i < kept; ++i) {
    std::uniform_int_distribution<int> pick(i, num_units - 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  p.visible_idx.assign(perm.begin(), perm.begin() + kept);
  std::sort(p.visible_idx.begin(), p.visible_idx.end());
  p.masked_idx = complement(p.visible_idx, num_units);
  return p;
}

MaskPlan all_visible(int num_units, int grid) {
  MaskPlan p;
  p.num_units = num_units;
  p.grid = grid ? grid : infer_grid(num_units);
  p.visible_idx = all_units(num_units);
  return p;
}

template <typename T>
std::vector<T> BatchMask::masked_weights() const {
  std::vector<T> w(static_cast<std::size_t>(batch * num_units), T(0));
  const std::int64_t nm = num_units - kept;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t i = 0; i < nm; ++i)
      w[static_cast<std::size_t>(b * num_units + masked[static_cast<std::size_t>(shared() ? i : b * nm + i)])] = T(1);
  return w;
}

template std::vector<float> BatchMask::masked_weights<float>() const;
template std::vector<double> BatchMask::masked_weights<double>() const;

BatchMask BatchMask::shared_plan(const MaskPlan& plan, std::int64_t batch) {
  return {batch, plan.num_units, plan.grid, plan.visible(), plan.visible_idx, plan.masked_idx};
}

BatchMask BatchMask::per_image(const std::vector<MaskPlan>& plans) {
  if (plans.empty()) throw ContractError("per_image: no plans");
  BatchMask m{static_cast<std::int64_t>(plans.size()), plans[0].num_units, plans[0].grid,
              plans[0].visible(), {}, {}};
  for (const auto& p : plans) {
    if (p.num_units != m.num_units || p.visible() != m.kept)
      throw ContractError("per_image: plans disagree on unit count or visible count");
    m.visible.insert(m.visible.end(), p.visible_idx.begin(), p.visible_idx.end());
    m.masked.insert(m.masked.end(), p.masked_idx.begin(), p.masked_idx.end());
  }
  // A single image is stored in the shared layout; both index the same way.
  return m;
}

BatchMask sample_batch_mask(const HiViTConfig& cfg, std::int64_t batch, double mask_ratio,
                            std::uint64_t seed) {
  std::vector<MaskPlan> plans;
  for (std::int64_t b = 0; b < batch; ++b)
    plans.push_back(sample_mask(cfg.num_units(), mask_ratio, mix_seed(seed, static_cast<std::uint64_t>(b)), cfg.grid()));
  return BatchMask::per_image(plans);
}

template <typename T>
DecoderParams<T> init_decoder(const HiViTConfig& cfg, std::mt19937_64& rng) {
  const int d = cfg.decoder_dim;
  auto lin = [&](std::int64_t in, std::int64_t out) {
    return Linear<T>{truncated_normal<T>({in, out}, rng), Tensor<T>::zeros({out}, true)};
  };
  auto norm = [&] { return Norm<T>{Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)}; };
  DecoderParams<T> dec;
  dec.embed = lin(cfg.dims[2], d);
  dec.mask_token = truncated_normal<T>({d}, rng);
  const int hidden = cfg.hidden(d, cfg.mlp_ratio_main);
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    MainBlock<T> b;
    b.norm1 = norm();
    b.attn.qkv = lin(d, 3 * d);
    b.attn.proj = lin(d, d);
    b.attn.heads = cfg.decoder_heads;
    b.norm2 = norm();
    b.mlp = {lin(d, hidden), lin(hidden, d)};
    dec.blocks.push_back(std::move(b));
  }
  dec.norm = norm();
  dec.pred = lin(d, cfg.pixels_per_unit());
  return dec;
}

template <typename T>
void collect_decoder_params(DecoderParams<T>& dec, const HiViTConfig& cfg, ParamList<T>& out,
                            const std::string& prefix) {
  const int layer = cfg.total_blocks();
  auto lin = [&](const std::string& n, Linear<T>& l) {
    out.push_back({n + ".w", l.w, layer, true});
    out.push_back({n + ".b", l.b, layer, false});
  };
  auto norm = [&](const std::string& n, Norm<T>& nm) {
    out.push_back({n + ".gamma", nm.gamma, layer, false});
    out.push_back({n + ".beta", nm.beta, layer, false});
  };
  lin(prefix + "embed", dec.embed);
  out.push_back({prefix + "mask_token", dec.mask_token, layer, false});
  for (std::size_t i = 0; i < dec.blocks.size(); ++i) {
    auto& b = dec.blocks[i];
    const std::string n = prefix + "blocks." + std::to_string(i);
    norm(n + ".norm1", b.norm1);
    lin(n + ".attn.qkv", b.attn.qkv);
    lin(n + ".attn.proj", b.attn.proj);
    norm(n + ".norm2", b.norm2);
    lin(n + ".mlp.fc1", b.mlp.fc1);
    lin(n + ".mlp.fc2", b.mlp.fc2);
  }
  norm(prefix + "norm", dec.norm);
  lin(prefix + "pred", dec.pred);
}

template <typename T>
Tensor<T> encode_sparse(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                        const EncoderParams<T>& enc, const ForwardOptions& opts) {
  if (mask.num_units != cfg.num_units())
    throw ContractError("encode_sparse: mask covers " + std::to_string(mask.num_units) +
                        " units but config '" + cfg.name + "' has " + std::to_string(cfg.num_units()));
  if (!mask.shared() && mask.batch != images.dim(0))
    throw ContractError("encode_sparse: mask batch " + std::to_string(mask.batch) +
                        " differs from image batch " + std::to_string(images.dim(0)));
  auto patches = gather_units(unit_patches(images, cfg), std::span<const std::int64_t>(mask.visible), mask.kept);
  auto local = local_stages(embed_units(patches, enc), cfg, enc, opts);
  return main_stage(local, mask.layout(), cfg, enc, opts);
}

template <typename T>
Tensor<T> decode(const Tensor<T>& latent, const BatchMask& mask, const HiViTConfig& cfg,
                 const DecoderParams<T>& dec, const ForwardOptions& opts) {
  if (latent.rank() != 3 || latent.dim(1) != mask.kept || latent.dim(2) != cfg.dims[2])
    throw ShapeError("decode: latent " + shape_str(latent.shape()) + " does not match " +
                     std::to_string(mask.kept) + " visible units of width " + std::to_string(cfg.dims[2]));
  const std::int64_t m = mask.num_units, d = cfg.decoder_dim;
  auto h = linear(latent, dec.embed.w, dec.embed.b);
  h = scatter_units(h, std::span<const std::int64_t>(mask.visible), m, dec.mask_token);
  const auto table = sincos_pos_embed(mask.grid, static_cast<int>(d));
  std::vector<T> pos(table.begin(), table.end());
  h = add(h, Tensor<T>::from_data({m, d}, std::move(pos)));
  const auto units = all_units(static_cast<int>(m));
  const UnitLayout layout{units, m, mask.grid};
  for (const auto& blk : dec.blocks) h = main_block_forward(h, blk, layout, cfg.ln_eps, opts);
  h = layer_norm(h, dec.norm.gamma, dec.norm.beta, static_cast<T>(cfg.ln_eps));
  return linear(h, dec.pred.w, dec.pred.b);
}

template <typename T>
std::vector<T> unit_targets(const Tensor<T>& images, const HiViTConfig& cfg, bool normalize, double eps) {
  NoGradGuard guard;
  auto units = patchify_units(images.detach(), cfg.unit_size, cfg.unit_size);
  std::vector<T> out(units.data().begin(), units.data().end());
  if (!normalize) return out;
  const std::size_t p = static_cast<std::size_t>(cfg.pixels_per_unit());
  for (std::size_t off = 0; off < out.size(); off += p) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < p; ++i) mean += out[off + i];
    mean /= static_cast<double>(p);
    for (std::size_t i = 0; i < p; ++i) var += (out[off + i] - mean) * (out[off + i] - mean);
    var /= static_cast<double>(p);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < p; ++i) out[off + i] = static_cast<T>((out[off + i] - mean) * inv);
  }
  return out;
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& images, const BatchMask& mask,
                              const HiViTConfig& cfg, bool normalize) {
  const auto target = unit_targets(images, cfg, normalize);
  BatchMask m = mask;
  m.batch = pred.dim(0);
  const auto w = m.masked_weights<T>();
  return masked_mse(pred, std::span<const T>(target), std::span<const T>(w));
}

template <typename T>
MimModel<T> init_mim(const HiViTConfig& cfg, std::mt19937_64& rng) {
  HiViTConfig headless = cfg;
  headless.num_classes = 0;
  MimModel<T> m;
  m.enc = init_encoder<T>(headless, rng);
  m.dec = init_decoder<T>(cfg, rng);
  return m;
}

template <typename T>
ParamList<T> mim_params(MimModel<T>& m, const HiViTConfig& cfg) {
  ParamList<T> out;
  collect_params(m.enc, cfg, out, "encoder.", false);
  collect_decoder_params(m.dec, cfg, out);
  return out;
}

template <typename T>
Tensor<T> mim_loss(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                   const MimModel<T>& m, const ForwardOptions& opts, bool normalize) {
  auto latent = encode_sparse(images, mask, cfg, m.enc, opts);
  auto pred = decode(latent, mask, cfg, m.dec, opts);
  return reconstruction_loss(pred, images, mask, cfg, normalize);
}

template <typename T>
DenseBaseline<T> init_dense_baseline(const HiViTConfig& cfg, std::mt19937_64& rng) {
  HiViTConfig headless = cfg;
  headless.num_classes = 0;
  DenseBaseline<T> m;
  m.enc = init_encoder<T>(headless, rng);
  m.mask_token = truncated_normal<T>({cfg.dims[0]}, rng);
  m.pred = {truncated_normal<T>({cfg.dims[2], cfg.pixels_per_unit()}, rng),
            Tensor<T>::zeros({cfg.pixels_per_unit()}, true)};
  return m;
}

template <typename T>
ParamList<T> dense_baseline_params(DenseBaseline<T>& m, const HiViTConfig& cfg) {
  ParamList<T> out;
  collect_params(m.enc, cfg, out, "encoder.", false);
  const int layer = cfg.total_blocks();
  out.push_back({"mask_token", m.mask_token, -1, false});
  out.push_back({"pred.w", m.pred.w, layer, true});
  out.push_back({"pred.b", m.pred.b, layer, false});
  return out;
}

template <typename T>
Tensor<T> dense_baseline_loss(const Tensor<T>& images, const BatchMask& mask, const HiViTConfig& cfg,
                              const DenseBaseline<T>& m, const ForwardOptions& opts, bool normalize) {
  const std::int64_t k = cfg.unit_tokens_side();
  auto x = patch_embed(images, cfg, m.enc);
  auto fill = add(Tensor<T>::zeros({k, k, cfg.dims[0]}), m.mask_token);
  x = replace_units(x, std::span<const std::int64_t>(mask.masked), mask.num_units - mask.kept, fill);
  auto local = local_stages(x, cfg, m.enc, opts);
  const auto units = all_units(cfg.num_units());
  auto feats = main_stage(local, UnitLayout{units, cfg.num_units(), cfg.grid()}, cfg, m.enc, opts);
  auto pred = linear(feats, m.pred.w, m.pred.b);
  return reconstruction_loss(pred, images, mask, cfg, normalize);
}

#define HIVIT_INSTANTIATE_MIM(T)                                                                   \
  template DecoderParams<T> init_decoder<T>(const HiViTConfig&, std::mt19937_64&);                 \
  template void collect_decoder_params<T>(DecoderParams<T>&, const HiViTConfig&, ParamList<T>&,    \
                                          const std::string&);                                     \
  template Tensor<T> encode_sparse<T>(const Tensor<T>&, const BatchMask&, const HiViTConfig&,      \
                                      const EncoderParams<T>&, const ForwardOptions&);             \
  template Tensor<T> decode<T>(const Tensor<T>&, const BatchMask&, const HiViTConfig&,             \
                               const DecoderParams<T>&, const ForwardOptions&);                    \
  template std::vector<T> unit_targets<T>(const Tensor<T>&, const HiViTConfig&, bool, double);     \
  template Tensor<T> reconstruction_loss<T>(const Tensor<T>&, const Tensor<T>&, const BatchMask&,  \
                                            const HiViTConfig&, bool);                             \
  template MimModel<T> init_mim<T>(const HiViTConfig&, std::mt19937_64&);                          \
  template ParamList<T> mim_params<T>(MimModel<T>&, const HiViTConfig&);                           \
  template Tensor<T> mim_loss<T>(const Tensor<T>&, const BatchMask&, const HiViTConfig&,           \
                                 const MimModel<T>&, const ForwardOptions&, bool);                 \
  template DenseBaseline<T> init_dense_baseline<T>(const HiViTConfig&, std::mt19937_64&);          \
  template ParamList<T> dense_baseline_params<T>(DenseBaseline<T>&, const HiViTConfig&);           \
  template Tensor<T> dense_baseline_loss<T>(const Tensor<T>&, const BatchMask&, const HiViTConfig&, \
                                            const DenseBaseline<T>&, const ForwardOptions&, bool);

HIVIT_INSTANTIATE_MIM(float)
HIVIT_INSTANTIATE_MIM(double)

}  // namespace hivit
