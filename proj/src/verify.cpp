#include "hivit/verify.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "hivit/checkpoint.hpp"
#include "hivit/ops.hpp"
#include "hivit/optim.hpp"

namespace hivit {
namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// Parameters far from their initial values, so every path carries signal.
template <typename T>
void randomize(ParamList<T>& params, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& p : params) {
    auto d = p.tensor.data();
    const bool matrix = p.tensor.rank() == 2 && !ends_with(p.name, ".rpe");
    const double fan_in = matrix ? static_cast<double>(p.tensor.dim(0)) : 1.0;
    for (auto& v : d) {
      if (ends_with(p.name, "gamma")) v = static_cast<T>(1.0 + 0.2 * n(rng));
      else if (ends_with(p.name, ".rpe")) v = static_cast<T>(0.5 * n(rng));
      else if (matrix) v = static_cast<T>(n(rng) / std::sqrt(fan_in));
      else v = static_cast<T>(0.1 * n(rng));
    }
  }
}

template <typename T>
Tensor<T> random_images(const HiViTConfig& cfg, std::int64_t batch, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<T> d(static_cast<std::size_t>(batch * cfg.in_chans * cfg.img_size * cfg.img_size));
  for (auto& v : d) v = static_cast<T>(n(rng));
  return Tensor<T>::from_data({batch, cfg.in_chans, cfg.img_size, cfg.img_size}, std::move(d));
}

template <typename T>
EncoderParams<T> random_encoder(const HiViTConfig& cfg, std::mt19937_64& rng) {
  auto enc = init_encoder<T>(cfg, rng);
  ParamList<T> params;
  collect_params(enc, cfg, params);
  randomize(params, rng);
  return enc;
}

template <typename T>
OracleReport oracle_trial(const HiViTConfig& cfg, std::uint64_t seed, OracleTolerance tol) {
  std::mt19937_64 rng(seed);
  auto enc = random_encoder<T>(cfg, rng);
  auto images = random_images<T>(cfg, 2, rng);
  const double ratio = 0.5 + 0.4 * std::uniform_real_distribution<double>(0, 1)(rng);
  const auto mask = sample_batch_mask(cfg, 2, ratio, rng());
  return oracle_check(images, mask, cfg, enc, tol);
}

template <typename T>
bool same_bits(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

CheckResult optimizer_purity(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  auto make = [&](std::mt19937_64 r) {
    ParamList<float> ps;
    for (int i = 0; i < 3; ++i) {
      std::vector<float> d(12);
      for (auto& v : d) v = static_cast<float>(n(r));
      auto t = Tensor<float>::from_data({3, 4}, d, true);
      auto g = t.mutable_grad();
      for (auto& v : g) v = static_cast<float>(n(r));
      ps.push_back({"p" + std::to_string(i), t, i, i != 2});
    }
    return ps;
  };
  const std::uint64_t s = rng();
  auto a = make(std::mt19937_64(s));
  auto b = make(std::mt19937_64(s));
  OptimState<float> sa, sb;
  sa.init(a);
  sb.init(b);
  const std::vector<double> scale{0.5, 1.0, 1.0};
  for (int k = 0; k < 3; ++k) {
    adamw_step(a, sa, 1e-2, AdamWConfig{}, scale);
    adamw_step(b, sb, 1e-2, AdamWConfig{}, scale);
  }
  bool ok = true;
  for (std::size_t i = 0; i < a.size(); ++i)
    ok = ok && same_bits<float>(a[i].tensor.data(), b[i].tensor.data()) &&
         same_bits<float>(sa.m[i], sb.m[i]) && same_bits<float>(sa.v[i], sb.v[i]);
  auto c = make(std::mt19937_64(s));
  auto d = make(std::mt19937_64(s));
  OptimState<float> sc, sd;
  sc.init(c);
  sd.init(d);
  lars_step(c, sc, 0.1, LarsConfig{0.9, 1e-4, 1e-8});
  lars_step(d, sd, 0.1, LarsConfig{0.9, 1e-4, 1e-8});
  for (std::size_t i = 0; i < c.size(); ++i) ok = ok && same_bits<float>(c[i].tensor.data(), d[i].tensor.data());
  return {"optimizer_purity", ok, 0, ok ? "AdamW and LARS steps reproduce bit-identically" : "optimizer outputs differ"};
}

CheckResult checkpoint_roundtrip(const HiViTConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto m = init_mim<float>(cfg, rng);
  auto params = mim_params(m, cfg);
  randomize(params, rng);
  Checkpoint ck;
  ck.step = 17;
  ck.config = to_text(cfg);
  ck.meta = "mode = pretrain\n";
  std::ostringstream os;
  os << rng;
  ck.rng = os.str();
  store_params(ck, params, "param/");
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes, "<memory>");
  const bool same_bytes = encode_checkpoint(back) == bytes;

  std::mt19937_64 other(seed + 1);
  auto fresh = init_mim<float>(cfg, other);
  auto fresh_params = mim_params(fresh, cfg);
  restore_params(back, fresh_params, "param/");
  bool same_values = true;
  for (std::size_t i = 0; i < params.size(); ++i)
    same_values = same_values && same_bits<float>(params[i].tensor.data(), fresh_params[i].tensor.data());
  const bool ok = same_bytes && same_values && back.step == 17 && back.rng == ck.rng;
  return {"checkpoint_roundtrip", ok, 0,
          std::to_string(bytes.size()) + " bytes; save-load-save " + (same_bytes ? "identical" : "differs") +
              ", parameters " + (same_values ? "identical" : "differ")};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace

std::int64_t locality_violations(const HiViTConfig& cfg, std::uint64_t seed, int unit) {
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  auto enc = random_encoder<float>(cfg, rng);
  auto images = random_images<float>(cfg, 1, rng);
  auto perturbed = images.detach();
  {
    std::normal_distribution<double> n(0.0, 1.0);
    const int g = cfg.grid(), u = cfg.unit_size, s = cfg.img_size;
    const int r0 = (unit / g) * u, c0 = (unit % g) * u;
    auto d = perturbed.data();
    for (int c = 0; c < cfg.in_chans; ++c)
      for (int y = r0; y < r0 + u; ++y)
        for (int x = c0; x < c0 + u; ++x) d[(static_cast<std::size_t>(c) * s + y) * s + x] += static_cast<float>(n(rng));
  }
  std::int64_t changed = 0;
  auto compare = [&](const Tensor<float>& a, const Tensor<float>& b) {
    const std::int64_t m = a.dim(1);
    const std::int64_t row = a.numel() / (a.dim(0) * m);
    for (std::int64_t bi = 0; bi < a.dim(0); ++bi)
      for (std::int64_t i = 0; i < m; ++i) {
        if (i == unit) continue;
        const auto off = static_cast<std::size_t>((bi * m + i) * row);
        for (std::int64_t k = 0; k < row; ++k) {
          const float x = a.data()[off + k], y = b.data()[off + k];
          if (std::memcmp(&x, &y, sizeof x) != 0) ++changed;
        }
      }
  };
  const ForwardOptions eval{};
  auto ea = patch_embed(images, cfg, enc);
  auto eb = patch_embed(perturbed, cfg, enc);
  compare(ea, eb);
  compare(local_stages(ea, cfg, enc, eval), local_stages(eb, cfg, enc, eval));
  return changed;
}

GradCheck mim_gradient_check(const HiViTConfig& cfg, std::uint64_t seed, int samples) {
  std::mt19937_64 rng(seed);
  auto model = init_mim<double>(cfg, rng);
  auto params = mim_params(model, cfg);
  randomize(params, rng);
  auto images = random_images<double>(cfg, 2, rng);
  const auto mask = sample_batch_mask(cfg, 2, 0.75, rng());
  auto loss_fn = [&] { return mim_loss(images, mask, cfg, model, ForwardOptions{}, true); };

  zero_grads(params);
  auto loss = loss_fn();
  // Central differences carry about eps * |L| / h of roundoff; gradients
  // below this floor are compared in absolute terms.
  const double floor = 1e-6 * std::max(1.0, std::abs(loss.item()));
  backward(loss);

  GradCheck out;
  const double h = 1e-5;
  NoGradGuard guard;
  for (int s = 0; s < samples; ++s) {
    auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng)];
    const auto j = std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(p.tensor.numel()) - 1)(rng);
    auto d = p.tensor.data();
    const double orig = d[j];
    d[j] = orig + h;
    const double up = loss_fn().item();
    d[j] = orig - h;
    const double down = loss_fn().item();
    d[j] = orig;
    const double fd = (up - down) / (2 * h);
    const double ad = p.tensor.has_grad() ? p.tensor.grad()[j] : 0.0;
    const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), floor});
    if (rel > out.max_rel_error || s == 0) {
      out.max_rel_error = rel;
      out.worst_param = p.name + "[" + std::to_string(j) + "]";
    }
    ++out.samples;
  }
  return out;
}

std::vector<CheckResult> run_verify(const HiViTConfig& cfg, const VerifyOptions& opts) {
  std::vector<CheckResult> out;

  auto oracle_checks = [&](auto tag, const char* suffix, OracleTolerance tol) {
    using T = decltype(tag);
    double worst_a = 0, worst_b = 0;
    std::string fail_a, fail_b;
    for (int t = 0; t < opts.oracle_trials; ++t) {
      auto r = oracle_trial<T>(cfg, mix(opts.seed, static_cast<std::uint64_t>(t)), tol);
      if (!(r.err_a <= worst_a)) worst_a = r.err_a;
      if (!(r.err_b <= worst_b)) worst_b = r.err_b;
      const std::string trial = "trial " + std::to_string(t) + ": ";
      if (!r.pass_a() && fail_a.empty()) fail_a = trial + OracleReport{r.err_a, 0, r.worst_a, -1, r.shape, tol}.failure();
      if (!r.pass_b() && fail_b.empty()) fail_b = trial + OracleReport{0, r.err_b, -1, r.worst_b, r.shape, tol}.failure();
    }
    out.push_back({std::string("oracle_a_") + suffix, worst_a <= tol.a, worst_a,
                   "max rel err " + fmt(worst_a) + " (tol " + fmt(tol.a) + ")" +
                       (worst_a <= tol.a ? "" : "; " + fail_a)});
    out.push_back({std::string("oracle_b_") + suffix, worst_b <= tol.b, worst_b,
                   "max rel err " + fmt(worst_b) + " (tol " + fmt(tol.b) + ")" +
                       (worst_b <= tol.b ? "" : "; " + fail_b)});
  };
  oracle_checks(float{}, "f32", opts.tol);
  oracle_checks(double{}, "f64", OracleTolerance{std::min(opts.tol.a, 1e-12), std::min(opts.tol.b, 1e-12)});

  {
    std::int64_t worst = 0;
    int worst_unit = -1;
    std::mt19937_64 rng(mix(opts.seed, 1000));
    for (int t = 0; t < opts.locality_trials; ++t) {
      const int unit = std::uniform_int_distribution<int>(0, cfg.num_units() - 1)(rng);
      const auto v = locality_violations(cfg, rng(), unit);
      if (v > worst) worst = v, worst_unit = unit;
    }
    out.push_back({"unit_locality", worst == 0, static_cast<double>(worst),
                   worst == 0 ? std::to_string(opts.locality_trials) + " perturbations, other units bit-identical"
                              : std::to_string(worst) + " elements outside unit " + std::to_string(worst_unit) +
                                    " changed"});
  }

  {
    const auto g = mim_gradient_check(cfg, mix(opts.seed, 2000), opts.grad_samples);
    out.push_back({"gradient_check", g.max_rel_error < opts.grad_tol, g.max_rel_error,
                   std::to_string(g.samples) + " samples, max rel err " + fmt(g.max_rel_error) + " at " +
                       g.worst_param + " (tol " + fmt(opts.grad_tol) + ")"});
  }

  out.push_back(optimizer_purity(mix(opts.seed, 3000)));
  out.push_back(checkpoint_roundtrip(cfg, mix(opts.seed, 4000)));
  return out;
}

}  // namespace hivit
