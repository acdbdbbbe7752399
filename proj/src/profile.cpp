#include "hivit/profile.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace hivit {
namespace {

std::int64_t linear_params(std::int64_t in, std::int64_t out, bool bias) {
  return in * out + (bias ? out : 0);
}

struct StageBuilder {
  StageProfile& row;
  double keep;  // M' / M

  void token(std::string name, std::int64_t params, double flops) {
    row.items.push_back({std::move(name), CostKind::Token, params, flops, flops * keep});
  }
  void attention(std::string name, double flops) {
    row.items.push_back({std::move(name), CostKind::Attention, 0, flops, flops * keep * keep});
  }
  void param(std::string name, std::int64_t params) {
    row.items.push_back({std::move(name), CostKind::ParamOnly, params, 0, 0});
  }
};

std::int64_t norm_params(std::int64_t d) { return 2 * d; }

}  // namespace

const char* cost_kind_name(CostKind k) {
  switch (k) {
    case CostKind::Token: return "token";
    case CostKind::Attention: return "attention";
    case CostKind::Head: return "head";
    case CostKind::ParamOnly: return "param";
  }
  return "?";
}

double ProfileReport::flops_of(CostKind k, bool sparse) const {
  double s = 0;
  for (const auto& st : stages)
    for (const auto& it : st.items)
      if (it.kind == k) s += sparse ? it.flops_sparse : it.flops_dense;
  return s;
}

double mlp_flops(std::int64_t tokens, std::int64_t dim, std::int64_t hidden) {
  return 2.0 * static_cast<double>(tokens) * static_cast<double>(dim) * static_cast<double>(hidden);
}

ProfileReport count_params_flops(const HiViTConfig& cfg, double mask_ratio) {
  cfg.validate();
  ProfileReport r;
  r.cfg = cfg;
  r.mask_ratio = mask_ratio;
  r.units = cfg.num_units();
  r.visible = visible_count(cfg.num_units(), mask_ratio);
  const double keep = static_cast<double>(r.visible) / static_cast<double>(r.units);
  const std::int64_t m = r.units;
  const std::int64_t k = cfg.unit_tokens_side();

  for (int s = 0; s < 2; ++s) {
    const std::int64_t d = cfg.dims[s];
    const std::int64_t side = k >> s;
    const std::int64_t n = m * side * side;
    StageProfile row;
    row.stage = s + 1;
    row.blocks = cfg.depths[s];
    row.tokens_dense = n;
    row.tokens_sparse = r.visible * side * side;
    StageBuilder b{row, keep};
    if (s == 0) {
      b.token("patch_embed", linear_params(cfg.patch_dim(), d, true),
              static_cast<double>(n) * cfg.patch_dim() * d);
    } else {
      const std::int64_t din = 2 * d;
      b.token("merge1", norm_params(din) + linear_params(din, d, false),
              static_cast<double>(n) * din * d);
    }
    const std::int64_t hr = cfg.hidden(static_cast<int>(d), cfg.mlp_ratio_replace);
    const std::int64_t hm = cfg.hidden(static_cast<int>(d), cfg.mlp_ratio_main);
    for (int i = 0; i < cfg.depths[s]; ++i) {
      const std::string p = "stage" + std::to_string(s + 1) + "." + std::to_string(i);
      b.token(p + ".mlp_replace",
              norm_params(d) + linear_params(d, hr, true) + linear_params(hr, d, true),
              mlp_flops(n, d, hr));
      b.token(p + ".mlp", norm_params(d) + linear_params(d, hm, true) + linear_params(hm, d, true),
              mlp_flops(n, d, hm));
    }
    r.stages.push_back(std::move(row));
  }

  {
    const std::int64_t d = cfg.dims[2];
    const std::int64_t din = 4 * cfg.dims[1];
    const std::int64_t g = cfg.grid();
    const std::int64_t hm = cfg.hidden(static_cast<int>(d), cfg.mlp_ratio_main);
    StageProfile row;
    row.stage = 3;
    row.blocks = cfg.depths[2];
    row.tokens_dense = m;
    row.tokens_sparse = r.visible;
    StageBuilder b{row, keep};
    b.token("merge2", norm_params(din) + linear_params(din, d, false),
            static_cast<double>(m) * din * d);
    const double md = static_cast<double>(m), dd = static_cast<double>(d);
    for (int i = 0; i < cfg.depths[2]; ++i) {
      const std::string p = "main." + std::to_string(i);
      b.token(p + ".attn_proj", norm_params(d) + linear_params(d, 3 * d, true) + linear_params(d, d, true),
              4.0 * md * dd * dd);
      b.attention(p + ".attn_matmul", 2.0 * md * md * dd);
      if (cfg.use_rpe) b.param(p + ".rpe", (2 * g - 1) * (2 * g - 1) * cfg.heads);
      b.token(p + ".mlp", norm_params(d) + linear_params(d, hm, true) + linear_params(hm, d, true),
              mlp_flops(m, d, hm));
    }
    b.param("norm", norm_params(d));
    if (cfg.num_classes > 0) {
      const double f = dd * cfg.num_classes;
      row.items.push_back({"head", CostKind::Head, linear_params(d, cfg.num_classes, true), f, f});
    }
    r.stages.push_back(std::move(row));
  }

  for (auto& st : r.stages) {
    for (const auto& it : st.items) {
      st.params += it.params;
      st.flops_dense += it.flops_dense;
      st.flops_sparse += it.flops_sparse;
    }
    r.total_params += st.params;
    r.total_flops_dense += st.flops_dense;
    r.total_flops_sparse += st.flops_sparse;
  }
  return r;
}

std::string profile_json(const ProfileReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = kProfileSchema;
  j["config"] = r.cfg.name;
  j["img_size"] = r.cfg.img_size;
  j["mask_ratio"] = r.mask_ratio;
  j["units"] = r.units;
  j["visible_units"] = r.visible;
  j["flop_unit"] = "multiply-add";
  auto& stages = j["stages"] = nlohmann::ordered_json::array();
  for (const auto& st : r.stages) {
    nlohmann::ordered_json s;
    s["stage"] = st.stage;
    s["blocks"] = st.blocks;
    s["tokens_dense"] = st.tokens_dense;
    s["tokens_sparse"] = st.tokens_sparse;
    s["params"] = st.params;
    s["flops_dense"] = st.flops_dense;
    s["flops_sparse"] = st.flops_sparse;
    auto& items = s["items"] = nlohmann::ordered_json::array();
    for (const auto& it : st.items)
      items.push_back({{"name", it.name},
                       {"kind", cost_kind_name(it.kind)},
                       {"params", it.params},
                       {"flops_dense", it.flops_dense},
                       {"flops_sparse", it.flops_sparse}});
    stages.push_back(std::move(s));
  }
  j["total"] = {{"params", r.total_params},
                {"flops_dense", r.total_flops_dense},
                {"flops_sparse", r.total_flops_sparse}};
  j["ratios"] = {{"attention", r.flops_of(CostKind::Attention, true) / r.flops_of(CostKind::Attention, false)},
                 {"token", r.flops_of(CostKind::Token, true) / r.flops_of(CostKind::Token, false)},
                 {"total", r.total_flops_sparse / r.total_flops_dense}};
  if (auto g = golden_for(r.cfg)) j["golden"] = {{"params_m", g->params_m}, {"flops_g", g->flops_g}};
  return j.dump(2);
}

std::string profile_table(const ProfileReport& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "config %s  img %d  units %lld  visible %lld (mask ratio %.2f)\n",
                r.cfg.name.c_str(), r.cfg.img_size, static_cast<long long>(r.units),
                static_cast<long long>(r.visible), r.mask_ratio);
  os << buf;
  std::snprintf(buf, sizeof buf, "%-6s %6s %8s %8s %10s %12s %12s %8s\n", "stage", "blocks", "tokens",
                "sparse", "params(M)", "dense(GMAC)", "sparse(GMAC)", "ratio");
  os << buf;
  for (const auto& st : r.stages) {
    std::snprintf(buf, sizeof buf, "%-6d %6d %8lld %8lld %10.3f %12.4f %12.4f %8.4f\n", st.stage,
                  st.blocks, static_cast<long long>(st.tokens_dense),
                  static_cast<long long>(st.tokens_sparse), st.params / 1e6, st.flops_dense / 1e9,
                  st.flops_sparse / 1e9, st.flops_sparse / st.flops_dense);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-6s %6d %8s %8s %10.3f %12.4f %12.4f %8.4f\n", "total",
                r.cfg.total_blocks(), "", "", r.total_params / 1e6, r.total_flops_dense / 1e9,
                r.total_flops_sparse / 1e9, r.total_flops_sparse / r.total_flops_dense);
  os << buf;
  std::snprintf(buf, sizeof buf, "sparse/dense: attention %.4f  per-token %.4f\n",
                r.flops_of(CostKind::Attention, true) / r.flops_of(CostKind::Attention, false),
                r.flops_of(CostKind::Token, true) / r.flops_of(CostKind::Token, false));
  os << buf;
  if (auto g = golden_for(r.cfg)) {
    std::snprintf(buf, sizeof buf, "reference: %.1f M params, %.1f G FLOPs\n", g->params_m, g->flops_g);
    os << buf;
  }
  return os.str();
}

std::optional<GoldenCounts> golden_for(const HiViTConfig& cfg) {
  for (const auto& g : kGolden) {
    if (cfg.name != g.preset) continue;
    const auto ref = make_config(g.preset);
    if (cfg.img_size == ref.img_size && cfg.unit_size == ref.unit_size &&
        cfg.inner_patch == ref.inner_patch && cfg.in_chans == ref.in_chans &&
        cfg.depths == ref.depths && cfg.dims == ref.dims && cfg.heads == ref.heads &&
        cfg.mlp_ratio_main == ref.mlp_ratio_main && cfg.mlp_ratio_replace == ref.mlp_ratio_replace &&
        cfg.use_rpe == ref.use_rpe && cfg.num_classes == ref.num_classes)
      return g;
  }
  return std::nullopt;
}

std::string check_golden(const ProfileReport& r) {
  const auto g = golden_for(r.cfg);
  if (!g) return {};
  std::string msg;
  const double pm = r.total_params / 1e6, fg = r.total_flops_dense / 1e9;
  char buf[200];
  if (std::abs(pm - g->params_m) > kParamTolerance * g->params_m) {
    std::snprintf(buf, sizeof buf, "params %.3f M deviate from %.1f M by more than %.0f%%", pm,
                  g->params_m, kParamTolerance * 100);
    msg += buf;
  }
  if (std::abs(fg - g->flops_g) > kFlopTolerance * g->flops_g) {
    std::snprintf(buf, sizeof buf, "%sFLOPs %.3f G deviate from %.1f G by more than %.0f%%",
                  msg.empty() ? "" : "; ", fg, g->flops_g, kFlopTolerance * 100);
    msg += buf;
  }
  return msg;
}

}  // namespace hivit
