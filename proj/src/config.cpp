#include "hivit/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <sstream>

namespace hivit {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

[[noreturn]] void fail(const HiViTConfig& cfg, const std::string& what) {
  throw ConfigError("config '" + cfg.name + "': " + what);
}

std::array<int, 3> triple(const KvEntry& e, std::string_view origin) {
  auto v = kv_int_list(e, origin);
  if (v.size() != 3)
    throw ConfigError(std::string(origin) + ":" + std::to_string(e.line) + ": key '" + e.key +
                      "' expects three values");
  return {v[0], v[1], v[2]};
}

}  // namespace

void HiViTConfig::validate() const {
  if (img_size <= 0 || unit_size <= 0 || inner_patch <= 0) fail(*this, "sizes must be positive");
  if (img_size % unit_size != 0)
    fail(*this, "img_size " + std::to_string(img_size) + " is not divisible by unit_size " +
                    std::to_string(unit_size));
  if (unit_size % inner_patch != 0 || unit_size / inner_patch != 4)
    fail(*this, "unit_size / inner_patch must equal 4 (got " + std::to_string(unit_size) + "/" +
                    std::to_string(inner_patch) + ")");
  if (dims[2] != 4 * dims[0] || dims[2] != 2 * dims[1])
    fail(*this, "dims must satisfy D3 = 4*D1 = 2*D2 (got " + std::to_string(dims[0]) + "," +
                    std::to_string(dims[1]) + "," + std::to_string(dims[2]) + ")");
  if (dims[0] <= 0) fail(*this, "dims must be positive");
  if (std::any_of(depths.begin(), depths.end(), [](int d) { return d < 0; }))
    fail(*this, "depths must be non-negative");
  if (heads <= 0 || dims[2] % heads != 0)
    fail(*this, "heads " + std::to_string(heads) + " must divide D3 " + std::to_string(dims[2]));
  if (use_abs_pos && dims[2] % 4 != 0) fail(*this, "abs pos embedding needs D3 divisible by 4");
  if (!(mlp_ratio_main > 0) || !(mlp_ratio_replace > 0)) fail(*this, "mlp ratios must be positive");
  if (!(drop_path_rate >= 0 && drop_path_rate < 1)) fail(*this, "drop_path_rate must be in [0, 1)");
  if (num_classes < 0) fail(*this, "num_classes must be >= 0");
  if (!(ln_eps > 0)) fail(*this, "ln_eps must be positive");
  if (in_chans <= 0) fail(*this, "in_chans must be positive");
  if (decoder_depth < 0 || decoder_dim <= 0 || decoder_heads <= 0 ||
      decoder_dim % decoder_heads != 0 || decoder_dim % 4 != 0)
    fail(*this, "decoder_dim must be divisible by decoder_heads and by 4");
}

int visible_count(int num_units, double mask_ratio) {
  if (!(mask_ratio > 0 && mask_ratio < 1))
    throw ConfigError("mask ratio must lie in (0, 1), got " + format_double(mask_ratio));
  if (num_units < 2) throw ConfigError("masking needs at least 2 units, got " + std::to_string(num_units));
  const int kept = static_cast<int>(std::lround((1.0 - mask_ratio) * num_units));
  return std::clamp(kept, 1, num_units - 1);
}

bool is_preset_name(std::string_view name) {
  static const char* names[] = {"t",       "s",       "b",     "hivit-t",      "hivit-s",
                                "hivit-b", "toy",     "small", "bench-medium", "custom"};
  const auto n = lower(name);
  return std::any_of(std::begin(names), std::end(names), [&](const char* p) { return n == p; });
}

HiViTConfig make_config(std::string_view preset) {
  const auto p = lower(preset);
  HiViTConfig c;
  if (p == "t" || p == "hivit-t") {
    c.name = "hivit-t";
    c.depths = {1, 1, 10};
    c.dims = {96, 192, 384};
    c.heads = 6;
    c.drop_path_rate = 0.05;
  } else if (p == "s" || p == "hivit-s") {
    c.name = "hivit-s";
    c.depths = {2, 2, 20};
    c.dims = {96, 192, 384};
    c.heads = 6;
    c.drop_path_rate = 0.3;
  } else if (p == "b" || p == "hivit-b") {
    c.name = "hivit-b";
    c.depths = {2, 2, 20};
    c.dims = {128, 256, 512};
    c.heads = 8;
    c.drop_path_rate = 0.5;
  } else if (p == "toy") {
    c.name = "toy";
    c.img_size = 32;
    c.unit_size = 8;
    c.inner_patch = 2;
    c.depths = {1, 1, 4};
    c.dims = {16, 32, 64};
    c.heads = 4;
    c.num_classes = 4;
    c.decoder_depth = 2;
    c.decoder_dim = 32;
    c.decoder_heads = 4;
  } else if (p == "small") {
    c.name = "small";
    c.img_size = 64;
    c.unit_size = 16;
    c.inner_patch = 4;
    c.depths = {1, 1, 2};
    c.dims = {32, 64, 128};
    c.heads = 4;
    c.num_classes = 4;
    c.decoder_depth = 1;
    c.decoder_dim = 64;
    c.decoder_heads = 4;
  } else if (p == "bench-medium") {
    c.name = "bench-medium";
    c.img_size = 128;
    c.unit_size = 16;
    c.inner_patch = 4;
    c.depths = {1, 1, 8};
    c.dims = {64, 128, 256};
    c.heads = 8;
    c.num_classes = 10;
    c.decoder_depth = 2;
    c.decoder_dim = 128;
    c.decoder_heads = 4;
  } else if (p == "custom") {
    c.name = "custom";
  } else {
    throw ConfigError("unknown preset '" + std::string(preset) +
                      "' (expected T, S, B, toy, small, bench-medium or custom)");
  }
  c.validate();
  return c;
}

HiViTConfig parse_config(std::string_view text, std::string_view origin) {
  const auto entries = parse_kv(text, origin);
  HiViTConfig c = make_config("custom");
  for (const auto& e : entries)
    if (e.key == "preset") c = make_config(e.value);
  for (const auto& e : entries) {
    const auto& k = e.key;
    if (k == "preset") continue;
    if (k == "name") c.name = e.value;
    else if (k == "img_size") c.img_size = kv_int(e, origin);
    else if (k == "unit_size") c.unit_size = kv_int(e, origin);
    else if (k == "inner_patch") c.inner_patch = kv_int(e, origin);
    else if (k == "in_chans") c.in_chans = kv_int(e, origin);
    else if (k == "depths") c.depths = triple(e, origin);
    else if (k == "dims") c.dims = triple(e, origin);
    else if (k == "heads") c.heads = kv_int(e, origin);
    else if (k == "mlp_ratio_main") c.mlp_ratio_main = kv_double(e, origin);
    else if (k == "mlp_ratio_replace") c.mlp_ratio_replace = kv_double(e, origin);
    else if (k == "use_rpe") c.use_rpe = kv_bool(e, origin);
    else if (k == "use_abs_pos") c.use_abs_pos = kv_bool(e, origin);
    else if (k == "drop_path_rate") c.drop_path_rate = kv_double(e, origin);
    else if (k == "num_classes") c.num_classes = kv_int(e, origin);
    else if (k == "ln_eps") c.ln_eps = kv_double(e, origin);
    else if (k == "decoder_depth") c.decoder_depth = kv_int(e, origin);
    else if (k == "decoder_dim") c.decoder_dim = kv_int(e, origin);
    else if (k == "decoder_heads") c.decoder_heads = kv_int(e, origin);
    else if (k == "debug_cross_unit_mix") c.debug_cross_unit_mix = kv_bool(e, origin);
    else
      throw ConfigError(std::string(origin) + ":" + std::to_string(e.line) + ": unknown key '" +
                        k + "'");
  }
  c.validate();
  return c;
}

HiViTConfig load_config(const std::string& path) { return parse_config(read_text_file(path), path); }

HiViTConfig resolve_config(const std::string& name_or_path) {
  if (std::filesystem::exists(name_or_path) && !std::filesystem::is_directory(name_or_path))
    return load_config(name_or_path);
  if (is_preset_name(name_or_path)) return make_config(name_or_path);
  throw ConfigError("'" + name_or_path + "' is neither a preset name nor a readable config file");
}

std::string to_text(const HiViTConfig& c) {
  std::ostringstream os;
  os << "name = " << c.name << '\n'
     << "img_size = " << c.img_size << '\n'
     << "unit_size = " << c.unit_size << '\n'
     << "inner_patch = " << c.inner_patch << '\n'
     << "in_chans = " << c.in_chans << '\n'
     << "depths = " << c.depths[0] << ", " << c.depths[1] << ", " << c.depths[2] << '\n'
     << "dims = " << c.dims[0] << ", " << c.dims[1] << ", " << c.dims[2] << '\n'
     << "heads = " << c.heads << '\n'
     << "mlp_ratio_main = " << format_double(c.mlp_ratio_main) << '\n'
     << "mlp_ratio_replace = " << format_double(c.mlp_ratio_replace) << '\n'
     << "use_rpe = " << (c.use_rpe ? "true" : "false") << '\n'
     << "use_abs_pos = " << (c.use_abs_pos ? "true" : "false") << '\n'
     << "drop_path_rate = " << format_double(c.drop_path_rate) << '\n'
     << "num_classes = " << c.num_classes << '\n'
     << "ln_eps = " << format_double(c.ln_eps) << '\n'
     << "decoder_depth = " << c.decoder_depth << '\n'
     << "decoder_dim = " << c.decoder_dim << '\n'
     << "decoder_heads = " << c.decoder_heads << '\n';
  if (c.debug_cross_unit_mix) os << "debug_cross_unit_mix = true\n";
  return os.str();
}

}  // namespace hivit
