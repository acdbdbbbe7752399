#include "hivit/kv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace hivit {
namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const KvEntry& e, std::string_view origin, std::string_view what) {
  throw ConfigError(std::string(origin) + ":" + std::to_string(e.line) + ": key '" + e.key +
                    "' expects " + std::string(what) + ", got '" + e.value + "'");
}

}  // namespace

std::vector<KvEntry> parse_kv(std::string_view text, std::string_view origin) {
  std::vector<KvEntry> out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": expected 'key = value', got '" + std::string(line) + "'");
    KvEntry e{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))),
              line_no};
    if (e.key.empty())
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int kv_int(const KvEntry& e, std::string_view origin) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || ptr != e.value.data() + e.value.size()) bad_value(e, origin, "an integer");
  return v;
}

double kv_double(const KvEntry& e, std::string_view origin) {
  try {
    std::size_t used = 0;
    const double v = std::stod(e.value, &used);
    if (used != e.value.size()) bad_value(e, origin, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(e, origin, "a number");
  }
}

bool kv_bool(const KvEntry& e, std::string_view origin) {
  if (e.value == "true" || e.value == "1" || e.value == "on" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "off" || e.value == "no") return false;
  bad_value(e, origin, "a boolean");
}

std::vector<int> kv_int_list(const KvEntry& e, std::string_view origin) {
  std::vector<int> out;
  std::string_view rest = e.value;
  while (!rest.empty()) {
    auto comma = rest.find(',');
    std::string_view item = trim(rest.substr(0, comma));
    int v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size())
      bad_value(e, origin, "a comma-separated integer list");
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto ptr = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::string(buf, ptr);
}

}  // namespace hivit
