#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hivit {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One `key = value` entry of a config or recipe file.
struct KvEntry {
  std::string key;
  std::string value;
  int line = 0;
};

// Parses `key = value` lines. Blank lines and `#` comments are skipped; any
// other malformed line raises ConfigError naming `origin` and the line number.
std::vector<KvEntry> parse_kv(std::string_view text, std::string_view origin);

std::string read_text_file(const std::string& path);

// Typed value parsers; errors carry the entry's line number.
int kv_int(const KvEntry& e, std::string_view origin);
double kv_double(const KvEntry& e, std::string_view origin);
bool kv_bool(const KvEntry& e, std::string_view origin);
std::vector<int> kv_int_list(const KvEntry& e, std::string_view origin);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace hivit
