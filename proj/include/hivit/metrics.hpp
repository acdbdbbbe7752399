#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>

namespace hivit {

struct MetricsRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::string split = "train";
  double loss = 0;
  double lr = 0;
  double throughput_img_s = 0;
  double wall_ms = 0;
  std::optional<double> accuracy;
  std::string config;  // optional tag; omitted when empty
};

// One JSON object, no trailing newline.
std::string metrics_line(const MetricsRow& row);

// Appends JSON lines. Each row goes out in a single write followed by a
// flush, so a concurrent reader only ever sees whole lines.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool truncate = false);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void append(const MetricsRow& row);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::FILE* f_ = nullptr;
};

}  // namespace hivit
