#include "hivit/metrics.hpp"

#include <stdexcept>

#include <json.hpp>

namespace hivit {

std::string metrics_line(const MetricsRow& row) {
  nlohmann::ordered_json j;
  j["step"] = row.step;
  j["epoch"] = row.epoch;
  j["split"] = row.split;
  j["loss"] = row.loss;
  j["lr"] = row.lr;
  j["throughput_img_s"] = row.throughput_img_s;
  j["wall_ms"] = row.wall_ms;
  if (row.accuracy) j["accuracy"] = *row.accuracy;
  if (!row.config.empty()) j["config"] = row.config;
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::string& path, bool truncate) : path_(path) {
  f_ = std::fopen(path.c_str(), truncate ? "w" : "a");
  if (!f_) throw std::runtime_error("cannot open metrics file '" + path + "'");
}

MetricsWriter::~MetricsWriter() {
  if (f_) std::fclose(f_);
}

void MetricsWriter::append(const MetricsRow& row) {
  const std::string line = metrics_line(row) + "\n";
  if (std::fwrite(line.data(), 1, line.size(), f_) != line.size() || std::fflush(f_) != 0)
    throw std::runtime_error("write failed for metrics file '" + path_ + "'");
}

}  // namespace hivit
