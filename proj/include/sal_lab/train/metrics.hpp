#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>

namespace sal_lab {

/// One row of the metric log. `split` is train, val or test; `batch` is set
/// only for per-batch rows and is otherwise omitted from the JSON mirror.
struct MetricRecord {
  std::string phase;
  std::size_t epoch = 0;
  std::string task;
  std::string split;
  double loss = 0;
  double ce = 0;
  double aux = 0;
  double accuracy = 0;
  double lr = 0;
  double wall_seconds = 0;
};

/// CSV with a header row plus a line-delimited JSON mirror. Numbers use the
/// shortest representation that round-trips, so identical runs give identical bytes.
class MetricLog {
 public:
  MetricLog(const std::filesystem::path& csv_path, const std::filesystem::path& jsonl_path);
  void append(const MetricRecord& record);
  std::size_t rows() const { return rows_; }

  static std::string csv_header();
  static std::string csv_row(const MetricRecord& record);
  static std::string json_line(const MetricRecord& record);

 private:
  std::ofstream csv_;
  std::ofstream jsonl_;
  std::size_t rows_ = 0;
};

}  // namespace sal_lab
