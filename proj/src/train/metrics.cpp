#include "sal_lab/train/metrics.hpp"

#include <fmt/format.h>

#include <json.hpp>
#include <stdexcept>

namespace sal_lab {

MetricLog::MetricLog(const std::filesystem::path& csv_path, const std::filesystem::path& jsonl_path)
    : csv_(csv_path, std::ios::binary | std::ios::trunc), jsonl_(jsonl_path, std::ios::binary | std::ios::trunc) {
  if (!csv_) throw std::runtime_error(fmt::format("cannot write metric log {}", csv_path.string()));
  if (!jsonl_) throw std::runtime_error(fmt::format("cannot write metric log {}", jsonl_path.string()));
  csv_ << csv_header() << '\n';
  csv_.flush();
}

std::string MetricLog::csv_header() { return "phase,epoch,task,split,loss,ce,aux,accuracy,lr,wall_seconds"; }

std::string MetricLog::csv_row(const MetricRecord& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{}", r.phase, r.epoch, r.task, r.split, r.loss, r.ce, r.aux,
                     r.accuracy, r.lr, r.wall_seconds);
}

std::string MetricLog::json_line(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["task"] = r.task;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["ce"] = r.ce;
  j["aux"] = r.aux;
  j["accuracy"] = r.accuracy;
  j["lr"] = r.lr;
  j["wall_seconds"] = r.wall_seconds;
  return j.dump();
}

void MetricLog::append(const MetricRecord& record) {
  csv_ << csv_row(record) << '\n';
  jsonl_ << json_line(record) << '\n';
  csv_.flush();
  jsonl_.flush();
  ++rows_;
}

}  // namespace sal_lab
