#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <vector>

#include "sal_lab/avr/task.hpp"

namespace sal_lab {

inline constexpr std::uint16_t kAvrbVersion = 1;
/// magic(4) version(2) kind(1) r, c, context, answers(1 each) h, w(2 each) rule length(2) count(4).
inline constexpr std::size_t kAvrbHeaderBytes = 21;

struct DatasetHeader {
  TaskStructure structure;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t rule_length = 0;
  std::size_t count = 0;

  /// Panel bytes + label byte + packed rule bytes.
  std::size_t instance_bytes() const;
  bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<ProblemInstance> instances;
};

void write_header(std::ostream& out, const DatasetHeader& header);
/// Validates magic and version before anything else; errors name byte offsets.
DatasetHeader read_header(std::istream& in);
/// Instance payload: pixels, label, rule bits packed little-endian (bit i in byte i/8, position i%8).
void write_instance(std::ostream& out, const DatasetHeader& header, const ProblemInstance& instance);
ProblemInstance read_instance(std::istream& in, const DatasetHeader& header);

/// Streams instances to a file; finish() checks the declared count was met.
class AvrbWriter {
 public:
  AvrbWriter(const std::filesystem::path& path, const DatasetHeader& header);
  void append(const ProblemInstance& instance);
  void finish();

 private:
  std::filesystem::path path_;
  DatasetHeader header_;
  std::ofstream out_;
  std::size_t written_ = 0;
};

void write_dataset(const std::vector<ProblemInstance>& instances, const TaskStructure& structure,
                   const std::filesystem::path& path);
void write_dataset(std::ostream& out, const std::vector<ProblemInstance>& instances, const TaskStructure& structure);
Dataset read_dataset(const std::filesystem::path& path);
/// Header only, plus a check that the file length matches it exactly.
DatasetHeader inspect_dataset(const std::filesystem::path& path);

}  // namespace sal_lab
