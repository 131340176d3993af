#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;
using CheckpointEntries = std::vector<std::pair<std::string, AnyTensor>>;

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// SALC layout: "SALC", u16 version, u32 entry count, then per entry u16 name
/// length, UTF-8 name, u8 precision (0 single, 1 double), u8 rank, u32 extents,
/// raw little-endian elements. Entry order is preserved.
void write_checkpoint(std::ostream& out, const CheckpointEntries& entries);
CheckpointEntries read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const CheckpointEntries& entries);
CheckpointEntries load_checkpoint(const std::filesystem::path& path);

template <typename T>
Tensor<T> as_precision(const AnyTensor& t) {
  return std::visit([](const auto& x) { return x.template cast<T>(); }, t);
}

}  // namespace sal_lab
