#include "sal_lab/core/checkpoint.hpp"

#include <fmt/format.h>

#include <fstream>
#include <stdexcept>

#include "sal_lab/core/binary_io.hpp"

namespace sal_lab {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'L', 'C'};

template <typename T>
void write_values(std::ostream& out, const Tensor<T>& t) {
  for (T v : t.values()) binary::put(out, v);
}

template <typename T>
Tensor<T> read_values(std::istream& in, Shape shape, const std::string& name) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = binary::get<T>(in, name.c_str());
  return t;
}

}  // namespace

void write_checkpoint(std::ostream& out, const CheckpointEntries& entries) {
  out.write(kMagic, 4);
  binary::put<std::uint16_t>(out, kCheckpointVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > UINT16_MAX) throw std::invalid_argument("checkpoint entry name too long");
    binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    std::visit(
        [&](const auto& t) {
          binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.precision()));
          binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
          for (std::size_t e : t.shape()) binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
          write_values(out, t);
        },
        tensor);
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

CheckpointEntries read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw std::runtime_error("not a SALC checkpoint (bad magic at byte offset 0)");
  }
  const auto version = binary::get<std::uint16_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error(fmt::format("unsupported checkpoint version {} at byte offset 4", version));
  }
  const auto count = binary::get<std::uint32_t>(in, "entry count");
  CheckpointEntries entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = binary::get<std::uint16_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error(fmt::format("truncated name of entry {}", k));
    const auto precision = binary::get<std::uint8_t>(in, "precision");
    const auto rank = binary::get<std::uint8_t>(in, "rank");
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(binary::get<std::uint32_t>(in, "extent"));
    if (precision == static_cast<std::uint8_t>(Precision::single)) {
      entries.emplace_back(name, read_values<float>(in, std::move(shape), name));
    } else if (precision == static_cast<std::uint8_t>(Precision::double_)) {
      entries.emplace_back(name, read_values<double>(in, std::move(shape), name));
    } else {
      throw std::runtime_error(fmt::format("entry '{}' has unknown precision byte {}", name, precision));
    }
  }
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointEntries& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  write_checkpoint(out, entries);
}

CheckpointEntries load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open checkpoint '{}'", path.string()));
  return read_checkpoint(in);
}

}  // namespace sal_lab
