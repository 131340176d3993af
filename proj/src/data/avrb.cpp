#include "sal_lab/data/avrb.hpp"

#include <fmt/format.h>

#include <stdexcept>

#include "sal_lab/core/binary_io.hpp"

namespace sal_lab {

namespace {

constexpr char kMagic[4] = {'A', 'V', 'R', 'B'};

template <typename U>
U narrow(std::size_t v, const char* what) {
  if (v > static_cast<std::size_t>(static_cast<U>(~U{0}))) {
    throw std::invalid_argument(fmt::format("{} = {} does not fit the AVRB field", what, v));
  }
  return static_cast<U>(v);
}

DatasetHeader header_for(const std::vector<ProblemInstance>& instances, const TaskStructure& s) {
  DatasetHeader h;
  h.structure = s;
  h.count = instances.size();
  if (!instances.empty()) {
    h.height = instances[0].height;
    h.width = instances[0].width;
    h.rule_length = instances[0].rules.size();
  }
  return h;
}

void check_file_length(std::istream& in, const DatasetHeader& h) {
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto actual = static_cast<std::size_t>(in.tellg());
  in.seekg(here);
  const std::size_t expected = kAvrbHeaderBytes + h.count * h.instance_bytes();
  if (actual != expected) {
    throw std::runtime_error(fmt::format("dataset length {} bytes does not match header: expected {} bytes ({} instances)",
                                         actual, expected, h.count));
  }
}

}  // namespace

std::size_t DatasetHeader::instance_bytes() const {
  return structure.panel_count() * height * width + 1 + (rule_length + 7) / 8;
}

void write_header(std::ostream& out, const DatasetHeader& h) {
  h.structure.validate();
  out.write(kMagic, 4);
  binary::put<std::uint16_t>(out, kAvrbVersion);
  binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(h.structure.kind));
  binary::put<std::uint8_t>(out, narrow<std::uint8_t>(h.structure.rows, "rows"));
  binary::put<std::uint8_t>(out, narrow<std::uint8_t>(h.structure.cols, "cols"));
  binary::put<std::uint8_t>(out, narrow<std::uint8_t>(h.structure.context_count, "context count"));
  binary::put<std::uint8_t>(out, narrow<std::uint8_t>(h.structure.answer_count, "answer count"));
  binary::put<std::uint16_t>(out, narrow<std::uint16_t>(h.height, "height"));
  binary::put<std::uint16_t>(out, narrow<std::uint16_t>(h.width, "width"));
  binary::put<std::uint16_t>(out, narrow<std::uint16_t>(h.rule_length, "rule length"));
  binary::put<std::uint32_t>(out, narrow<std::uint32_t>(h.count, "instance count"));
}

DatasetHeader read_header(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw std::runtime_error("not an AVRB dataset: bad magic at byte offset 0");
  }
  const auto version = binary::get<std::uint16_t>(in, "version");
  if (version != kAvrbVersion) {
    throw std::runtime_error(fmt::format("unsupported AVRB version {} at byte offset 4", version));
  }
  const auto kind = binary::get<std::uint8_t>(in, "task kind");
  if (kind > static_cast<std::uint8_t>(TaskKind::o3)) {
    throw std::runtime_error(fmt::format("unknown task kind {} at byte offset 6", kind));
  }
  DatasetHeader h;
  h.structure.kind = static_cast<TaskKind>(kind);
  h.structure.rows = binary::get<std::uint8_t>(in, "rows");
  h.structure.cols = binary::get<std::uint8_t>(in, "cols");
  h.structure.context_count = binary::get<std::uint8_t>(in, "context count");
  h.structure.answer_count = binary::get<std::uint8_t>(in, "answer count");
  h.structure.group_size = h.structure.kind == TaskKind::o3 ? h.structure.answer_count - 1
                                                            : h.structure.context_count + 1;
  h.height = binary::get<std::uint16_t>(in, "height");
  h.width = binary::get<std::uint16_t>(in, "width");
  h.rule_length = binary::get<std::uint16_t>(in, "rule length");
  h.count = binary::get<std::uint32_t>(in, "instance count");
  try {
    h.structure.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(fmt::format("bad structure in header bytes 6-10: {}", e.what()));
  }
  if (h.height == 0 || h.width == 0) throw std::runtime_error("panel size must be positive (header bytes 11-14)");
  return h;
}

void write_instance(std::ostream& out, const DatasetHeader& h, const ProblemInstance& inst) {
  if (inst.height != h.height || inst.width != h.width || inst.rules.size() != h.rule_length) {
    throw std::invalid_argument(fmt::format("instance {}x{} with {} rule bits does not match dataset {}x{} with {}",
                                            inst.height, inst.width, inst.rules.size(), h.height, h.width,
                                            h.rule_length));
  }
  inst.validate(h.structure);
  out.write(reinterpret_cast<const char*>(inst.pixels.data()), static_cast<std::streamsize>(inst.pixels.size()));
  binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(inst.label));
  std::vector<std::uint8_t> packed((h.rule_length + 7) / 8, 0);
  for (std::size_t i = 0; i < h.rule_length; ++i) {
    if (inst.rules[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
}

ProblemInstance read_instance(std::istream& in, const DatasetHeader& h) {
  const auto offset = static_cast<long long>(in.tellg());
  ProblemInstance inst;
  inst.height = h.height;
  inst.width = h.width;
  inst.pixels.resize(h.structure.panel_count() * h.height * h.width);
  in.read(reinterpret_cast<char*>(inst.pixels.data()), static_cast<std::streamsize>(inst.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != inst.pixels.size()) {
    throw std::runtime_error(fmt::format("truncated panel data at byte offset {}", offset));
  }
  inst.label = binary::get<std::uint8_t>(in, "label");
  if (inst.label >= h.structure.answer_count) {
    throw std::runtime_error(fmt::format("label {} out of range at byte offset {}", inst.label,
                                         offset + static_cast<long long>(inst.pixels.size())));
  }
  std::vector<std::uint8_t> packed((h.rule_length + 7) / 8);
  in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  if (static_cast<std::size_t>(in.gcount()) != packed.size()) {
    throw std::runtime_error(fmt::format("truncated rule bits near byte offset {}", offset));
  }
  inst.rules.resize(h.rule_length);
  for (std::size_t i = 0; i < h.rule_length; ++i) inst.rules[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return inst;
}

AvrbWriter::AvrbWriter(const std::filesystem::path& path, const DatasetHeader& header)
    : path_(path), header_(header), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  write_header(out_, header_);
}

void AvrbWriter::append(const ProblemInstance& instance) {
  if (written_ == header_.count) throw std::logic_error("AvrbWriter: more instances than declared");
  write_instance(out_, header_, instance);
  ++written_;
}

void AvrbWriter::finish() {
  if (written_ != header_.count) {
    throw std::logic_error(fmt::format("AvrbWriter: wrote {} of {} declared instances", written_, header_.count));
  }
  out_.flush();
  if (!out_) throw std::runtime_error(fmt::format("write to '{}' failed", path_.string()));
  out_.close();
}

void write_dataset(std::ostream& out, const std::vector<ProblemInstance>& instances, const TaskStructure& s) {
  const DatasetHeader h = header_for(instances, s);
  write_header(out, h);
  for (const auto& inst : instances) write_instance(out, h, inst);
}

void write_dataset(const std::vector<ProblemInstance>& instances, const TaskStructure& s,
                   const std::filesystem::path& path) {
  AvrbWriter writer(path, header_for(instances, s));
  for (const auto& inst : instances) writer.append(inst);
  writer.finish();
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open dataset '{}'", path.string()));
  Dataset d;
  d.header = read_header(in);
  check_file_length(in, d.header);
  d.instances.reserve(d.header.count);
  for (std::size_t i = 0; i < d.header.count; ++i) d.instances.push_back(read_instance(in, d.header));
  return d;
}

DatasetHeader inspect_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open dataset '{}'", path.string()));
  DatasetHeader h = read_header(in);
  check_file_length(in, h);
  return h;
}

}  // namespace sal_lab
