#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/model/sal.hpp"

namespace sal_lab {

enum class TaskKind : std::uint8_t { rpm = 0, vap = 1, o3 = 2 };

std::string_view task_name(TaskKind kind);
/// Throws std::invalid_argument for names other than rpm, vap, o3.
TaskKind parse_task(std::string_view name);

/// Geometry of one task: the r x c grid SAL sees, how many panels are context
/// and answers, and how many embeddings make up a candidate group.
struct TaskStructure {
  TaskKind kind = TaskKind::rpm;
  std::size_t rows = 3;
  std::size_t cols = 3;
  std::size_t context_count = 8;
  std::size_t answer_count = 8;
  std::size_t group_size = 9;

  static TaskStructure rpm();
  static TaskStructure vap();
  /// O3 with `panels` images in a single row; any panels >= 3.
  static TaskStructure o3(std::size_t panels);
  /// The standard structure of a kind; o3 needs its panel count.
  static TaskStructure of(TaskKind kind, std::size_t o3_panels = 5);

  std::size_t panel_count() const { return context_count + answer_count; }
  StructureSpec spec() const { return {rows, cols}; }
  /// Throws if the fields are inconsistent for the kind.
  void validate() const;
  bool operator==(const TaskStructure&) const = default;
};

/// One matrix: panels in file order (context first, then answers; o3 has only
/// answers). Pixels are 8-bit intensities, value = byte / 255, with 0 black.
struct ProblemInstance {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // [panels, height, width]
  std::size_t label = 0;
  std::vector<std::uint8_t> rules;   // multi-hot, empty when unannotated

  std::size_t panel_count() const { return height * width == 0 ? 0 : pixels.size() / (height * width); }
  std::span<const std::uint8_t> panel(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * height * width, height * width);
  }
  std::span<std::uint8_t> panel(std::size_t i) {
    return std::span<std::uint8_t>(pixels).subspan(i * height * width, height * width);
  }
  /// Throws unless the panel count and label match the structure.
  void validate(const TaskStructure& s) const;
  bool operator==(const ProblemInstance&) const = default;
};

/// Group k lists panel indices in row-major grid order: for rpm/vap the
/// context panels followed by answer k; for o3 every index except k.
std::vector<std::vector<std::size_t>> arrangement_indices(const TaskStructure& s);

/// embeddings [P, d_h] -> [A, I, d_h], or batched [B, P, d_h] -> [B*A, I, d_h].
/// Pure selection: values are copied unchanged.
template <typename T>
Var<T> arrange_groups(const Var<T>& embeddings, const TaskStructure& s);

/// (R, C) = (lcm of all rows, lcm of all cols) over the given structures.
std::pair<std::size_t, std::size_t> structure_registry(std::span<const TaskStructure> structures);

}  // namespace sal_lab
