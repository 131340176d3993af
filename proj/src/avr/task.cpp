#include "sal_lab/avr/task.hpp"

#include <fmt/format.h>

#include <numeric>
#include <stdexcept>

#include "sal_lab/core/ops.hpp"

namespace sal_lab {

std::string_view task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::rpm: return "rpm";
    case TaskKind::vap: return "vap";
    case TaskKind::o3: return "o3";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  if (name == "rpm") return TaskKind::rpm;
  if (name == "vap") return TaskKind::vap;
  if (name == "o3") return TaskKind::o3;
  throw std::invalid_argument(fmt::format("unknown task kind '{}' (expected rpm, vap or o3)", name));
}

TaskStructure TaskStructure::rpm() { return {TaskKind::rpm, 3, 3, 8, 8, 9}; }
TaskStructure TaskStructure::vap() { return {TaskKind::vap, 2, 3, 5, 4, 6}; }
TaskStructure TaskStructure::o3(std::size_t panels) {
  if (panels < 3) throw std::invalid_argument(fmt::format("o3 needs at least 3 panels, got {}", panels));
  return {TaskKind::o3, 1, panels - 1, 0, panels, panels - 1};
}

TaskStructure TaskStructure::of(TaskKind kind, std::size_t o3_panels) {
  switch (kind) {
    case TaskKind::rpm: return rpm();
    case TaskKind::vap: return vap();
    case TaskKind::o3: return o3(o3_panels);
  }
  throw std::invalid_argument("unknown task kind");
}

void TaskStructure::validate() const {
  bool ok = false;
  switch (kind) {
    case TaskKind::rpm: ok = *this == rpm(); break;
    case TaskKind::vap: ok = *this == vap(); break;
    case TaskKind::o3: ok = answer_count >= 3 && *this == o3(answer_count); break;
  }
  if (!ok) {
    throw std::invalid_argument(fmt::format(
        "inconsistent {} structure: r={} c={} context={} answers={} group={}", task_name(kind), rows, cols,
        context_count, answer_count, group_size));
  }
}

void ProblemInstance::validate(const TaskStructure& s) const {
  if (height == 0 || width == 0 || pixels.size() != s.panel_count() * height * width) {
    throw std::invalid_argument(fmt::format("instance has {} pixels, expected {} panels of {}x{}", pixels.size(),
                                            s.panel_count(), height, width));
  }
  if (label >= s.answer_count) {
    throw std::invalid_argument(fmt::format("label {} out of range for {} answers", label, s.answer_count));
  }
}

std::vector<std::vector<std::size_t>> arrangement_indices(const TaskStructure& s) {
  std::vector<std::vector<std::size_t>> groups(s.answer_count);
  for (std::size_t k = 0; k < s.answer_count; ++k) {
    auto& g = groups[k];
    if (s.kind == TaskKind::o3) {
      for (std::size_t j = 0; j < s.answer_count; ++j) {
        if (j != k) g.push_back(j);
      }
    } else {
      for (std::size_t j = 0; j < s.context_count; ++j) g.push_back(j);
      g.push_back(s.context_count + k);
    }
  }
  return groups;
}

template <typename T>
Var<T> arrange_groups(const Var<T>& embeddings, const TaskStructure& s) {
  const Shape& es = embeddings.shape();
  const bool batched = es.size() == 3;
  if ((es.size() != 2 && !batched) || es[es.size() - 2] != s.panel_count()) {
    throw std::invalid_argument(fmt::format("arrange_groups: embeddings {} expected {} panels for {}",
                                            to_string(es), s.panel_count(), task_name(s.kind)));
  }
  std::vector<std::size_t> flat;
  for (const auto& g : arrangement_indices(s)) flat.insert(flat.end(), g.begin(), g.end());
  const std::size_t d = es.back();
  const Var<T> picked = ops::gather(embeddings, batched ? 1 : 0, std::span<const std::size_t>(flat));
  const std::size_t batch = batched ? es[0] : 1;
  const Shape out = batched ? Shape{batch * s.answer_count, s.group_size, d} : Shape{s.answer_count, s.group_size, d};
  return ops::reshape(picked, out);
}

std::pair<std::size_t, std::size_t> structure_registry(std::span<const TaskStructure> structures) {
  if (structures.empty()) throw std::invalid_argument("structure_registry: no task structures given");
  std::size_t R = 1, C = 1;
  for (const auto& s : structures) {
    R = std::lcm(R, s.rows);
    C = std::lcm(C, s.cols);
  }
  return {R, C};
}

template Var<float> arrange_groups(const Var<float>&, const TaskStructure&);
template Var<double> arrange_groups(const Var<double>&, const TaskStructure&);

}  // namespace sal_lab
