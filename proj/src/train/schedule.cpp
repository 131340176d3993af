#include "sal_lab/train/schedule.hpp"

#include <fmt/format.h>

#include <stdexcept>

namespace sal_lab {

PlateauScheduler::PlateauScheduler(double learning_rate, std::size_t patience, double factor, double min_delta)
    : learning_rate_(learning_rate), patience_(patience), factor_(factor), min_delta_(min_delta) {
  if (patience == 0) throw std::invalid_argument("plateau patience must be positive");
  if (!(factor > 0 && factor < 1)) throw std::invalid_argument(fmt::format("plateau factor {} outside (0, 1)", factor));
}

bool PlateauScheduler::observe(double validation_loss) {
  if (validation_loss < best_ - min_delta_) {
    best_ = validation_loss;
    stale_ = 0;
    return false;
  }
  if (++stale_ < patience_) return false;
  learning_rate_ *= factor_;
  ++reductions_;
  stale_ = 0;
  return true;
}

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {
  if (patience == 0) throw std::invalid_argument("early-stop patience must be positive");
}

bool EarlyStopping::observe(double validation_loss) {
  if (validation_loss < best_ - min_delta_) {
    best_ = validation_loss;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

TaskSampling parse_task_sampling(std::string_view name) {
  if (name == "uniform") return TaskSampling::uniform;
  if (name == "proportional") return TaskSampling::proportional;
  throw std::invalid_argument(fmt::format("unknown task sampling '{}' (expected uniform or proportional)", name));
}

std::string_view task_sampling_name(TaskSampling s) {
  return s == TaskSampling::uniform ? "uniform" : "proportional";
}

TaskSampler::TaskSampler(std::vector<std::size_t> task_sizes, TaskSampling mode)
    : sizes_(std::move(task_sizes)), mode_(mode) {
  if (sizes_.empty()) throw std::invalid_argument("task sampler needs at least one task");
  for (std::size_t n : sizes_) {
    if (n == 0) throw std::invalid_argument("task sampler: empty task");
    total_ += n;
  }
}

std::size_t TaskSampler::next(CounterRng& rng) const {
  if (mode_ == TaskSampling::uniform) return static_cast<std::size_t>(rng.uniform_int(sizes_.size()));
  std::uint64_t pick = rng.uniform_int(total_);
  for (std::size_t t = 0; t < sizes_.size(); ++t) {
    if (pick < sizes_[t]) return t;
    pick -= sizes_[t];
  }
  return sizes_.size() - 1;
}

}  // namespace sal_lab
