#pragma once

#include <cstddef>
#include <limits>
#include <string_view>
#include <vector>

#include "sal_lab/core/random.hpp"

namespace sal_lab {

/// Divides the learning rate by 1/factor after `patience` consecutive epochs
/// without a validation-loss improvement larger than min_delta.
class PlateauScheduler {
 public:
  PlateauScheduler(double learning_rate, std::size_t patience = 5, double factor = 0.1, double min_delta = 1e-4);

  /// Returns true when this observation triggered a reduction.
  bool observe(double validation_loss);
  double learning_rate() const { return learning_rate_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double learning_rate_;
  std::size_t patience_;
  double factor_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t reductions_ = 0;
};

/// Stops after `patience` consecutive epochs without improvement beyond min_delta.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 17, double min_delta = 1e-4);

  /// Returns true when the observation is a new best.
  bool observe(double validation_loss);
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

enum class TaskSampling : std::uint8_t { uniform, proportional };

TaskSampling parse_task_sampling(std::string_view name);
std::string_view task_sampling_name(TaskSampling s);

/// Chooses which task the next multi-task batch comes from.
class TaskSampler {
 public:
  TaskSampler(std::vector<std::size_t> task_sizes, TaskSampling mode);
  std::size_t next(CounterRng& rng) const;

 private:
  std::vector<std::size_t> sizes_;
  std::size_t total_ = 0;
  TaskSampling mode_;
};

}  // namespace sal_lab
