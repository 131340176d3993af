#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sal_lab/model/scar.hpp"
#include "sal_lab/train/augment.hpp"
#include "sal_lab/train/loss.hpp"
#include "sal_lab/train/metrics.hpp"
#include "sal_lab/train/schedule.hpp"

namespace sal_lab {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta = 10.0;
  /// Batches of single-task runs and fine-tuning.
  std::size_t batch_size = 32;
  /// Batches of multi-task pre-training.
  std::size_t pretrain_batch_size = 128;
  std::size_t eval_batch_size = 64;
  std::size_t max_epochs = 100;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.1;
  std::size_t early_stop_patience = 17;
  double min_delta = 1e-4;
  bool augmentation = true;
  AugmentConfig augment;
  RuleSelection rule_selection = RuleSelection::teacher;
  TaskSampling task_sampling = TaskSampling::uniform;
  std::uint64_t seed = 0;
  /// Writes wall_seconds as 0 so identical runs give identical logs.
  bool deterministic = false;
  /// Stop after the epoch that crosses this many seconds; 0 disables.
  double time_budget_seconds = 0;
  /// Fractions of each dataset held out, taken from the end of the file.
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  /// Also log one row per batch.
  bool log_batches = false;

  /// Throws naming the first invalid field.
  void validate() const;
  /// Sets one field from its text form; throws for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  /// Applies a flat file of `key = value` lines; '#' starts a comment.
  void apply_file(const std::filesystem::path& path);
  static std::vector<std::string> keys();
};

/// One task's splits with the structure they were generated for.
struct TaskData {
  TaskStructure structure;
  std::vector<ProblemInstance> train;
  std::vector<ProblemInstance> val;
  std::vector<ProblemInstance> test;

  std::string name() const { return std::string(task_name(structure.kind)); }
};

/// Contiguous split in file order: train, then validation, then test.
/// Each non-empty fraction yields at least one instance.
TaskData split_dataset(const TaskStructure& structure, std::vector<ProblemInstance> instances, double val_fraction,
                       double test_fraction);

struct EvalResult {
  double loss = 0;
  double ce = 0;
  double aux = 0;
  double accuracy = 0;
  std::size_t count = 0;
};

/// Eval-mode pass without augmentation or gradients. Throws for an empty split,
/// an instance that does not match the structure, or a model whose panel size differs.
EvalResult evaluate(const ScarModel<float>& model, std::span<const ProblemInstance> instances,
                    const TaskStructure& structure, const TrainConfig& config);

/// Sees every training batch (after augmentation) just before its update.
using BatchObserver = std::function<void(std::size_t epoch, std::size_t batch, std::size_t task,
                                         std::span<const ProblemInstance* const> instances)>;

struct TrainResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  double final_learning_rate = 0;
  bool early_stopped = false;
  bool budget_exhausted = false;
  /// Validation accuracy per task at the best epoch, in task order.
  std::vector<double> best_val_accuracy;
};

/// Trains on the train splits with a fresh optimizer. One task gives
/// single-task learning; several give multi-task learning where every batch
/// comes from one task picked by the configured sampler. Validation loss is
/// the mean over tasks. The model ends with its best-validation values.
/// Throws std::runtime_error naming epoch, batch and task on a non-finite loss.
TrainResult train(ScarModel<float>& model, std::span<const TaskData> tasks, const TrainConfig& config,
                  std::size_t batch_size, const std::string& phase, MetricLog* log = nullptr,
                  const BatchObserver& observer = {});

/// Draws `count` multi-task batch assignments exactly as train() does.
std::vector<std::size_t> sample_task_stream(std::span<const std::size_t> task_sizes, TaskSampling mode,
                                            std::uint64_t seed, std::size_t count);

enum class Regime : std::uint8_t { stl, mtl_pretrain_then_finetune, tl_pretrain_then_finetune };

Regime parse_regime(std::string_view name);
std::string_view regime_name(Regime r);

struct RegimeSpec {
  Regime regime = Regime::stl;
  std::vector<TaskData> pretrain;  // empty for stl
  TaskData target;

  /// stl has no pre-training set; mtl's contains the target kind; tl's does not.
  void validate() const;
};

struct RegimeResult {
  std::optional<TrainResult> pretrain;
  TrainResult finetune;
  EvalResult test;
  /// Model values after pre-training; empty for stl.
  CheckpointEntries pretrain_checkpoint;
};

/// stl trains on the target; mtl and tl pre-train on the pre-training set with
/// the multi-task batch size, then fine-tune on the target with a fresh
/// optimizer. The test split of the target is evaluated at the end.
RegimeResult run_regime(ScarModel<float>& model, const RegimeSpec& spec, const TrainConfig& config,
                        MetricLog* log = nullptr);

/// Fine-tunes `model` (already holding pre-trained values) on the target and evaluates its test split.
RegimeResult finetune_only(ScarModel<float>& model, const TaskData& target, const TrainConfig& config,
                           MetricLog* log = nullptr);

}  // namespace sal_lab
