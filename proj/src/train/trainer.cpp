#include "sal_lab/train/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "sal_lab/core/adam.hpp"

namespace sal_lab {

namespace {

// RNG streams of one train() call; fixed so deterministic runs repeat exactly.
constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kTaskStream = 0x5441534bULL;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw std::invalid_argument(fmt::format("config key '{}': cannot parse '{}'", key, text));
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument(fmt::format("config key '{}': expected true or false, got '{}'", key, text));
}

std::vector<std::size_t> shuffled(std::size_t n, CounterRng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  return order;
}

// Rule targets [B, width] when every instance carries `width` rule bits; otherwise none.
std::optional<Tensor<float>> rule_targets(std::span<const ProblemInstance* const> batch, std::size_t width) {
  if (width == 0) return std::nullopt;
  Tensor<float> t(Shape{batch.size(), width});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b]->rules.size() != width) return std::nullopt;
    for (std::size_t j = 0; j < width; ++j) t.data()[b * width + j] = batch[b]->rules[j] ? 1.0f : 0.0f;
  }
  return t;
}

std::size_t annotated_width(const TaskData& task) {
  if (task.train.empty()) return 0;
  const std::size_t width = task.train.front().rules.size();
  for (const auto& inst : task.train) {
    if (inst.rules.size() != width) return 0;
  }
  return width;
}

std::size_t correct_count(const Var<float>& scores, std::span<const std::size_t> labels) {
  const std::size_t A = scores.shape()[1];
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const float* s = scores.value().data() + b * A;
    if (static_cast<std::size_t>(std::max_element(s, s + A) - s) == labels[b]) ++correct;
  }
  return correct;
}

void check_panels(const ScarModel<float>& model, const TaskStructure& structure,
                  std::span<const ProblemInstance> instances) {
  const auto& cfg = model.config();
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    inst.validate(structure);
    if (inst.height != cfg.panel_height || inst.width != cfg.panel_width) {
      throw std::invalid_argument(fmt::format("instance {} has {}x{} panels but the model expects {}x{}", i,
                                              inst.height, inst.width, cfg.panel_height, cfg.panel_width));
    }
  }
}

struct Accumulator {
  double loss = 0, ce = 0, aux = 0;
  std::size_t correct = 0, count = 0;

  void add(const LossTerms<float>& terms, std::size_t n, std::size_t right) {
    loss += static_cast<double>(terms.total.item()) * static_cast<double>(n);
    ce += static_cast<double>(terms.ce.item()) * static_cast<double>(n);
    aux += static_cast<double>(terms.aux.item()) * static_cast<double>(n);
    correct += right;
    count += n;
  }
  EvalResult result() const {
    const double n = static_cast<double>(std::max<std::size_t>(count, 1));
    return {loss / n, ce / n, aux / n, static_cast<double>(correct) / n, count};
  }
};

MetricRecord record(const std::string& phase, std::size_t epoch, const std::string& task, const std::string& split,
                    const EvalResult& r, double lr, double wall) {
  return {phase, epoch, task, split, r.loss, r.ce, r.aux, r.accuracy, lr, wall};
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument(fmt::format("learning_rate must be positive, got {}", learning_rate));
  if (!(beta >= 0)) throw std::invalid_argument(fmt::format("beta must be non-negative, got {}", beta));
  if (batch_size == 0 || pretrain_batch_size == 0 || eval_batch_size == 0) {
    throw std::invalid_argument("batch sizes must be positive");
  }
  if (max_epochs == 0) throw std::invalid_argument("max_epochs must be positive");
  if (plateau_patience == 0) throw std::invalid_argument("plateau_patience must be positive");
  if (early_stop_patience == 0) throw std::invalid_argument("early_stop_patience must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) {
    throw std::invalid_argument(fmt::format("plateau_factor {} outside (0, 1)", plateau_factor));
  }
  if (!(min_delta >= 0)) throw std::invalid_argument(fmt::format("min_delta must be non-negative, got {}", min_delta));
  augment.validate();
  if (!(time_budget_seconds >= 0)) throw std::invalid_argument("time_budget_seconds must be non-negative");
  if (!(val_fraction > 0 && test_fraction >= 0 && val_fraction + test_fraction < 1)) {
    throw std::invalid_argument(
        fmt::format("split fractions val {} and test {} must leave a training split", val_fraction, test_fraction));
  }
}

std::vector<std::string> TrainConfig::keys() {
  return {"learning_rate",       "beta",          "batch_size",         "pretrain_batch_size", "eval_batch_size",
          "max_epochs",          "plateau_patience", "plateau_factor",  "early_stop_patience", "min_delta",
          "augmentation",        "augment_probability", "transform_probability", "rule_selection",
          "task_sampling",       "seed",          "deterministic",      "time_budget_seconds", "val_fraction",
          "test_fraction",       "log_batches"};
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  if (key == "learning_rate") learning_rate = parse_number<double>(key, value);
  else if (key == "beta") beta = parse_number<double>(key, value);
  else if (key == "batch_size") batch_size = parse_number<std::size_t>(key, value);
  else if (key == "pretrain_batch_size") pretrain_batch_size = parse_number<std::size_t>(key, value);
  else if (key == "eval_batch_size") eval_batch_size = parse_number<std::size_t>(key, value);
  else if (key == "max_epochs") max_epochs = parse_number<std::size_t>(key, value);
  else if (key == "plateau_patience") plateau_patience = parse_number<std::size_t>(key, value);
  else if (key == "plateau_factor") plateau_factor = parse_number<double>(key, value);
  else if (key == "early_stop_patience") early_stop_patience = parse_number<std::size_t>(key, value);
  else if (key == "min_delta") min_delta = parse_number<double>(key, value);
  else if (key == "augmentation") augmentation = parse_bool(key, value);
  else if (key == "augment_probability") augment.apply_probability = parse_number<double>(key, value);
  else if (key == "transform_probability") augment.transform_probability = parse_number<double>(key, value);
  else if (key == "rule_selection") rule_selection = parse_rule_selection(value);
  else if (key == "task_sampling") task_sampling = parse_task_sampling(value);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else if (key == "deterministic") deterministic = parse_bool(key, value);
  else if (key == "time_budget_seconds") time_budget_seconds = parse_number<double>(key, value);
  else if (key == "val_fraction") val_fraction = parse_number<double>(key, value);
  else if (key == "test_fraction") test_fraction = parse_number<double>(key, value);
  else if (key == "log_batches") log_batches = parse_bool(key, value);
  else throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
}

void TrainConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot read config {}", path.string()));
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    std::string_view text = line;
    if (const auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
    text = trim(text);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) {
      throw std::invalid_argument(fmt::format("{}:{}: expected 'key = value'", path.string(), number));
    }
    try {
      set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(fmt::format("{}:{}: {}", path.string(), number, e.what()));
    }
  }
}

TaskData split_dataset(const TaskStructure& structure, std::vector<ProblemInstance> instances, double val_fraction,
                       double test_fraction) {
  const std::size_t n = instances.size();
  if (n == 0) throw std::invalid_argument(fmt::format("empty {} dataset", task_name(structure.kind)));
  auto part = [n](double f) {
    if (f <= 0) return std::size_t{0};
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(n))));
  };
  const std::size_t n_val = part(val_fraction), n_test = part(test_fraction);
  if (n_val + n_test >= n) {
    throw std::invalid_argument(
        fmt::format("{} instances leave no training split after {} validation and {} test", n, n_val, n_test));
  }
  TaskData data;
  data.structure = structure;
  const std::size_t n_train = n - n_val - n_test;
  auto begin = std::make_move_iterator(instances.begin());
  data.train.assign(begin, begin + static_cast<std::ptrdiff_t>(n_train));
  data.val.assign(begin + static_cast<std::ptrdiff_t>(n_train), begin + static_cast<std::ptrdiff_t>(n_train + n_val));
  data.test.assign(begin + static_cast<std::ptrdiff_t>(n_train + n_val), std::make_move_iterator(instances.end()));
  return data;
}

EvalResult evaluate(const ScarModel<float>& model, std::span<const ProblemInstance> instances,
                    const TaskStructure& structure, const TrainConfig& config) {
  if (instances.empty()) throw std::invalid_argument("evaluate: empty split");
  check_panels(model, structure, instances);
  const std::size_t width = model.has_rule_head(structure.kind) ? model.rule_width(structure.kind) : 0;
  NoGradGuard guard;
  Accumulator acc;
  for (std::size_t start = 0; start < instances.size(); start += config.eval_batch_size) {
    const std::size_t end = std::min(instances.size(), start + config.eval_batch_size);
    std::vector<const ProblemInstance*> batch;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&instances[i]);
      labels.push_back(instances[i].label);
    }
    const auto targets = rule_targets(batch, width);
    const auto panels = Var<float>::constant(batch_panels<float>(batch));
    const auto out = model.forward(panels, structure, /*training=*/false, targets.has_value());
    const auto terms = compute_loss(out, labels, targets ? &*targets : nullptr, config.beta, config.rule_selection);
    acc.add(terms, labels.size(), correct_count(out.scores, labels));
  }
  return acc.result();
}

std::vector<std::size_t> sample_task_stream(std::span<const std::size_t> task_sizes, TaskSampling mode,
                                            std::uint64_t seed, std::size_t count) {
  const TaskSampler sampler(std::vector<std::size_t>(task_sizes.begin(), task_sizes.end()), mode);
  CounterRng rng(seed, kTaskStream);
  std::vector<std::size_t> stream(count);
  for (auto& t : stream) t = sampler.next(rng);
  return stream;
}

TrainResult train(ScarModel<float>& model, std::span<const TaskData> tasks, const TrainConfig& config,
                  std::size_t batch_size, const std::string& phase, MetricLog* log, const BatchObserver& observer) {
  config.validate();
  if (tasks.empty()) throw std::invalid_argument("train: no tasks");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  const bool reshapes = config.augmentation && config.augment.apply_probability > 0 &&
                        config.augment.transform_probability > 0;
  for (const auto& task : tasks) {
    if (task.train.empty()) throw std::invalid_argument(fmt::format("train: empty {} training split", task.name()));
    if (task.val.empty()) throw std::invalid_argument(fmt::format("train: empty {} validation split", task.name()));
    check_panels(model, task.structure, task.train);
    check_panels(model, task.structure, task.val);
    if (reshapes && model.config().panel_height != model.config().panel_width) {
      throw std::invalid_argument("augmentation with rotations and transposition needs square panels");
    }
    if (const std::size_t width = annotated_width(task)) model.ensure_rule_head(task.structure.kind, width);
  }

  const std::vector<Var<float>> params = model.parameters();
  AdamState<float> adam;
  adam.learning_rate = config.learning_rate;
  PlateauScheduler scheduler(config.learning_rate, config.plateau_patience, config.plateau_factor, config.min_delta);
  EarlyStopping stopper(config.early_stop_patience, config.min_delta);
  CounterRng shuffle_rng(config.seed, kShuffleStream);
  CounterRng task_rng(config.seed, kTaskStream);
  std::vector<std::size_t> sizes;
  for (const auto& task : tasks) sizes.push_back(task.train.size());
  const TaskSampler sampler(sizes, config.task_sampling);

  std::size_t batches_per_epoch = 0;
  for (std::size_t n : sizes) batches_per_epoch += (n + batch_size - 1) / batch_size;

  const auto started = std::chrono::steady_clock::now();
  auto wall = [&] {
    if (config.deterministic) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  TrainResult result;
  CheckpointEntries best = model.to_checkpoint();
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<std::size_t>> orders(tasks.size());
  std::vector<std::size_t> cursors(tasks.size(), 0);
  for (std::size_t t = 0; t < tasks.size(); ++t) orders[t] = shuffled(sizes[t], shuffle_rng);

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = scheduler.learning_rate();
    adam.learning_rate = lr;
    std::vector<Accumulator> train_acc(tasks.size());
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t t = tasks.size() == 1 ? 0 : sampler.next(task_rng);
      const TaskData& task = tasks[t];
      if (cursors[t] >= sizes[t]) {
        orders[t] = shuffled(sizes[t], shuffle_rng);
        cursors[t] = 0;
      }
      const std::size_t end = std::min(sizes[t], cursors[t] + batch_size);
      std::vector<ProblemInstance> augmented;
      augmented.reserve(end - cursors[t]);
      std::vector<std::size_t> labels;
      for (std::size_t i = cursors[t]; i < end; ++i) {
        const ProblemInstance& inst = task.train[orders[t][i]];
        augmented.push_back(config.augmentation ? augment(inst, shuffle_rng, config.augment) : inst);
        labels.push_back(inst.label);
      }
      cursors[t] = end;
      std::vector<const ProblemInstance*> batch;
      for (const auto& inst : augmented) batch.push_back(&inst);
      if (observer) observer(epoch, b + 1, t, batch);

      const std::size_t width = model.has_rule_head(task.structure.kind) ? model.rule_width(task.structure.kind) : 0;
      const auto targets = rule_targets(batch, width);
      const auto panels = Var<float>::constant(batch_panels<float>(batch));
      const auto out = model.forward(panels, task.structure, /*training=*/true, targets.has_value());
      const auto terms = compute_loss(out, labels, targets ? &*targets : nullptr, config.beta, config.rule_selection);
      const double loss = terms.total.item();
      if (!std::isfinite(loss)) {
        throw std::runtime_error(
            fmt::format("non-finite loss {} at epoch {} batch {} (task {})", loss, epoch, b + 1, task.name()));
      }
      const auto grads = backward(terms.total);
      adam_step(std::span<const Var<float>>(params), grads, adam);
      const std::size_t right = correct_count(out.scores, labels);
      train_acc[t].add(terms, labels.size(), right);
      if (log && config.log_batches) {
        Accumulator one;
        one.add(terms, labels.size(), right);
        log->append(record(phase, epoch, task.name(), fmt::format("batch{}", b + 1), one.result(), lr, wall()));
      }
    }

    double val_loss = 0;
    std::vector<double> val_accuracy;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const EvalResult val = evaluate(model, tasks[t].val, tasks[t].structure, config);
      val_loss += val.loss / static_cast<double>(tasks.size());
      val_accuracy.push_back(val.accuracy);
      if (log) {
        const double now = wall();
        if (train_acc[t].count) log->append(record(phase, epoch, tasks[t].name(), "train", train_acc[t].result(), lr, now));
        log->append(record(phase, epoch, tasks[t].name(), "val", val, lr, now));
      }
    }
    result.epochs_run = epoch;
    if (!std::isfinite(val_loss)) {
      throw std::runtime_error(fmt::format("non-finite validation loss at epoch {}", epoch));
    }
    if (stopper.observe(val_loss)) {
      best = model.to_checkpoint();
      result.best_epoch = epoch;
      result.best_val_loss = val_loss;
      result.best_val_accuracy = val_accuracy;
    }
    scheduler.observe(val_loss);
    if (stopper.should_stop()) {
      result.early_stopped = true;
      break;
    }
    if (config.time_budget_seconds > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() >=
            config.time_budget_seconds) {
      result.budget_exhausted = true;
      break;
    }
  }
  result.final_learning_rate = scheduler.learning_rate();
  model.load_values(best);
  return result;
}

Regime parse_regime(std::string_view name) {
  if (name == "stl") return Regime::stl;
  if (name == "mtl" || name == "mtl_pretrain_then_finetune") return Regime::mtl_pretrain_then_finetune;
  if (name == "tl" || name == "tl_pretrain_then_finetune") return Regime::tl_pretrain_then_finetune;
  throw std::invalid_argument(fmt::format("unknown regime '{}' (expected stl, mtl or tl)", name));
}

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::stl: return "stl";
    case Regime::mtl_pretrain_then_finetune: return "mtl_pretrain_then_finetune";
    case Regime::tl_pretrain_then_finetune: return "tl_pretrain_then_finetune";
  }
  return "unknown";
}

void RegimeSpec::validate() const {
  const bool has_target = std::any_of(pretrain.begin(), pretrain.end(),
                                      [&](const TaskData& t) { return t.structure.kind == target.structure.kind; });
  switch (regime) {
    case Regime::stl:
      if (!pretrain.empty()) throw std::invalid_argument("stl trains exactly one task; no pre-training set allowed");
      break;
    case Regime::mtl_pretrain_then_finetune:
      if (pretrain.empty()) throw std::invalid_argument("mtl needs a pre-training task set");
      if (!has_target) {
        throw std::invalid_argument(fmt::format("mtl pre-training set must contain the target task {}", target.name()));
      }
      break;
    case Regime::tl_pretrain_then_finetune:
      if (pretrain.empty()) throw std::invalid_argument("tl needs a pre-training task set");
      if (has_target) {
        throw std::invalid_argument(
            fmt::format("tl target task {} must be absent from the pre-training set", target.name()));
      }
      break;
  }
}

RegimeResult finetune_only(ScarModel<float>& model, const TaskData& target, const TrainConfig& config,
                           MetricLog* log) {
  RegimeResult result;
  result.finetune = train(model, std::span<const TaskData>(&target, 1), config, config.batch_size, "finetune", log);
  if (!target.test.empty()) {
    result.test = evaluate(model, target.test, target.structure, config);
    if (log) {
      log->append(record("finetune", result.finetune.best_epoch, target.name(), "test", result.test,
                         result.finetune.final_learning_rate, 0.0));
    }
  }
  return result;
}

RegimeResult run_regime(ScarModel<float>& model, const RegimeSpec& spec, const TrainConfig& config, MetricLog* log) {
  spec.validate();
  if (spec.regime == Regime::stl) {
    RegimeResult result;
    result.finetune = train(model, std::span<const TaskData>(&spec.target, 1), config, config.batch_size, "stl", log);
    if (!spec.target.test.empty()) {
      result.test = evaluate(model, spec.target.test, spec.target.structure, config);
      if (log) {
        log->append(record("stl", result.finetune.best_epoch, spec.target.name(), "test", result.test,
                           result.finetune.final_learning_rate, 0.0));
      }
    }
    return result;
  }
  const TrainResult pre = train(model, spec.pretrain, config, config.pretrain_batch_size, "pretrain", log);
  CheckpointEntries pretrained = model.to_checkpoint();
  RegimeResult result = finetune_only(model, spec.target, config, log);
  result.pretrain = pre;
  result.pretrain_checkpoint = std::move(pretrained);
  return result;
}

}  // namespace sal_lab
