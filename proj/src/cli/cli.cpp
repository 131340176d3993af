#include "sal_lab/cli/cli.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "sal_lab/core/checkpoint.hpp"
#include "sal_lab/data/avrb.hpp"
#include "sal_lab/data/taskgen.hpp"
#include "sal_lab/model/scar.hpp"
#include "sal_lab/train/model_gradcheck.hpp"
#include "sal_lab/train/trainer.hpp"

namespace sal_lab {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// SAL_LAB_THREADS, defaulting to 1; the only environment variable read.
std::size_t worker_threads() {
  const char* text = std::getenv("SAL_LAB_THREADS");
  if (!text || !*text) return 1;
  try {
    const long n = std::stol(text);
    if (n < 1) throw std::out_of_range("non-positive");
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw UsageError(fmt::format("SAL_LAB_THREADS must be a positive integer, got '{}'", text));
  }
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("no separator");
    std::size_t used = 0;
    const std::size_t h = std::stoul(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument("trailing characters");
    const std::string rest = text.substr(x + 1);
    const std::size_t w = std::stoul(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("trailing characters");
    return {h, w};
  } catch (const std::exception&) {
    throw UsageError(fmt::format("--size expects HxW, got '{}'", text));
  }
}

struct GenerateArgs {
  std::string task;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t panels = 5;
  std::vector<std::string> rules;
  std::string size = "32x32";
  std::size_t min_rules = 1;
  std::size_t max_rules = 2;
};

int run_generate(const GenerateArgs& a, std::ostream& out) {
  GeneratorConfig cfg;
  cfg.task = parse_task(a.task);
  cfg.count = a.count;
  cfg.seed = a.seed;
  cfg.o3_panels = a.panels;
  std::tie(cfg.height, cfg.width) = parse_size(a.size);
  for (const auto& r : a.rules) {
    try {
      cfg.allowed_rules.push_back(parse_rule_pair(r));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  cfg.min_rules = a.min_rules;
  cfg.max_rules = a.max_rules;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto instances = generate(cfg, worker_threads());
  write_dataset(instances, cfg.structure(), a.out);
  fmt::print(out, "wrote {} {} instances ({}x{}) to {}\n", instances.size(), a.task, cfg.height, cfg.width, a.out);
  return 0;
}

TaskData load_task(const std::string& path, const TrainConfig& config) {
  Dataset d = read_dataset(path);
  return split_dataset(d.header.structure, std::move(d.instances), config.val_fraction, config.test_fraction);
}

struct TrainArgs {
  std::string regime;
  std::vector<std::string> data;
  std::string preset;
  std::string out;
  std::string finetune;
  bool deterministic = false;
  std::string config;
};

void print_phase(std::ostream& out, const std::string& phase, const TrainResult& r) {
  fmt::print(out, "{}: {} epochs, best epoch {}, best validation loss {:.6f}, final lr {}{}\n", phase, r.epochs_run,
             r.best_epoch, r.best_val_loss, r.final_learning_rate, r.early_stopped ? " (early stop)" : "");
}

int run_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig config;
  if (!a.config.empty()) {
    try {
      config.apply_file(a.config);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (a.deterministic) config.deterministic = true;
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Regime regime = parse_regime(a.regime);
  if (a.finetune.empty()) {
    if (regime == Regime::stl && a.data.size() != 1) throw UsageError("--regime stl takes exactly one --data path");
    if (regime == Regime::tl_pretrain_then_finetune && a.data.size() < 2) {
      throw UsageError("--regime tl needs pre-training paths followed by the target path");
    }
  }

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  const fs::path model_path = out_dir / "model.salc";
  const fs::path pretrain_path = out_dir / "pretrain.salc";
  if (!a.finetune.empty() && fs::exists(model_path) && fs::equivalent(a.finetune, model_path)) {
    throw UsageError("--finetune checkpoint would be overwritten by the output model; choose another --out");
  }

  std::vector<TaskData> tasks;
  for (const auto& path : a.data) tasks.push_back(load_task(path, config));
  const std::size_t h = tasks.front().train.front().height, w = tasks.front().train.front().width;
  for (const auto& t : tasks) {
    if (t.train.front().height != h || t.train.front().width != w) {
      throw std::runtime_error("all datasets must share one panel size");
    }
  }

  MetricLog log(out_dir / "metrics.csv", out_dir / "metrics.jsonl");
  RegimeResult result;
  std::optional<ScarModel<float>> model;
  if (!a.finetune.empty()) {
    model.emplace(ScarModel<float>::from_checkpoint(load_checkpoint(a.finetune)));
    result = finetune_only(*model, tasks.back(), config, &log);
  } else {
    ScarConfig scar = ScarConfig::preset_named(a.preset);
    scar.panel_height = h;
    scar.panel_width = w;
    model.emplace(scar, config.seed);
    RegimeSpec spec;
    spec.regime = regime;
    spec.target = tasks.back();
    if (regime == Regime::mtl_pretrain_then_finetune) spec.pretrain = tasks;
    if (regime == Regime::tl_pretrain_then_finetune) spec.pretrain.assign(tasks.begin(), tasks.end() - 1);
    result = run_regime(*model, spec, config, &log);
  }
  if (result.pretrain) {
    print_phase(out, "pretrain", *result.pretrain);
    save_checkpoint(pretrain_path, result.pretrain_checkpoint);
  }
  print_phase(out, result.pretrain || !a.finetune.empty() ? "finetune" : "stl", result.finetune);
  save_checkpoint(model_path, model->to_checkpoint());
  fmt::print(out, "test {}: accuracy {:.4f} loss {:.6f} over {} instances\n", tasks.back().name(), result.test.accuracy,
             result.test.loss, result.test.count);
  fmt::print(out, "wrote {}\n", model_path.string());
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_path, std::ostream& out) {
  const auto model = ScarModel<float>::from_checkpoint(load_checkpoint(model_path));
  const Dataset d = read_dataset(data_path);
  const EvalResult r = evaluate(model, d.instances, d.header.structure, TrainConfig{});
  fmt::print(out, "accuracy {:.4f} ({} of {})\n", r.accuracy,
             static_cast<std::size_t>(std::llround(r.accuracy * static_cast<double>(r.count))), r.count);
  fmt::print(out, "loss {:.6f} ce {:.6f} aux {:.6f}\n", r.loss, r.ce, r.aux);
  return 0;
}

int run_gradcheck(const ModelGradcheckConfig& cfg, std::ostream& out) {
  const auto report = run_model_gradcheck(cfg);
  fmt::print(out, "checked {} coordinates ({} in W*) across {} tensors, {} with the relu pattern pinned\n", report.checks.size(),
             report.w_star_checked, report.tensors_covered, report.pinned);
  fmt::print(out, "loss {:.6f}; difference resolution {:.2e} ({}-point stencil, h = {:.0e})\n", report.loss,
             report.resolution, cfg.stencil, cfg.step);
  fmt::print(out, "{} resolvable coordinates: max relative error {:.3e} (tolerance {:.1e})\n", report.resolvable,
             report.max_relative_error, cfg.tolerance);
  fmt::print(out, "{} below resolution: max absolute error {:.3e}\n", report.checks.size() - report.resolvable,
             report.max_unresolvable_absolute_error);
  fmt::print(out, "sharing over {}x{} blocks: {} checked, max relative error {:.3e}, max in-block spread {:.3e}\n",
             report.block_rows, report.block_cols, report.sharing_checked, report.sharing_max_relative_error,
             report.sharing_max_spread);
  auto worst = report.checks;
  std::erase_if(worst, [](const auto& c) { return !c.resolvable; });
  std::sort(worst.begin(), worst.end(), [](const auto& a, const auto& b) { return a.relative_error > b.relative_error; });
  worst.resize(std::min<std::size_t>(worst.size(), 3));
  fmt::print(out, "largest relative errors\n");
  for (const auto& c : worst) {
    fmt::print(out, "  {}[{}] analytic {:.9e} numeric {:.9e} relative {:.3e}{}\n", c.parameter, c.index, c.analytic,
               c.numeric, c.relative_error, c.pinned ? " (relu pattern pinned)" : "");
  }
  const bool ok = report.passed(cfg.tolerance);
  fmt::print(out, "{} in {:.1f} s\n", ok ? "PASS" : "FAIL", report.seconds);
  return ok ? 0 : kExitCheckFailed;
}

int run_inspect(const std::string& path, std::ostream& out) {
  const Dataset d = read_dataset(path);
  const auto& h = d.header;
  const auto& s = h.structure;
  fmt::print(out, "task {}\ngrid {}x{}\ncontext panels {}\nanswer panels {}\npanel size {}x{}\nrule bits {}\ninstances {}\n",
             task_name(s.kind), s.rows, s.cols, s.context_count, s.answer_count, h.height, h.width, h.rule_length,
             h.count);
  std::vector<std::size_t> histogram(s.answer_count, 0);
  for (const auto& inst : d.instances) ++histogram[inst.label];
  fmt::print(out, "label histogram\n");
  for (std::size_t k = 0; k < histogram.size(); ++k) fmt::print(out, "  {} {}\n", k, histogram[k]);
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structure-aware layer laboratory"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenerateArgs gen;
  auto* generate_cmd = app.add_subcommand("generate", "Write a procedurally generated AVRB dataset");
  generate_cmd->add_option("--task", gen.task, "rpm, vap or o3")->required()->check(CLI::IsMember({"rpm", "vap", "o3"}));
  generate_cmd->add_option("--count", gen.count, "Number of instances")->required()->check(CLI::PositiveNumber);
  generate_cmd->add_option("--seed", gen.seed, "Generator seed")->required();
  generate_cmd->add_option("--out", gen.out, "Output file")->required();
  generate_cmd->add_option("--panels", gen.panels, "Panels of an o3 instance")->check(CLI::Range(3, 255));
  generate_cmd->add_option("--rules", gen.rules, "Allowed attribute:relation pairs")->delimiter(',');
  generate_cmd->add_option("--size", gen.size, "Panel size HxW");
  generate_cmd->add_option("--min-rules", gen.min_rules, "Fewest active rules per instance");
  generate_cmd->add_option("--max-rules", gen.max_rules, "Most active rules per instance");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model under one regime");
  train_cmd->add_option("--regime", train_args.regime, "stl, mtl or tl")
      ->required()
      ->check(CLI::IsMember({"stl", "mtl", "tl"}));
  train_cmd->add_option("--data", train_args.data, "AVRB files; the last one is the target task")
      ->required()
      ->delimiter(',');
  train_cmd->add_option("--preset", train_args.preset, "scar-paper or scar-tiny")
      ->required()
      ->check(CLI::IsMember({"scar-paper", "scar-tiny"}));
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();
  train_cmd->add_option("--finetune", train_args.finetune, "Pre-trained checkpoint to fine-tune")
      ->check(CLI::ExistingFile);
  train_cmd->add_flag("--deterministic", train_args.deterministic, "Reproducible logs and checkpoints");
  train_cmd->add_option("--config", train_args.config, "Flat key = value overrides")->check(CLI::ExistingFile);

  std::string eval_model, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset");
  eval_cmd->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "AVRB file")->required()->check(CLI::ExistingFile);

  ModelGradcheckConfig grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the whole model in double precision");
  grad_cmd->add_option("--preset", grad.preset, "scar-paper or scar-tiny")->check(CLI::IsMember({"scar-paper", "scar-tiny"}));
  grad_cmd->add_option("--seed", grad.seed, "Model and data seed");
  grad_cmd->add_option("--tolerance", grad.tolerance, "Largest accepted relative error")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--stencil", grad.stencil, "Central-difference points, 2 or 4")->check(CLI::IsMember({2, 4}));
  grad_cmd->add_option("--floor", grad.floor, "Denominator floor of the relative error")->check(CLI::PositiveNumber);

  std::string inspect_data;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print a dataset header and label histogram");
  inspect_cmd->add_option("--data", inspect_data, "AVRB file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*generate_cmd) return run_generate(gen, out);
    if (*train_cmd) return run_train(train_args, out);
    if (*eval_cmd) return run_eval(eval_model, eval_data, out);
    if (*grad_cmd) return run_gradcheck(grad, out);
    if (*inspect_cmd) return run_inspect(inspect_data, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace sal_lab
