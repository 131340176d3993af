// Acceptance gate: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <CLI11.hpp>
#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sal_lab/avr/task.hpp"
#include "sal_lab/cli/cli.hpp"
#include "sal_lab/data/avrb.hpp"
#include "sal_lab/data/taskgen.hpp"
#include "sal_lab/model/sal.hpp"
#include "sal_lab/model/scar.hpp"
#include "sal_lab/train/model_gradcheck.hpp"
#include "sal_lab/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace sal_lab;

namespace {

// Pinned thresholds.
constexpr double kSalOracleTolerance = 1e-6;
constexpr double kSalOracleSeconds = 10;
constexpr double kDegenerationTolerance = 1e-6;
constexpr double kGradientTolerance = 1e-5;
constexpr double kGradientSeconds = 300;
constexpr std::size_t kGradientSamples = 200;
constexpr std::size_t kGradientWStarSamples = 50;
constexpr std::size_t kSoundnessCount = 10000;
constexpr double kUniformityMinP = 0.01;
constexpr double kSingleRuleAccuracy = 0.90;
constexpr double kMixtureAccuracy = 0.80;
constexpr double kOddOneOutAccuracy = 0.70;
constexpr double kLearnabilitySeconds = 3600;
constexpr std::size_t kLearnabilityTrain = 5000;
constexpr std::size_t kTransferSeeds = 3;
constexpr std::size_t kTransferTarget = 500;
constexpr std::size_t kTransferPretrain = 2000;
constexpr std::size_t kTransferPretrainEpochs = 8;
constexpr std::size_t kTransferPretrainBatch = 32;
constexpr std::size_t kTransferFinetuneEpochs = 60;
constexpr std::size_t kMtlBatches = 1000;
constexpr double kMtlFrequencyTolerance = 0.05;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

struct Options {
  fs::path work_dir;
  std::vector<std::string> only;
};

Tensor<double> uniform_tensor(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------

Outcome sal_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  const std::size_t R = 6, C = 60;
  const std::size_t d_hs[] = {4, 8}, d_vs[] = {4, 16};
  double worst = 0;
  std::size_t cases = 0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t d_h = d_hs[trial % 2], d_v = d_vs[(trial / 2) % 2];
    const Tensor<double> w_star = uniform_tensor({R, C, d_h, d_v}, rng);
    for (std::size_t r = 1; r <= 3; ++r) {
      for (std::size_t c = 3; c <= 6; ++c) {
        const Tensor<double> got = adapt_weights(Var<double>::constant(w_star), {r, c}).w.value();
        const std::size_t d_r = R / r, d_c = C / c;
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t l = 0; l < c; ++l)
            for (std::size_t m = 0; m < d_h; ++m)
              for (std::size_t n = 0; n < d_v; ++n) {
                double sum = 0;
                for (std::size_t a = 0; a < d_r; ++a)
                  for (std::size_t b = 0; b < d_c; ++b) sum += w_star.at({j * d_r + a, l * d_c + b, m, n});
                const double want = sum / static_cast<double>(d_r * d_c);
                const double have = got[((j * c + l) * d_h + m) * d_v + n];
                worst = std::max(worst, std::abs(have - want) / std::max(std::abs(want), 1e-12));
              }
        ++cases;
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst < kSalOracleTolerance && elapsed < kSalOracleSeconds,
          fmt::format("{} (W*, structure) pairs, max relative error {:.2e} (limit {:.0e}), {:.2f} s (limit {} s)", cases,
                      worst, kSalOracleTolerance, elapsed, kSalOracleSeconds)};
}

Outcome static_degeneration() {
  std::mt19937_64 rng(77);
  struct Case {
    std::size_t r, c, d_h, heads, d_v;
  };
  const Case cases[] = {{3, 3, 8, 1, 5}, {2, 3, 8, 4, 3}, {1, 4, 20, 5, 16}, {3, 6, 6, 2, 4}};
  double worst = 0;
  std::size_t inputs = 0;
  for (const auto& k : cases) {
    const Tensor<double> w = uniform_tensor({k.r, k.c, k.d_h, k.d_v}, rng);
    const Tensor<double> bias = uniform_tensor({k.heads, k.d_v}, rng);
    const auto weights = SalWeights<double>::wrap(Var<double>::constant(w), Var<double>::constant(bias), k.heads);
    const std::size_t N = 250, cells = k.r * k.c, d_l = k.d_h / k.heads;
    const Tensor<double> x = uniform_tensor({N, cells, k.d_h}, rng);
    const Tensor<double> y = sal_apply(Var<double>::constant(x), weights, {k.r, k.c}).value();
    // Static layer: each head is a fixed affine map of its flattened slice.
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t l = 0; l < k.heads; ++l)
        for (std::size_t n = 0; n < k.d_v; ++n) {
          double want = bias.at({l, n});
          for (std::size_t cell = 0; cell < cells; ++cell)
            for (std::size_t m = l * d_l; m < (l + 1) * d_l; ++m)
              want += x.at({i, cell, m}) * w.at({cell / k.c, cell % k.c, m, n});
          worst = std::max(worst, std::abs(y.at({i, l, n}) - want));
        }
    inputs += N;
  }
  return {worst < kDegenerationTolerance,
          fmt::format("{} inputs over 4 layer shapes, max abs difference {:.2e} (limit {:.0e})", inputs, worst,
                      kDegenerationTolerance)};
}

Outcome gradient_suite() {
  ModelGradcheckConfig config;
  config.preset = "scar-tiny";
  config.seed = 1;
  config.tolerance = kGradientTolerance;
  config.step = 1e-4;
  config.samples = kGradientSamples;
  config.w_star_samples = kGradientWStarSamples;
  const auto r = run_model_gradcheck(config);
  const bool ok = r.passed(kGradientTolerance) && r.checks.size() >= kGradientSamples &&
                  r.w_star_checked >= kGradientWStarSamples && r.sharing_checked > 0 && r.seconds < kGradientSeconds;
  return {ok, fmt::format("{} coordinates ({} W*, {} tensors), max relative error {:.2e} over {} resolvable, "
                          "max abs error {:.1e} below resolution {:.1e}; sharing 1/({}*{}) over {} blocks, max "
                          "relative error {:.2e}; {:.0f} s (limit {:.0f} s)",
                          r.checks.size(), r.w_star_checked, r.tensors_covered, r.max_relative_error, r.resolvable,
                          r.max_unresolvable_absolute_error, r.resolution, r.block_rows, r.block_cols,
                          r.sharing_checked, r.sharing_max_relative_error, r.seconds, kGradientSeconds)};
}

Outcome arrangement_contract() {
  struct Expect {
    TaskStructure s;
    std::size_t groups, size;
  };
  const Expect expected[] = {{TaskStructure::rpm(), 8, 9}, {TaskStructure::vap(), 4, 6}, {TaskStructure::o3(5), 5, 4}};
  std::vector<std::string> problems;
  for (const auto& e : expected) {
    const auto idx = arrangement_indices(e.s);
    if (idx.size() != e.groups) problems.push_back(fmt::format("{} has {} groups", task_name(e.s.kind), idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::vector<std::size_t> want;
      if (e.s.kind == TaskKind::o3) {
        for (std::size_t j = 0; j < e.s.answer_count; ++j)
          if (j != k) want.push_back(j);
      } else {
        for (std::size_t j = 0; j < e.s.context_count; ++j) want.push_back(j);
        want.push_back(e.s.context_count + k);
      }
      if (want.size() != e.size || idx[k] != want) {
        problems.push_back(fmt::format("{} group {}", task_name(e.s.kind), k));
      }
    }
    // The tensor form selects exactly these panels.
    const std::size_t P = e.s.panel_count();
    Tensor<double> tagged(Shape{P, 1});
    for (std::size_t p = 0; p < P; ++p) tagged[p] = static_cast<double>(p);
    const Tensor<double> g = arrange_groups(Var<double>::constant(tagged), e.s).value();
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t i = 0; i < idx[k].size(); ++i)
        if (g[k * idx[k].size() + i] != static_cast<double>(idx[k][i])) {
          problems.push_back(fmt::format("{} tensor group {}", task_name(e.s.kind), k));
        }
  }
  const std::vector<TaskStructure> all{TaskStructure::rpm(), TaskStructure::vap(), TaskStructure::o3(5),
                                       TaskStructure::o3(6), TaskStructure::o3(7)};
  const auto [R, C] = structure_registry(all);
  if (R != 6 || C != 60) problems.push_back(fmt::format("registry gives R={} C={}", R, C));
  std::string detail = "rpm 8x9, vap 4x6, o3 5x4 exhaustively; registry over rpm, vap, o3 (5, 6, 7) gives R=6 C=60";
  for (const auto& p : problems) detail += "; mismatch: " + p;
  return {problems.empty(), detail};
}

Outcome generator_soundness(const Options& options) {
  const auto start = Clock::now();
  std::vector<std::string> parts;
  bool ok = true;
  for (TaskKind kind : {TaskKind::rpm, TaskKind::vap, TaskKind::o3}) {
    GeneratorConfig config;
    config.task = kind;
    config.count = kSoundnessCount;
    config.seed = 31;
    const auto structure = config.structure();
    const auto instances = generate(config);
    const PanelRecognizer recognizer(config.height, config.width);
    std::size_t solved = 0;
    std::vector<double> counts(structure.answer_count, 0.0);
    for (const auto& inst : instances) {
      const auto answer = solve_instance(inst, structure, recognizer);
      solved += answer.has_value() && *answer == inst.label;
      counts[inst.label] += 1;
    }
    const double expected = static_cast<double>(instances.size()) / static_cast<double>(counts.size());
    double chi2 = 0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    const double dof = static_cast<double>(counts.size() - 1);
    const double p = boost::math::gamma_q(dof / 2, chi2 / 2);

    const fs::path a = options.work_dir / fmt::format("soundness_{}_a.avrb", task_name(kind));
    const fs::path b = options.work_dir / fmt::format("soundness_{}_b.avrb", task_name(kind));
    write_dataset(instances, structure, a);
    write_dataset(generate(config), structure, b);
    auto bytes = [](const fs::path& path) {
      std::ifstream in(path, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    const bool identical = bytes(a) == bytes(b);
    fs::remove(a);
    fs::remove(b);
    ok = ok && solved == instances.size() && p > kUniformityMinP && identical;
    parts.push_back(fmt::format("{} solved {}/{}, chi2 {:.2f} p {:.3f}, files {}", task_name(kind), solved,
                                instances.size(), chi2, p, identical ? "identical" : "DIFFER"));
  }
  return {ok, fmt::format("{} (p limit {}); {:.0f} s", fmt::join(parts, "; "), kUniformityMinP,
                          seconds_since(start))};
}

// ---------------------------------------------------------------------------
// Training criteria

TrainConfig acceptance_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.time_budget_seconds = 0;
  return c;
}

// Instances generated so that the train split holds exactly `train` of them.
TaskData learnability_data(GeneratorConfig gen, std::size_t train) {
  gen.count = train * 5 / 3 + 1;
  auto data = split_dataset(gen.structure(), generate(gen), 0.2, 0.2);
  if (data.train.size() != train) throw std::logic_error("learnability split size");
  return data;
}

struct StlRun {
  double accuracy = 0;
  double seconds = 0;
  std::size_t epochs = 0;
};

StlRun stl_run(const GeneratorConfig& gen, std::size_t max_epochs) {
  const auto start = Clock::now();
  const TaskData data = learnability_data(gen, kLearnabilityTrain);
  TrainConfig config = acceptance_config(gen.seed);
  config.max_epochs = max_epochs;
  // Leave room for generation and the final test pass inside the wall-clock limit.
  config.time_budget_seconds = kLearnabilitySeconds - seconds_since(start) - 120;
  ScarModel<float> model(ScarConfig::tiny(), gen.seed);
  RegimeSpec spec;
  spec.target = data;
  const auto result = run_regime(model, spec, config);
  return {result.test.accuracy, seconds_since(start), result.finetune.epochs_run};
}

Outcome stl_learnability() {
  GeneratorConfig single;
  single.task = TaskKind::rpm;
  single.seed = 501;
  single.allowed_rules = {parse_rule_pair("shape:constant")};
  single.min_rules = single.max_rules = 1;
  GeneratorConfig mixture;
  mixture.task = TaskKind::rpm;
  mixture.seed = 502;
  GeneratorConfig odd;
  odd.task = TaskKind::o3;
  odd.seed = 503;

  const auto a = stl_run(single, 12);
  const auto b = stl_run(mixture, 20);
  const auto c = stl_run(odd, 40);
  const bool ok = a.accuracy >= kSingleRuleAccuracy && b.accuracy >= kMixtureAccuracy &&
                  c.accuracy >= kOddOneOutAccuracy && a.seconds <= kLearnabilitySeconds &&
                  b.seconds <= kLearnabilitySeconds && c.seconds <= kLearnabilitySeconds;
  auto line = [](const char* what, const StlRun& r, double limit) {
    return fmt::format("{} {:.3f} (min {:.2f}) in {} epochs, {:.0f} s", what, r.accuracy, limit, r.epochs, r.seconds);
  };
  return {ok, fmt::format("test accuracy with {} train instances: {}; {}; {}; each run limit {:.0f} s",
                          kLearnabilityTrain, line("single-rule rpm", a, kSingleRuleAccuracy),
                          line("rule-mixture rpm", b, kMixtureAccuracy), line("o3", c, kOddOneOutAccuracy),
                          kLearnabilitySeconds)};
}

Outcome transfer_direction() {
  const auto start = Clock::now();
  std::vector<double> gains;
  std::vector<std::string> parts;
  for (std::size_t s = 0; s < kTransferSeeds; ++s) {
    const std::uint64_t seed = 700 + s;
    GeneratorConfig rpm, vap, odd;
    rpm.task = TaskKind::rpm;
    vap.task = TaskKind::vap;
    odd.task = TaskKind::o3;
    rpm.seed = vap.seed = odd.seed = seed;
    rpm.count = vap.count = kTransferPretrain * 5 / 4;
    odd.count = kTransferTarget + 200 + 1000;
    const std::vector<TaskData> source{split_dataset(rpm.structure(), generate(rpm), 0.2, 0.0),
                                       split_dataset(vap.structure(), generate(vap), 0.2, 0.0)};
    // Train split of exactly kTransferTarget instances; validation and test come after it in the stream.
    const auto target_all = generate(odd);
    TaskData target{odd.structure(), {}, {}, {}};
    target.train.assign(target_all.begin(), target_all.begin() + kTransferTarget);
    target.val.assign(target_all.begin() + kTransferTarget, target_all.begin() + kTransferTarget + 200);
    target.test.assign(target_all.begin() + kTransferTarget + 200, target_all.end());

    TrainConfig pretrain_config = acceptance_config(seed);
    pretrain_config.max_epochs = kTransferPretrainEpochs;
    ScarModel<float> pretrained(ScarConfig::tiny(), seed);
    train(pretrained, source, pretrain_config, kTransferPretrainBatch, "pretrain");

    // Both arms fine-tune under the same protocol; only the starting values differ.
    TrainConfig finetune_config = acceptance_config(seed);
    finetune_config.max_epochs = kTransferFinetuneEpochs;
    const auto tl = finetune_only(pretrained, target, finetune_config);
    ScarModel<float> fresh(ScarConfig::tiny(), seed);
    const auto stl = finetune_only(fresh, target, finetune_config);
    gains.push_back(tl.test.accuracy - stl.test.accuracy);
    parts.push_back(fmt::format("seed {}: transfer {:.3f} vs scratch {:.3f}", seed, tl.test.accuracy,
                                stl.test.accuracy));
  }
  double mean = 0;
  for (double g : gains) mean += g / static_cast<double>(gains.size());
  return {mean > 0, fmt::format("rpm+vap ({} train each, {} epochs) -> {}-instance o3 split: {}; mean gain {:+.2f} "
                                "p.p. (must be > 0); {:.0f} s",
                                kTransferPretrain, kTransferPretrainEpochs, kTransferTarget, fmt::join(parts, "; "),
                                100 * mean, seconds_since(start))};
}

Outcome mtl_batching() {
  GeneratorConfig rpm, vap;
  rpm.task = TaskKind::rpm;
  vap.task = TaskKind::vap;
  rpm.height = rpm.width = vap.height = vap.width = 16;
  rpm.seed = vap.seed = 900;
  rpm.count = vap.count = 60;
  const std::vector<TaskData> tasks{split_dataset(rpm.structure(), generate(rpm), 0.1, 0.0),
                                    split_dataset(vap.structure(), generate(vap), 0.1, 0.0)};
  TrainConfig config = acceptance_config(900);
  const std::size_t batch = 2;
  const std::size_t per_epoch = (tasks[0].train.size() + batch - 1) / batch + (tasks[1].train.size() + batch - 1) / batch;
  config.max_epochs = (kMtlBatches + per_epoch - 1) / per_epoch;
  config.early_stop_patience = config.max_epochs + 1;
  ScarConfig scar = ScarConfig::tiny();
  scar.panel_height = scar.panel_width = 16;
  ScarModel<float> model(scar, 900);

  std::vector<std::size_t> counts(2, 0);
  std::size_t seen = 0, mixed = 0;
  train(model, tasks, config, batch, "pretrain", nullptr,
        [&](std::size_t, std::size_t, std::size_t task, std::span<const ProblemInstance* const> instances) {
          if (seen == kMtlBatches) return;
          ++seen;
          ++counts[task];
          for (const auto* inst : instances) mixed += inst->panel_count() != tasks[task].structure.panel_count();
        });
  const double f0 = static_cast<double>(counts[0]) / static_cast<double>(seen);
  const double f1 = static_cast<double>(counts[1]) / static_cast<double>(seen);
  const bool ok = seen == kMtlBatches && mixed == 0 && std::abs(f0 - 0.5) <= kMtlFrequencyTolerance &&
                  std::abs(f1 - 0.5) <= kMtlFrequencyTolerance;
  return {ok, fmt::format("{} batches, {} foreign instances; rpm {:.3f} vap {:.3f} (0.5 +/- {})", seen, mixed, f0, f1,
                          kMtlFrequencyTolerance)};
}

Outcome determinism(const Options& options) {
  const fs::path dir = options.work_dir / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto cli = [](std::vector<std::string> args) {
    args.insert(args.begin(), "sal_lab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) throw std::runtime_error(fmt::format("sal_lab exited {}: {}", code, err.str()));
  };
  const std::string data = (dir / "vap.avrb").string(), cfg = (dir / "run.cfg").string();
  cli({"generate", "--task", "vap", "--count", "200", "--seed", "5", "--out", data});
  std::ofstream(cfg) << "max_epochs = 3\nseed = 5\n";
  for (const char* run : {"a", "b"}) {
    cli({"train", "--regime", "stl", "--data", data, "--preset", "scar-tiny", "--out", (dir / run).string(),
         "--deterministic", "--config", cfg});
  }
  auto bytes = [](const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const auto csv_a = bytes(dir / "a" / "metrics.csv"), csv_b = bytes(dir / "b" / "metrics.csv");
  const auto ck_a = bytes(dir / "a" / "model.salc"), ck_b = bytes(dir / "b" / "model.salc");
  const bool ok = !csv_a.empty() && !ck_a.empty() && csv_a == csv_b && ck_a == ck_b;
  return {ok, fmt::format("two train --deterministic runs: metrics.csv {} ({} bytes), model.salc {} ({} bytes)",
                          csv_a == csv_b ? "identical" : "DIFFER", csv_a.size(), ck_a == ck_b ? "identical" : "DIFFER",
                          ck_a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  Options options;
  std::string work_dir;
  CLI::App app{"Acceptance criteria"};
  app.add_option("--work-dir", work_dir, "Scratch directory");
  app.add_option("--only", options.only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  options.work_dir = work_dir.empty() ? fs::temp_directory_path() / "sal_lab_acceptance" : fs::path(work_dir);
  fs::create_directories(options.work_dir);

  const std::vector<Criterion> criteria{
      {"sal-oracle", sal_oracle},
      {"static-degeneration", static_degeneration},
      {"gradient-suite", gradient_suite},
      {"arrangement-contract", arrangement_contract},
      {"generator-soundness", [&] { return generator_soundness(options); }},
      {"stl-learnability", stl_learnability},
      {"transfer-direction", transfer_direction},
      {"mtl-batching", mtl_batching},
      {"determinism", [&] { return determinism(options); }},
  };
  for (const auto& name : options.only) {
    if (std::ranges::none_of(criteria, [&](const Criterion& c) { return c.name == name; })) {
      std::cerr << "unknown criterion '" << name << "'\n";
      return kExitUsage;
    }
  }
  // ctest hides the output of passing tests, so the lines are also kept on disk.
  std::ofstream report(options.work_dir / "report.txt");
  bool all = true;
  for (const auto& c : criteria) {
    if (!options.only.empty() && std::ranges::find(options.only, c.name) == options.only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, fmt::format("error: {}", e.what())};
    }
    all = all && o.pass;
    const auto line = fmt::format("{} {}: {}\n", o.pass ? "PASS" : "FAIL", c.name, o.detail);
    fmt::print("{}", line);
    std::fflush(stdout);
    report << line << std::flush;
  }
  return all ? kExitSuccess : kExitCheckFailed;
}
