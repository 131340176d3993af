#include "sal_lab/train/model_gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <set>
#include <stdexcept>

#include "sal_lab/core/gradcheck.hpp"
#include "sal_lab/core/ops.hpp"
#include "sal_lab/data/taskgen.hpp"
#include "sal_lab/model/scar.hpp"
#include "sal_lab/train/loss.hpp"

namespace sal_lab {

namespace {

constexpr std::uint64_t kSampleStream = 0x47524144ULL;

struct Objective {
  ScarModel<double>& model;
  Tensor<double> panels;
  std::vector<std::size_t> labels;
  Tensor<double> targets;
  TaskStructure structure;
  double beta;

  LossTerms<double> terms() const {
    const auto out = model.forward(Var<double>::constant(panels), structure, /*training=*/true);
    return compute_loss(out, labels, &targets, beta, RuleSelection::teacher);
  }
  // Loss value and the relu sign digest of the evaluation.
  std::pair<double, std::uint64_t> probe() const {
    NoGradGuard guard;
    ops::ReluPatternProbe relu;
    const double v = terms().total.item();
    return {v, relu.digest()};
  }
  // Loss with every relu pinned to the recorded pattern.
  double pinned(const ops::ReluPattern& pattern) const {
    NoGradGuard guard;
    ops::ReluPatternReplay replay(pattern);
    return terms().total.item();
  }
};

struct Difference {
  double value = 0;
  bool pinned = false;
};

// Central difference after moving every listed coordinate of p along the
// stencil offsets. When any probe lands in another relu region, all probes are
// redone with the base pattern pinned: that function is smooth around the base
// point and shares its gradient there, while a kink inside the stencil would
// bias the plain quotient.
Difference central_difference(const Objective& f, Var<double> p, std::span<const std::size_t> indices, double h,
                              int stencil, std::uint64_t base_digest, const ops::ReluPattern& base_pattern) {
  std::span<double> w = p.mutable_values();
  std::vector<double> saved;
  for (std::size_t i : indices) saved.push_back(w[i]);
  auto shift = [&](double by) {
    for (std::size_t k = 0; k < indices.size(); ++k) w[indices[k]] = saved[k] + by;
  };
  const std::vector<double> offsets = stencil == 2 ? std::vector<double>{1, -1} : std::vector<double>{1, -1, 2, -2};
  std::vector<double> values;
  bool same_region = true;
  for (double o : offsets) {
    shift(o * h);
    const auto [v, digest] = f.probe();
    values.push_back(v);
    same_region = same_region && digest == base_digest;
  }
  Difference d;
  if (!same_region) {
    d.pinned = true;
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      shift(offsets[k] * h);
      values[k] = f.pinned(base_pattern);
    }
  }
  shift(0);
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(fmt::format("non-finite loss probing '{}'", p.name()));
  }
  d.value = stencil == 2 ? (values[0] - values[1]) / (2 * h)
                         : (8 * (values[0] - values[1]) - (values[2] - values[3])) / (12 * h);
  return d;
}

}  // namespace

ModelGradcheckReport run_model_gradcheck(const ModelGradcheckConfig& config) {
  if (config.samples < config.w_star_samples) {
    throw std::invalid_argument(
        fmt::format("gradcheck: {} samples cannot include {} W* entries", config.samples, config.w_star_samples));
  }
  if (config.stencil != 2 && config.stencil != 4) {
    throw std::invalid_argument(fmt::format("gradcheck: stencil must be 2 or 4 points, got {}", config.stencil));
  }
  if (!(config.step > 0) || !(config.tolerance > 0) || config.instances == 0) {
    throw std::invalid_argument("gradcheck: step, tolerance and instance count must be positive");
  }
  const auto started = std::chrono::steady_clock::now();
  const ScarConfig scar = ScarConfig::preset_named(config.preset);
  ScarModel<double> model(scar, config.seed);
  const TaskStructure structure = TaskStructure::rpm();
  const auto vocabulary = rule_vocabulary(TaskKind::rpm);
  model.ensure_rule_head(TaskKind::rpm, vocabulary.size());

  GeneratorConfig gen;
  gen.task = TaskKind::rpm;
  gen.height = scar.panel_height;
  gen.width = scar.panel_width;
  gen.seed = config.seed;
  gen.count = config.instances;
  const auto instances = generate(gen);
  std::vector<const ProblemInstance*> batch;
  std::vector<std::size_t> labels;
  Tensor<double> targets(Shape{instances.size(), vocabulary.size()});
  for (std::size_t b = 0; b < instances.size(); ++b) {
    batch.push_back(&instances[b]);
    labels.push_back(instances[b].label);
    for (std::size_t j = 0; j < vocabulary.size(); ++j) {
      targets.data()[b * vocabulary.size() + j] = instances[b].rules[j] ? 1.0 : 0.0;
    }
  }
  const Objective f{model, batch_panels<double>(batch), labels, targets, structure, config.beta};

  ops::ReluPattern base_pattern;
  const Gradients<double> grads = [&] {
    ops::ReluPatternRecorder recorder(base_pattern);
    return backward(f.terms().total);
  }();
  const auto [base_loss, base_digest] = f.probe();

  ModelGradcheckReport report;
  report.loss = base_loss;
  const double ulp = std::nextafter(std::abs(base_loss), std::numeric_limits<double>::infinity()) - std::abs(base_loss);
  // Error amplification of the quotient: 2/(2h) for two points, 18/(12h) for four.
  report.resolution = config.roundoff_ulps * ulp / (2 * config.step) * (config.stencil == 2 ? 1.0 : 1.5);
  CounterRng rng(config.seed, kSampleStream);
  const auto& params = model.parameters();
  const Var<double>& w_star = model.sal().w_star;
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name() != w_star.name()) others.push_back(i);
  }

  auto check_one = [&](const Var<double>& p) {
    const std::size_t index = rng.uniform_int(p.size());
    const std::size_t at[] = {index};
    const Difference numeric = central_difference(f, p, at, config.step, config.stencil, base_digest, base_pattern);
    if (numeric.pinned) ++report.pinned;
    CoordinateCheck c{p.name(), index, grads.of(p).data()[index], numeric.value, 0, numeric.pinned};
    c.relative_error = relative_error(c.analytic, c.numeric, config.floor);
    c.absolute_error = std::abs(c.analytic - c.numeric);
    c.resolvable = std::max(std::abs(c.analytic), std::abs(c.numeric)) * config.tolerance > report.resolution;
    if (c.resolvable) {
      ++report.resolvable;
      report.max_relative_error = std::max(report.max_relative_error, c.relative_error);
    } else {
      report.max_unresolvable_absolute_error = std::max(report.max_unresolvable_absolute_error, c.absolute_error);
    }
    report.checks.push_back(c);
  };

  for (std::size_t k = 0; k < config.w_star_samples; ++k) check_one(w_star);
  report.w_star_checked = config.w_star_samples;
  // Round-robin over the remaining tensors so each is covered before any repeats.
  for (std::size_t k = 0; k < config.samples - config.w_star_samples; ++k) check_one(params[others[k % others.size()]]);
  std::set<std::string> covered;
  for (const auto& c : report.checks) covered.insert(c.parameter);
  report.tensors_covered = covered.size();

  // Gradient sharing: all d_r x d_c entries of a block feed one adapted weight.
  const std::size_t R = scar.R, C = scar.C, d_h = scar.d_h, d_v = scar.d_v;
  report.block_rows = R / structure.rows;
  report.block_cols = C / structure.cols;
  const double share = static_cast<double>(report.block_rows * report.block_cols);
  const Tensor<double> g_star = grads.of(w_star);
  for (std::size_t k = 0; k < config.sharing_blocks; ++k) {
    const std::size_t j = rng.uniform_int(structure.rows), l = rng.uniform_int(structure.cols);
    const std::size_t m = rng.uniform_int(d_h), n = rng.uniform_int(d_v);
    std::vector<std::size_t> block;
    for (std::size_t a = 0; a < report.block_rows; ++a) {
      for (std::size_t b = 0; b < report.block_cols; ++b) {
        const std::size_t row = j * report.block_rows + a, col = l * report.block_cols + b;
        block.push_back(((row * C + col) * d_h + m) * d_v + n);
      }
    }
    const Difference numeric = central_difference(f, w_star, block, config.step, config.stencil, base_digest, base_pattern);
    if (numeric.pinned) ++report.pinned;
    double lo = g_star.data()[block[0]], hi = lo;
    for (std::size_t i : block) {
      lo = std::min(lo, g_star.data()[i]);
      hi = std::max(hi, g_star.data()[i]);
    }
    const double scale = std::max({std::abs(lo), std::abs(hi), config.floor});
    report.sharing_max_spread = std::max(report.sharing_max_spread, (hi - lo) / scale);
    const double predicted = share * g_star.data()[block[0]];
    report.sharing_max_relative_error =
        std::max(report.sharing_max_relative_error, relative_error(predicted, numeric.value, config.floor));
    ++report.sharing_checked;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace sal_lab
