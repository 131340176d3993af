#include "sal_lab/train/augment.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "sal_lab/data/image.hpp"

namespace sal_lab {

std::string AugmentPipeline::describe() const {
  std::vector<std::string> parts;
  if (vflip) parts.emplace_back("vflip");
  if (hflip) parts.emplace_back("hflip");
  if (rot90) parts.emplace_back("rot90");
  if (rotation) parts.push_back(fmt::format("rot{}", 90 * rotation_quarters));
  if (transpose) parts.emplace_back("transpose");
  return parts.empty() ? "identity" : fmt::format("{}", fmt::join(parts, "+"));
}

void AugmentConfig::validate() const {
  for (double p : {apply_probability, transform_probability}) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument(fmt::format("augmentation probability {} outside [0, 1]", p));
  }
}

AugmentPipeline sample_pipeline(CounterRng& rng, const AugmentConfig& config) {
  AugmentPipeline p;
  if (!rng.bernoulli(config.apply_probability)) return p;
  const double q = config.transform_probability;
  p.vflip = rng.bernoulli(q);
  p.hflip = rng.bernoulli(q);
  p.rot90 = rng.bernoulli(q);
  p.rotation = rng.bernoulli(q);
  p.rotation_quarters = static_cast<std::uint8_t>(2 + rng.uniform_int(2));
  p.transpose = rng.bernoulli(q);
  return p;
}

ProblemInstance apply_pipeline(const ProblemInstance& instance, const AugmentPipeline& pipeline) {
  if (pipeline.empty()) return instance;
  const std::size_t h = instance.height, w = instance.width;
  if ((pipeline.rot90 || pipeline.rotation || pipeline.transpose) && h != w) {
    throw std::invalid_argument(fmt::format("augmentation '{}' needs square panels, got {}x{}", pipeline.describe(), h, w));
  }
  ProblemInstance out = instance;
  for (std::size_t p = 0; p < instance.panel_count(); ++p) {
    std::vector<std::uint8_t> px(instance.panel(p).begin(), instance.panel(p).end());
    if (pipeline.vflip) px = image::vflip(px, h, w);
    if (pipeline.hflip) px = image::hflip(px, h, w);
    if (pipeline.rot90) px = image::rot90(px, h, w);
    if (pipeline.rotation) {
      for (std::uint8_t q = 0; q < pipeline.rotation_quarters; ++q) px = image::rot90(px, h, w);
    }
    if (pipeline.transpose) px = image::transpose(px, h, w);
    std::copy(px.begin(), px.end(), out.panel(p).begin());
  }
  return out;
}

ProblemInstance augment(const ProblemInstance& instance, CounterRng& rng, const AugmentConfig& config) {
  return apply_pipeline(instance, sample_pipeline(rng, config));
}

}  // namespace sal_lab
