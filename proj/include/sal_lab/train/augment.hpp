#pragma once

#include <cstdint>
#include <string>

#include "sal_lab/avr/task.hpp"
#include "sal_lab/core/random.hpp"

namespace sal_lab {

/// Transforms applied in this fixed order: vertical flip, horizontal flip,
/// quarter turn, right-angle rotation by `rotation_quarters` (2 or 3), transposition.
struct AugmentPipeline {
  bool vflip = false;
  bool hflip = false;
  bool rot90 = false;
  bool rotation = false;
  std::uint8_t rotation_quarters = 2;
  bool transpose = false;

  bool empty() const { return !(vflip || hflip || rot90 || rotation || transpose); }
  std::string describe() const;
  bool operator==(const AugmentPipeline&) const = default;
};

struct AugmentConfig {
  double apply_probability = 0.5;
  double transform_probability = 0.25;
  void validate() const;
};

/// With probability apply_probability, includes each transform independently
/// with probability transform_probability; otherwise returns the empty pipeline.
AugmentPipeline sample_pipeline(CounterRng& rng, const AugmentConfig& config);

/// The same pipeline on every panel; label and rules are untouched.
/// Throws for non-square panels when a rotation or transposition is selected.
ProblemInstance apply_pipeline(const ProblemInstance& instance, const AugmentPipeline& pipeline);

ProblemInstance augment(const ProblemInstance& instance, CounterRng& rng, const AugmentConfig& config);

}  // namespace sal_lab
