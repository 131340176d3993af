#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace sal_lab {

struct ModelGradcheckConfig {
  std::string preset = "scar-tiny";
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
  double step = 1e-4;
  /// 2: (f(x+h) - f(x-h)) / 2h. 4: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h,
  /// whose truncation error is O(h^4) instead of O(h^2).
  int stencil = 4;
  /// Denominator floor of the relative error.
  double floor = 1e-6;
  /// Round-off allowance of a loss evaluation, in units in the last place.
  double roundoff_ulps = 256;
  std::size_t samples = 200;
  std::size_t w_star_samples = 50;
  std::size_t instances = 2;
  double beta = 10.0;
  /// Whole W* blocks shifted together to measure the shared gradient.
  std::size_t sharing_blocks = 4;
};

struct CoordinateCheck {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
  /// The plain stencil crossed a relu kink; the relu pattern was pinned.
  bool pinned = false;
  double absolute_error = 0;
  /// max(|analytic|, |numeric|) is large enough for a relative error of
  /// `tolerance` to exceed the quotient's round-off resolution.
  bool resolvable = false;
};

struct ModelGradcheckReport {
  std::vector<CoordinateCheck> checks;
  std::size_t w_star_checked = 0;
  std::size_t tensors_covered = 0;
  /// Differences taken with the base relu pattern pinned.
  std::size_t pinned = 0;
  /// roundoff_ulps * ulp(loss) / (2 * step) (times 3/2 for the four-point stencil):
  /// differences below this cannot be resolved.
  double resolution = 0;
  double loss = 0;
  /// Resolvable coordinates must meet the relative tolerance.
  std::size_t resolvable = 0;
  double max_relative_error = 0;
  /// The rest must agree to within the resolution.
  double max_unresolvable_absolute_error = 0;
  /// Block checks: finite difference of a shifted d_r x d_c block against
  /// d_r * d_c times the per-entry analytic gradient.
  std::size_t sharing_checked = 0;
  double sharing_max_relative_error = 0;
  /// Largest spread of analytic gradients within one block, relative to their scale.
  double sharing_max_spread = 0;
  std::size_t block_rows = 0;
  std::size_t block_cols = 0;
  double seconds = 0;

  bool passed(double tolerance) const {
    return max_relative_error < tolerance && max_unresolvable_absolute_error <= resolution &&
           sharing_max_relative_error < tolerance && sharing_max_spread < tolerance;
  }
};

/// End-to-end check of a double-precision model on generated rpm instances:
/// joint loss with rule supervision, training-mode batch norm, central differences.
ModelGradcheckReport run_model_gradcheck(const ModelGradcheckConfig& config);

}  // namespace sal_lab
