#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

template <typename T>
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  /// One entry per parameter in the order passed to adam_step; empty until the first step.
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  /// Updates each parameter has received; drives its bias correction.
  std::vector<std::uint64_t> parameter_steps;
};

/// Bias-corrected Adam update of leaf parameters in place.
/// grads[i] must have the shape of params[i]; the parameter list must not change between steps.
template <typename T>
void adam_step(std::span<const Var<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state);

/// Gradients from a backward() result. Parameters the root did not reach are
/// skipped: their values, moments and step counts stay as they are.
template <typename T>
void adam_step(std::span<const Var<T>> params, const Gradients<T>& grads, AdamState<T>& state);

}  // namespace sal_lab
