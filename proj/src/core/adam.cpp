#include "sal_lab/core/adam.hpp"

#include <fmt/format.h>

#include <cmath>
#include <stdexcept>

namespace sal_lab {

namespace {

template <typename T>
void update(std::span<const Var<T>> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument(
        fmt::format("adam_step: {} parameters but {} gradients", params.size(), grads.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i] && params[i].shape() != grads[i]->shape()) {
      throw std::invalid_argument(fmt::format("adam_step: parameter '{}' has shape {} but gradient {}",
                                              params[i].name(), to_string(params[i].shape()),
                                              to_string(grads[i]->shape())));
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Tensor<T>::zeros(p.shape()));
      state.second_moment.push_back(Tensor<T>::zeros(p.shape()));
    }
    state.parameter_steps.assign(params.size(), 0);
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument(fmt::format("adam_step: state tracks {} parameters, got {}",
                                            state.first_moment.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].shape() != params[i].shape()) {
      throw std::invalid_argument(fmt::format("adam_step: moment shape {} does not match parameter {}",
                                              to_string(state.first_moment[i].shape()),
                                              to_string(params[i].shape())));
    }
  }

  ++state.step;
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  const T lr = static_cast<T>(state.learning_rate);
  const T eps = static_cast<T>(state.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    const double t = static_cast<double>(++state.parameter_steps[i]);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(state.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(state.beta2, t)));
    Var<T> p = params[i];
    std::span<T> w = p.mutable_values();
    T* m = state.first_moment[i].data();
    T* v = state.second_moment[i].data();
    const T* g = grads[i]->data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      w[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
    }
  }
}

}  // namespace

template <typename T>
void adam_step(std::span<const Var<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state) {
  std::vector<const Tensor<T>*> g;
  g.reserve(grads.size());
  for (const auto& t : grads) g.push_back(&t);
  update(params, std::span<const Tensor<T>* const>(g), state);
}

template <typename T>
void adam_step(std::span<const Var<T>> params, const Gradients<T>& grads, AdamState<T>& state) {
  std::vector<const Tensor<T>*> g;
  g.reserve(params.size());
  for (const auto& p : params) g.push_back(grads.find(p));
  update(params, std::span<const Tensor<T>* const>(g), state);
}

template void adam_step(std::span<const Var<float>>, std::span<const Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<const Var<double>>, std::span<const Tensor<double>>, AdamState<double>&);
template void adam_step(std::span<const Var<float>>, const Gradients<float>&, AdamState<float>&);
template void adam_step(std::span<const Var<double>>, const Gradients<double>&, AdamState<double>&);

}  // namespace sal_lab
