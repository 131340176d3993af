#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/ops.hpp"
#include "sal_lab/core/random.hpp"
#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

/// Named trainable parameters and batch-norm buffers in registration order.
/// Handles returned by add() stay valid for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init);
  BatchNormState<T>& add_batchnorm_state(const std::string& name, std::size_t channels);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Var<T>& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Var<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Batch-norm running statistics keyed by layer name.
  std::map<std::string, BatchNormState<T>*> batchnorm_states() const;

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::pair<std::string, std::unique_ptr<BatchNormState<T>>>> batchnorm_;
};

/// Uniform Glorot bound sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, CounterRng& rng);

template <typename T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out]

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, CounterRng& rng);
  /// Applies to the last axis of x.
  Var<T> operator()(const Var<T>& x) const;
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

template <typename T>
struct Conv2d {
  Var<T> weight;  // [out, in, k, k]
  Var<T> bias;
  ConvGeometry geometry;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, const ConvGeometry& g, CounterRng& rng);
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, geometry); }
};

template <typename T>
struct Conv1d {
  Var<T> weight;  // [out, in, k]
  Var<T> bias;
  ConvGeometry geometry;

  Conv1d() = default;
  Conv1d(ParameterStore<T>& store, const std::string& name, const ConvGeometry& g, CounterRng& rng);
  Var<T> operator()(const Var<T>& x) const { return ops::conv1d(x, weight, bias, geometry); }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  BatchNormState<T>* state = nullptr;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<T>& store, const std::string& name, std::size_t channels);
  Var<T> operator()(const Var<T>& x, bool training) const {
    return ops::batchnorm2d(x, gamma, beta, *state, training);
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t width);
  Var<T> operator()(const Var<T>& x) const { return ops::layernorm(x, gamma, beta); }
};

}  // namespace sal_lab
