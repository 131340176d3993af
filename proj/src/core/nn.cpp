#include "sal_lab/core/nn.hpp"

#include <fmt/format.h>

#include <cmath>
#include <stdexcept>

namespace sal_lab {

template <typename T>
Var<T> ParameterStore<T>::add(const std::string& name, Tensor<T> init) {
  if (contains(name)) throw std::invalid_argument(fmt::format("parameter '{}' registered twice", name));
  index_.emplace(name, params_.size());
  names_.push_back(name);
  params_.push_back(Var<T>::parameter(std::move(init), name));
  return params_.back();
}

template <typename T>
BatchNormState<T>& ParameterStore<T>::add_batchnorm_state(const std::string& name, std::size_t channels) {
  for (const auto& [n, _] : batchnorm_) {
    if (n == name) throw std::invalid_argument(fmt::format("batch-norm state '{}' registered twice", name));
  }
  batchnorm_.emplace_back(name, std::make_unique<BatchNormState<T>>(channels));
  return *batchnorm_.back().second;
}

template <typename T>
const Var<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range(fmt::format("no parameter named '{}'", name));
  return params_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
std::map<std::string, BatchNormState<T>*> ParameterStore<T>::batchnorm_states() const {
  std::map<std::string, BatchNormState<T>*> out;
  for (const auto& [n, s] : batchnorm_) out.emplace(n, s.get());
  return out;
}

template <typename T>
Tensor<T> glorot_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                  CounterRng& rng)
    : weight(store.add(name + ".weight", glorot_uniform<T>({in, out}, in, out, rng))),
      bias(store.add(name + ".bias", Tensor<T>::zeros({out}))) {}

template <typename T>
Var<T> Linear<T>::operator()(const Var<T>& x) const {
  if (x.rank() == 0 || x.shape().back() != in_features()) {
    throw std::invalid_argument(fmt::format("linear: input {} does not end in width {}",
                                            to_string(x.shape()), in_features()));
  }
  if (x.rank() == 1) {
    return ops::reshape(ops::add(ops::matmul(ops::reshape(x, {1, x.size()}), weight), bias), {out_features()});
  }
  return ops::add(ops::matmul(x, weight), bias);
}

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, const std::string& name, const ConvGeometry& g, CounterRng& rng)
    : weight(store.add(name + ".weight",
                       glorot_uniform<T>({g.out_channels, g.in_channels, g.kernel, g.kernel},
                                         g.in_channels * g.kernel * g.kernel,
                                         g.out_channels * g.kernel * g.kernel, rng))),
      bias(store.add(name + ".bias", Tensor<T>::zeros({g.out_channels}))),
      geometry(g) {}

template <typename T>
Conv1d<T>::Conv1d(ParameterStore<T>& store, const std::string& name, const ConvGeometry& g, CounterRng& rng)
    : weight(store.add(name + ".weight",
                       glorot_uniform<T>({g.out_channels, g.in_channels, g.kernel}, g.in_channels * g.kernel,
                                         g.out_channels * g.kernel, rng))),
      bias(store.add(name + ".bias", Tensor<T>::zeros({g.out_channels}))),
      geometry(g) {}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParameterStore<T>& store, const std::string& name, std::size_t channels)
    : gamma(store.add(name + ".gamma", Tensor<T>::ones({channels}))),
      beta(store.add(name + ".beta", Tensor<T>::zeros({channels}))),
      state(&store.add_batchnorm_state(name, channels)) {}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t width)
    : gamma(store.add(name + ".gamma", Tensor<T>::ones({width}))),
      beta(store.add(name + ".beta", Tensor<T>::zeros({width}))) {}

#define SAL_LAB_INSTANTIATE_NN(T)                                                              \
  template class ParameterStore<T>;                                                            \
  template Tensor<T> glorot_uniform(const Shape&, std::size_t, std::size_t, CounterRng&);      \
  template struct Linear<T>;                                                                   \
  template struct Conv2d<T>;                                                                   \
  template struct Conv1d<T>;                                                                   \
  template struct BatchNorm2d<T>;                                                              \
  template struct LayerNorm<T>;

SAL_LAB_INSTANTIATE_NN(float)
SAL_LAB_INSTANTIATE_NN(double)

}  // namespace sal_lab
