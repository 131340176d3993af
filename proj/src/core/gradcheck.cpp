#include "sal_lab/core/gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sal_lab {

template <typename T>
T finite_difference_at(const ScalarFunction<T>& f, const Tensor<T>& x, std::size_t index, T h) {
  if (!(h > T(0))) throw std::invalid_argument(fmt::format("finite difference step must be positive, got {}", h));
  if (index >= x.size()) {
    throw std::out_of_range(fmt::format("coordinate {} out of range for {} elements", index, x.size()));
  }
  Tensor<T> probe = x;
  probe[index] = x[index] + h;
  const T plus = f(probe);
  probe[index] = x[index] - h;
  const T minus = f(probe);
  if (!std::isfinite(plus) || !std::isfinite(minus)) {
    throw std::domain_error(fmt::format("non-finite function value at coordinate {}", index));
  }
  return (plus - minus) / (T(2) * h);
}

template <typename T>
Tensor<T> finite_difference_gradient(const ScalarFunction<T>& f, const Tensor<T>& x, T h) {
  Tensor<T> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] = finite_difference_at(f, x, i, h);
  return grad;
}

template <typename T>
T relative_error(T a, T b, T floor) {
  const T scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

template float finite_difference_at(const ScalarFunction<float>&, const Tensor<float>&, std::size_t, float);
template double finite_difference_at(const ScalarFunction<double>&, const Tensor<double>&, std::size_t, double);
template Tensor<float> finite_difference_gradient(const ScalarFunction<float>&, const Tensor<float>&, float);
template Tensor<double> finite_difference_gradient(const ScalarFunction<double>&, const Tensor<double>&, double);
template float relative_error(float, float, float);
template double relative_error(double, double, double);

}  // namespace sal_lab
