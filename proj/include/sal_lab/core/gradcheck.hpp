#pragma once

#include <cstddef>
#include <functional>

#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

template <typename T>
using ScalarFunction = std::function<T(const Tensor<T>&)>;

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h at one coordinate.
/// Throws std::domain_error naming the coordinate if f is not finite there.
template <typename T>
T finite_difference_at(const ScalarFunction<T>& f, const Tensor<T>& x, std::size_t index, T h);

/// Central differences at every coordinate of x.
template <typename T>
Tensor<T> finite_difference_gradient(const ScalarFunction<T>& f, const Tensor<T>& x, T h);

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero pairs from
/// reporting huge relative errors out of rounding noise.
template <typename T>
T relative_error(T a, T b, T floor);

}  // namespace sal_lab
