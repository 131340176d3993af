#include "sal_lab/core/tensor.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <functional>
#include <numeric>
#include <stdexcept>

namespace sal_lab {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

std::size_t normalize_axis(std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  const std::int64_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw std::invalid_argument(
        fmt::format("axis {} out of range for rank {}", axis, rank));
  }
  return static_cast<std::size_t>(a);
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) {
      throw std::invalid_argument(
          fmt::format("tensor extents must be positive, got {}", to_string(shape)));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(element_count(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  check_extents(shape_);
  if (data_.size() != element_count(shape_)) {
    throw std::invalid_argument(
        fmt::format("shape {} needs {} elements, got {}", to_string(shape_),
                    element_count(shape_), data_.size()));
  }
}

template <typename T>
std::size_t Tensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::out_of_range(
        fmt::format("axis {} out of range for shape {}", axis, to_string(shape_)));
  }
  return shape_[axis];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw std::invalid_argument(fmt::format(
        "index of rank {} for tensor of shape {}", index.size(), to_string(shape_)));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) {
      throw std::out_of_range(fmt::format("index {} out of range on axis {} of {}", i,
                                          axis, to_string(shape_)));
    }
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return data_[flat];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument(
        fmt::format("item() on tensor of shape {}", to_string(shape_)));
  }
  return data_[0];
}

template <typename T>
Tensor<T>::Tensor(Adopt, Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != element_count(shape_)) {
    throw std::invalid_argument(fmt::format("cannot view {} elements as shape {}", data_.size(), to_string(shape_)));
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  return Tensor(Adopt{}, std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(Adopt{}, std::move(shape), std::move(data_));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace sal_lab
