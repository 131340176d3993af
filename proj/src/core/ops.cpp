#include "sal_lab/core/ops.hpp"

#include <fmt/format.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace sal_lab {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

std::size_t ConvGeometry::output_extent(std::size_t input_extent) const {
  if (stride == 0 || kernel == 0) throw std::invalid_argument("conv: kernel and stride must be positive");
  const std::size_t padded = input_extent + 2 * padding;
  if (padded < kernel) {
    throw std::invalid_argument(fmt::format(
        "conv: kernel {} larger than padded input extent {}", kernel, padded));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(
      fmt::format("{}: incompatible shapes {} and {}", op, to_string(a), to_string(b)));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Visits every element of `shape` in row-major order as f(src_flat, dst_flat),
// with dst_flat = sum(index[axis] * dst_strides[axis]).
template <typename F>
void for_each_mapped(const Shape& shape, const std::vector<std::size_t>& dst_strides, F&& f) {
  const std::size_t rank = shape.size();
  const std::size_t n = element_count(shape);
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> index(rank, 0);
  const std::size_t inner = shape[rank - 1];
  const std::size_t inner_stride = dst_strides[rank - 1];
  std::size_t dst = 0;
  for (std::size_t src = 0; src < n; src += inner) {
    for (std::size_t i = 0; i < inner; ++i) f(src + i, dst + i * inner_stride);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++index[ax];
      dst += dst_strides[ax];
      if (index[ax] < shape[ax]) break;
      dst -= dst_strides[ax] * shape[ax];
      index[ax] = 0;
    }
  }
}

struct ReluProbeState {
  bool active = false;
  std::uint64_t hash = 1469598103934665603ULL;
  ops::ReluPattern* record = nullptr;
  const ops::ReluPattern* replay = nullptr;
  std::size_t replay_call = 0;
};
thread_local ReluProbeState relu_probe;

}  // namespace

namespace ops {

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_mismatch("matmul", as, bs);
  const std::size_t K = as.back();
  const std::size_t M = as[as.size() - 2];
  const std::size_t N = bs.back();
  if (bs[bs.size() - 2] != K) shape_mismatch("matmul", as, bs);

  Shape out_shape = as;
  out_shape.back() = N;
  Tensor<T> out(out_shape);

  if (bs.size() == 2) {
    const std::size_t rows = a.size() / K;
    ConstMatrixMap<T> A(a.value().data(), rows, K);
    ConstMatrixMap<T> B(b.value().data(), K, N);
    MatrixMap<T> C(out.data(), rows, N);
    C.noalias() = A * B;
    return make_result<T>(Primitive::matmul, std::move(out), {a, b},
                          [a, b, rows, K, N](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                            ConstMatrixMap<T> G(g.data(), rows, N);
                            if (gi[0]) {
                              ConstMatrixMap<T> B(b.value().data(), K, N);
                              MatrixMap<T>(gi[0]->data(), rows, K).noalias() += G * B.transpose();
                            }
                            if (gi[1]) {
                              ConstMatrixMap<T> A(a.value().data(), rows, K);
                              MatrixMap<T>(gi[1]->data(), K, N).noalias() += A.transpose() * G;
                            }
                          });
  }

  if (bs.size() != as.size() ||
      !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) {
    shape_mismatch("matmul", as, bs);
  }
  const std::size_t batch = a.size() / (M * K);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatrixMap<T> A(a.value().data() + i * M * K, M, K);
    ConstMatrixMap<T> B(b.value().data() + i * K * N, K, N);
    MatrixMap<T>(out.data() + i * M * N, M, N).noalias() = A * B;
  }
  return make_result<T>(
      Primitive::matmul, std::move(out), {a, b},
      [a, b, batch, M, K, N](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMatrixMap<T> G(g.data() + i * M * N, M, N);
          if (gi[0]) {
            ConstMatrixMap<T> B(b.value().data() + i * K * N, K, N);
            MatrixMap<T>(gi[0]->data() + i * M * K, M, K).noalias() += G * B.transpose();
          }
          if (gi[1]) {
            ConstMatrixMap<T> A(a.value().data() + i * M * K, M, K);
            MatrixMap<T>(gi[1]->data() + i * K * N, K, N).noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() == b.shape()) {
    Tensor<T> out = a.value();
    const T* bv = b.value().data();
    T* o = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) o[i] += bv[i];
    return make_result<T>(Primitive::add, std::move(out), {a, b},
                          [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                            for (auto* t : gi) {
                              if (!t) continue;
                              T* d = t->data();
                              for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                            }
                          });
  }
  const bool b_small = is_suffix(b.shape(), a.shape());
  if (!b_small && !is_suffix(a.shape(), b.shape())) shape_mismatch("add", a.shape(), b.shape());
  const Var<T>& big = b_small ? a : b;
  const Var<T>& small = b_small ? b : a;
  const std::size_t period = small.size();
  Tensor<T> out = big.value();
  const T* sv = small.value().data();
  T* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] += sv[i % period];
  const std::size_t big_slot = b_small ? 0 : 1;
  return make_result<T>(Primitive::add, std::move(out), {a, b},
                        [period, big_slot](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          if (Tensor<T>* gb = gi[big_slot]) {
                            T* d = gb->data();
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                          }
                          if (Tensor<T>* gs = gi[1 - big_slot]) {
                            T* d = gs->data();
                            for (std::size_t i = 0; i < g.size(); ++i) d[i % period] += g[i];
                          }
                        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  std::size_t big_slot = 0;
  if (a.shape() != b.shape()) {
    if (is_suffix(b.shape(), a.shape())) {
      big_slot = 0;
    } else if (is_suffix(a.shape(), b.shape())) {
      big_slot = 1;
    } else {
      shape_mismatch("mul", a.shape(), b.shape());
    }
  }
  const Var<T>& big = big_slot == 0 ? a : b;
  const Var<T>& small = big_slot == 0 ? b : a;
  const std::size_t period = small.size();
  Tensor<T> out = big.value();
  const T* sv = small.value().data();
  T* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] *= sv[i % period];
  return make_result<T>(
      Primitive::mul, std::move(out), {a, b},
      [big, small, period, big_slot](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T* bv = big.value().data();
        const T* sv = small.value().data();
        if (Tensor<T>* gb = gi[big_slot]) {
          T* d = gb->data();
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sv[i % period];
        }
        if (Tensor<T>* gs = gi[1 - big_slot]) {
          T* d = gs->data();
          for (std::size_t i = 0; i < g.size(); ++i) d[i % period] += g[i] * bv[i];
        }
      });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.values()) v *= factor;
  return make_result<T>(Primitive::scale, std::move(out), {x},
                        [factor](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
                        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  T* o = out.data();
  if (relu_probe.active) {
    std::uint64_t h = relu_probe.hash;
    for (std::size_t i = 0; i < out.size(); ++i) {
      h = (h ^ static_cast<std::uint64_t>(o[i] > T(0))) * 1099511628211ULL;
    }
    relu_probe.hash = h;
  }
  if (relu_probe.record) {
    auto& mask = relu_probe.record->masks.emplace_back(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) mask[i] = o[i] > T(0);
  }
  if (relu_probe.replay) {
    const auto& masks = relu_probe.replay->masks;
    const std::size_t call = relu_probe.replay_call++;
    if (call >= masks.size() || masks[call].size() != out.size()) {
      throw std::logic_error(fmt::format("relu pattern replay: call {} does not match the recorded evaluation", call));
    }
    const auto& mask = masks[call];
    for (std::size_t i = 0; i < out.size(); ++i) o[i] = mask[i] ? o[i] : T(0);
    return make_result<T>(Primitive::relu, std::move(out), {x},
                          [x, mask](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                            T* d = gi[0]->data();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (mask[i]) d[i] += g[i];
                            }
                          });
  }
  // `v < 0 ? 0 : v` lets NaN through unchanged.
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = o[i] < T(0) ? T(0) : o[i];
  return make_result<T>(Primitive::relu, std::move(out), {x},
                        [x](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          const T* xv = x.value().data();
                          T* d = gi[0]->data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (xv[i] > T(0)) d[i] += g[i];
                          }
                        });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = v * T(0.5) * std::erfc(-v * inv_sqrt2);
  return make_result<T>(Primitive::gelu, std::move(out), {x},
                        [x](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          constexpr T inv_sqrt2pi =
                              std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                          const T* xv = x.value().data();
                          T* d = gi[0]->data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T v = xv[i];
                            const T cdf = T(0.5) * std::erfc(-v * inv_sqrt2);
                            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                            d[i] += g[i] * (cdf + v * pdf);
                          }
                        });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  if (x.rank() == 0) throw std::invalid_argument("softmax: needs rank >= 1");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * width;
    const T mx = *std::max_element(row, row + width);
    T total = 0;
    for (std::size_t i = 0; i < width; ++i) {
      row[i] = std::exp(row[i] - mx);
      total += row[i];
    }
    for (std::size_t i = 0; i < width; ++i) row[i] /= total;
  }
  Tensor<T> saved = out;
  return make_result<T>(Primitive::softmax, std::move(out), {x},
                        [y = std::move(saved), rows, width](const Tensor<T>& g,
                                                            std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * width;
                            const T* gr = g.data() + r * width;
                            T dot = 0;
                            for (std::size_t i = 0; i < width; ++i) dot += gr[i] * yr[i];
                            for (std::size_t i = 0; i < width; ++i) {
                              d[r * width + i] += yr[i] * (gr[i] - dot);
                            }
                          }
                        });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  if (x.rank() == 0) throw std::invalid_argument("log_softmax: needs rank >= 1");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * width;
    const T mx = *std::max_element(row, row + width);
    T total = 0;
    for (std::size_t i = 0; i < width; ++i) total += std::exp(row[i] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t i = 0; i < width; ++i) row[i] -= lse;
  }
  Tensor<T> saved = out;
  return make_result<T>(Primitive::log_softmax, std::move(out), {x},
                        [y = std::move(saved), rows, width](const Tensor<T>& g,
                                                            std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* yr = y.data() + r * width;
                            const T* gr = g.data() + r * width;
                            T total = 0;
                            for (std::size_t i = 0; i < width; ++i) total += gr[i];
                            for (std::size_t i = 0; i < width; ++i) {
                              d[r * width + i] += gr[i] - std::exp(yr[i]) * total;
                            }
                          }
                        });
}

template <typename T>
Var<T> cross_entropy_with_logits(const Var<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument(fmt::format(
        "cross_entropy_with_logits: logits must be [batch, classes], got {}",
        to_string(logits.shape())));
  }
  const std::size_t batch = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw std::invalid_argument(fmt::format(
        "cross_entropy_with_logits: {} labels for batch of {}", labels.size(), batch));
  }
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  for (std::size_t y : label_copy) {
    if (y >= classes) {
      throw std::out_of_range(
          fmt::format("cross_entropy_with_logits: label {} out of range for {} classes", y, classes));
    }
  }
  Tensor<T> probs = logits.value();
  T loss = 0;
  for (std::size_t r = 0; r < batch; ++r) {
    T* row = probs.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = 0;
    for (std::size_t i = 0; i < classes; ++i) total += std::exp(row[i] - mx);
    const T lse = mx + std::log(total);
    loss += lse - row[label_copy[r]];
    for (std::size_t i = 0; i < classes; ++i) row[i] = std::exp(row[i] - lse);
  }
  loss /= static_cast<T>(batch);
  return make_result<T>(
      Primitive::cross_entropy_with_logits, Tensor<T>::scalar(loss), {logits},
      [p = std::move(probs), y = std::move(label_copy), batch, classes](
          const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T s = g[0] / static_cast<T>(batch);
        T* d = gi[0]->data();
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t i = 0; i < classes; ++i) {
            const T onehot = i == y[r] ? T(1) : T(0);
            d[r * classes + i] += s * (p[r * classes + i] - onehot);
          }
        }
      });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& targets) {
  if (logits.shape() != targets.shape()) {
    shape_mismatch("bce_with_logits", logits.shape(), targets.shape());
  }
  const std::size_t n = logits.size();
  const T* x = logits.value().data();
  const T* t = targets.value().data();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += std::max(x[i], T(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  loss /= static_cast<T>(n);
  return make_result<T>(Primitive::bce_with_logits, Tensor<T>::scalar(loss), {logits, targets},
                        [logits, targets, n](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          const T s = g[0] / static_cast<T>(n);
                          const T* x = logits.value().data();
                          const T* t = targets.value().data();
                          if (gi[0]) {
                            T* d = gi[0]->data();
                            for (std::size_t i = 0; i < n; ++i) {
                              const T sig = T(1) / (T(1) + std::exp(-x[i]));
                              d[i] += s * (sig - t[i]);
                            }
                          }
                          if (gi[1]) {
                            T* d = gi[1]->data();
                            for (std::size_t i = 0; i < n; ++i) d[i] -= s * x[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// reductions and layout

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> dst_strides;
  std::size_t count = 1;
};

ReducePlan plan_reduce(const Shape& in, std::span<const std::int64_t> axes, bool keepdims) {
  std::vector<bool> reduced(in.size(), axes.empty());
  for (std::int64_t ax : axes) {
    const std::size_t a = normalize_axis(ax, in.size());
    if (reduced[a]) throw std::invalid_argument(fmt::format("reduce: axis {} repeated", ax));
    reduced[a] = true;
  }
  Shape kept = in;
  ReducePlan plan;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) {
      kept[i] = 1;
      plan.count *= in[i];
    }
  }
  plan.dst_strides = strides_of(kept);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (reduced[i]) plan.dst_strides[i] = 0;
    if (!reduced[i] || keepdims) plan.out_shape.push_back(kept[i]);
  }
  return plan;
}

template <typename T>
Var<T> reduce_sum(const Var<T>& x, std::span<const std::int64_t> axes, bool keepdims, T factor,
                  Primitive kind) {
  ReducePlan plan = plan_reduce(x.shape(), axes, keepdims);
  Tensor<T> out(plan.out_shape);
  const T* xv = x.value().data();
  T* o = out.data();
  for_each_mapped(x.shape(), plan.dst_strides, [&](std::size_t s, std::size_t d) { o[d] += xv[s]; });
  if (factor != T(1)) {
    for (T& v : out.values()) v *= factor;
  }
  return make_result<T>(kind, std::move(out), {x},
                        [shape = x.shape(), strides = std::move(plan.dst_strides), factor](
                            const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          const T* gv = g.data();
                          for_each_mapped(shape, strides, [&](std::size_t s, std::size_t dd) {
                            d[s] += factor * gv[dd];
                          });
                        });
}

}  // namespace

template <typename T>
Var<T> sum(const Var<T>& x) {
  return reduce_sum<T>(x, {}, false, T(1), Primitive::sum);
}

template <typename T>
Var<T> sum(const Var<T>& x, std::span<const std::int64_t> axes, bool keepdims) {
  return reduce_sum<T>(x, axes, keepdims, T(1), Primitive::sum);
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return reduce_sum<T>(x, {}, false, T(1) / static_cast<T>(x.size()), Primitive::mean);
}

template <typename T>
Var<T> mean(const Var<T>& x, std::span<const std::int64_t> axes, bool keepdims) {
  const std::size_t count = plan_reduce(x.shape(), axes, keepdims).count;
  return reduce_sum<T>(x, axes, keepdims, T(1) / static_cast<T>(count), Primitive::mean);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (element_count(shape) != x.size()) {
    throw std::invalid_argument(fmt::format("reshape: cannot view {} as {}",
                                            to_string(x.shape()), to_string(shape)));
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(Primitive::reshape, std::move(out), {x},
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                        });
}

template <typename T>
Var<T> permute(const Var<T>& x, std::span<const std::size_t> order) {
  const Shape& in = x.shape();
  if (order.size() != in.size()) {
    throw std::invalid_argument(fmt::format("permute: order of length {} for shape {}",
                                            order.size(), to_string(in)));
  }
  std::vector<bool> seen(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= in.size() || seen[order[i]]) {
      throw std::invalid_argument(fmt::format("permute: invalid axis order for shape {}", to_string(in)));
    }
    seen[order[i]] = true;
    out_shape[i] = in[order[i]];
  }
  const auto out_strides = strides_of(out_shape);
  std::vector<std::size_t> dst(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) dst[order[i]] = out_strides[i];
  Tensor<T> out(out_shape);
  const T* xv = x.value().data();
  T* o = out.data();
  for_each_mapped(in, dst, [&](std::size_t s, std::size_t d) { o[d] = xv[s]; });
  return make_result<T>(Primitive::permute, std::move(out), {x},
                        [in, dst](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          const T* gv = g.data();
                          for_each_mapped(in, dst, [&](std::size_t s, std::size_t dd) { d[s] += gv[dd]; });
                        });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> xs, std::int64_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = xs[0].shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) shape_mismatch("concat", first, s);
    out_shape[ax] += s[ax];
  }
  const std::size_t outer = element_count(Shape(first.begin(), first.begin() + ax));
  const std::size_t inner = element_count(Shape(first.begin() + ax + 1, first.end()));
  const std::size_t out_block = out_shape[ax] * inner;
  Tensor<T> out(out_shape);
  std::vector<std::size_t> blocks;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t block = x.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.value().data() + o * block, block, out.data() + o * out_block + offset);
    }
    blocks.push_back(block);
    offset += block;
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return make_result<T>(Primitive::concat, std::move(out), std::move(inputs),
                        [blocks, outer, out_block](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < blocks.size(); ++k) {
                            if (gi[k]) {
                              T* d = gi[k]->data();
                              for (std::size_t o = 0; o < outer; ++o) {
                                const T* src = g.data() + o * out_block + offset;
                                for (std::size_t i = 0; i < blocks[k]; ++i) d[o * blocks[k] + i] += src[i];
                              }
                            }
                            offset += blocks[k];
                          }
                        });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::int64_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size());
  if (begin >= end || end > in[ax]) {
    throw std::invalid_argument(fmt::format("slice: range [{}, {}) invalid for extent {} of {}",
                                            begin, end, in[ax], to_string(in)));
  }
  std::vector<std::size_t> indices(end - begin);
  std::iota(indices.begin(), indices.end(), begin);
  Var<T> out = gather(x, axis, std::span<const std::size_t>(indices));
  out.node()->kind = Primitive::slice;
  return out;
}

template <typename T>
Var<T> gather(const Var<T>& x, std::int64_t axis, std::span<const std::size_t> indices) {
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size());
  if (indices.empty()) throw std::invalid_argument("gather: empty index list");
  for (std::size_t i : indices) {
    if (i >= in[ax]) {
      throw std::out_of_range(
          fmt::format("gather: index {} out of range for extent {} of {}", i, in[ax], to_string(in)));
    }
  }
  const std::size_t outer = element_count(Shape(in.begin(), in.begin() + ax));
  const std::size_t inner = element_count(Shape(in.begin() + ax + 1, in.end()));
  Shape out_shape = in;
  out_shape[ax] = indices.size();
  Tensor<T> out(out_shape);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::copy_n(xv + (o * in[ax] + indices[k]) * inner, inner,
                  out.data() + (o * indices.size() + k) * inner);
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>(Primitive::gather, std::move(out), {x},
                        [idx = std::move(idx), outer, inner, extent = in[ax]](
                            const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                          T* d = gi[0]->data();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t k = 0; k < idx.size(); ++k) {
                              const T* src = g.data() + (o * idx.size() + k) * inner;
                              T* dst = d + (o * extent + idx[k]) * inner;
                              for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// convolution

namespace {

// Output columns [lo, hi) of one kernel tap whose input column ow * stride + kj - pad lies inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t Wo, std::size_t W, std::size_t stride,
                                                         std::size_t kj, std::size_t pad) {
  std::size_t lo = 0;
  while (lo < Wo && lo * stride + kj < pad) ++lo;
  std::size_t hi = lo;
  while (hi < Wo && hi * stride + kj - pad < W) ++hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, const ConvGeometry& g,
            std::size_t kh, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t k = g.kernel, stride = g.stride;
  const std::size_t pad = g.padding;
  const std::size_t row_pad = kh == 1 ? 0 : pad;
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* dst = col + ((c * kh + ki) * k + kj) * plane;
        const auto [lo, hi] = valid_columns(Wo, W, stride, kj, pad);
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          T* row = dst + oh * Wo;
          const std::size_t ih_shifted = oh * stride + ki;
          if (ih_shifted < row_pad || ih_shifted - row_pad >= H) {
            std::fill_n(row, Wo, T(0));
            continue;
          }
          // Input column of output ow is ow * stride + kj - pad, non-negative on [lo, hi).
          const T* src = x + (c * H + ih_shifted - row_pad) * W;
          std::fill_n(row, lo, T(0));
          if (stride == 1) {
            std::copy(src + lo + kj - pad, src + hi + kj - pad, row + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = src[ow * stride + kj - pad];
          }
          std::fill(row + hi, row + Wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, const ConvGeometry& g,
            std::size_t kh, std::size_t Ho, std::size_t Wo, T* x) {
  const std::size_t k = g.kernel, stride = g.stride;
  const std::size_t pad = g.padding;
  const std::size_t row_pad = kh == 1 ? 0 : pad;
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* src = col + ((c * kh + ki) * k + kj) * plane;
        const auto [lo, hi] = valid_columns(Wo, W, stride, kj, pad);
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const std::size_t ih_shifted = oh * stride + ki;
          if (ih_shifted < row_pad || ih_shifted - row_pad >= H) continue;
          T* dst = x + (c * H + ih_shifted - row_pad) * W;
          const T* s = src + oh * Wo;
          if (stride == 1) {
            T* d = dst + lo + kj - pad;
            for (std::size_t ow = lo; ow < hi; ++ow) *d++ += s[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride + kj - pad] += s[ow];
          }
        }
      }
    }
  }
}

// Shared by conv1d (kh == 1, H == 1) and conv2d (kh == kernel).
template <typename T>
Var<T> conv_nd(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom,
               std::size_t N, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
               Primitive kind) {
  const std::size_t O = geom.out_channels;
  const std::size_t Ho = kh == 1 ? 1 : geom.output_extent(H);
  const std::size_t Wo = geom.output_extent(W);
  const std::size_t rows = C * kh * geom.kernel;
  const std::size_t plane = Ho * Wo;
  const bool has_bias = static_cast<bool>(bias);

  Shape out_shape = kh == 1 ? Shape{N, O, Wo} : Shape{N, O, Ho, Wo};
  Tensor<T> out(out_shape);
  RowMatrix<T> col(rows, plane);
  ConstMatrixMap<T> Wm(weight.value().data(), O, rows);
  for (std::size_t n = 0; n < N; ++n) {
    im2col(x.value().data() + n * C * H * W, C, H, W, geom, kh, Ho, Wo, col.data());
    MatrixMap<T> Y(out.data() + n * O * plane, O, plane);
    Y.noalias() = Wm * col;
    if (has_bias) {
      for (std::size_t o = 0; o < O; ++o) Y.row(o).array() += bias.value()[o];
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      kind, std::move(out), std::move(inputs),
      [x, weight, geom, N, C, H, W, kh, O, Ho, Wo, rows, plane](
          const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        RowMatrix<T> col(rows, plane);
        RowMatrix<T> dcol(rows, plane);
        ConstMatrixMap<T> Wm(weight.value().data(), O, rows);
        for (std::size_t n = 0; n < N; ++n) {
          ConstMatrixMap<T> G(g.data() + n * O * plane, O, plane);
          if (gi[1]) {
            im2col(x.value().data() + n * C * H * W, C, H, W, geom, kh, Ho, Wo, col.data());
            MatrixMap<T>(gi[1]->data(), O, rows).noalias() += G * col.transpose();
          }
          if (gi[0]) {
            dcol.noalias() = Wm.transpose() * G;
            col2im(dcol.data(), C, H, W, geom, kh, Ho, Wo, gi[0]->data() + n * C * H * W);
          }
          if (gi.size() > 2 && gi[2]) {
            T* db = gi[2]->data();
            for (std::size_t o = 0; o < O; ++o) db[o] += G.row(o).sum();
          }
        }
      });
}

void check_conv_weights(std::string_view op, const Shape& xs, const Shape& ws, const Shape* bs,
                        const ConvGeometry& g, std::size_t spatial) {
  Shape expected{g.out_channels, g.in_channels};
  for (std::size_t i = 0; i < spatial; ++i) expected.push_back(g.kernel);
  if (xs.size() != 2 + spatial || xs[1] != g.in_channels) {
    throw std::invalid_argument(fmt::format("{}: input {} does not have {} channels in rank {}", op,
                                            to_string(xs), g.in_channels, 2 + spatial));
  }
  if (ws != expected) {
    throw std::invalid_argument(
        fmt::format("{}: weight {} expected {}", op, to_string(ws), to_string(expected)));
  }
  if (bs && *bs != Shape{g.out_channels}) {
    throw std::invalid_argument(
        fmt::format("{}: bias {} expected [{}]", op, to_string(*bs), g.out_channels));
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geometry) {
  check_conv_weights("conv2d", x.shape(), weight.shape(), bias ? &bias.shape() : nullptr, geometry, 2);
  const Shape& s = x.shape();
  return conv_nd(x, weight, bias, geometry, s[0], s[1], s[2], s[3], geometry.kernel, Primitive::conv2d);
}

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geometry) {
  check_conv_weights("conv1d", x.shape(), weight.shape(), bias ? &bias.shape() : nullptr, geometry, 1);
  const Shape& s = x.shape();
  return conv_nd(x, weight, bias, geometry, s[0], s[1], 1, s[2], 1, Primitive::conv1d);
}

// ---------------------------------------------------------------------------
// normalization

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                   bool training) {
  const Shape& s = x.shape();
  if (s.size() != 4) {
    throw std::invalid_argument(fmt::format("batchnorm2d: expected [N, C, H, W], got {}", to_string(s)));
  }
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  const Shape cs{C};
  if (gamma.shape() != cs || beta.shape() != cs || state.running_mean.shape() != cs ||
      state.running_var.shape() != cs) {
    throw std::invalid_argument(fmt::format("batchnorm2d: per-channel tensors must be [{}] for input {}",
                                            C, to_string(s)));
  }
  const std::size_t m = N * HW;
  const T* xv = x.value().data();
  Tensor<T> out(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      T acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      }
      mu = acc / static_cast<T>(m);
      T sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(m);
      const T unbiased = m > 1 ? sq / static_cast<T>(m - 1) : var;
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + state.epsilon);
    const T gm = gamma.value()[c];
    const T bt = beta.value()[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = (xv[base + i] - mu) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gm * h + bt;
      }
    }
  }
  return make_result<T>(
      Primitive::batchnorm2d, std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, training, N, C, HW, m](
          const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = 0, sum_gh = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g += g[base + i];
              sum_gh += g[base + i] * xhat[base + i];
            }
          }
          if (gi[1]) (*gi[1])[c] += sum_gh;
          if (gi[2]) (*gi[2])[c] += sum_g;
          if (!gi[0]) continue;
          const T k = gamma.value()[c] * inv_std[c];
          T* d = gi[0]->data();
          const T mean_g = sum_g / static_cast<T>(m);
          const T mean_gh = sum_gh / static_cast<T>(m);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              if (training) {
                d[base + i] += k * (g[base + i] - mean_g - xhat[base + i] * mean_gh);
              } else {
                d[base + i] += k * g[base + i];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T epsilon) {
  if (x.rank() == 0) throw std::invalid_argument("layernorm: needs rank >= 1");
  const std::size_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw std::invalid_argument(fmt::format("layernorm: gamma {} / beta {} must be [{}] for input {}",
                                            to_string(gamma.shape()), to_string(beta.shape()), D,
                                            to_string(x.shape())));
  }
  const std::size_t rows = x.size() / D;
  const T* xv = x.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv + r * D;
    T mu = 0;
    for (std::size_t i = 0; i < D; ++i) mu += p[i];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t i = 0; i < D; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<T>(D);
    inv_std[r] = T(1) / std::sqrt(var + epsilon);
    for (std::size_t i = 0; i < D; ++i) {
      const T h = (p[i] - mu) * inv_std[r];
      xhat[r * D + i] = h;
      out[r * D + i] = gm[i] * h + bt[i];
    }
  }
  return make_result<T>(
      Primitive::layernorm, std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gamma, rows, D](
          const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T* gm = gamma.value().data();
        std::vector<T> gg(D);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * D;
          const T* hr = xhat.data() + r * D;
          if (gi[1]) {
            for (std::size_t i = 0; i < D; ++i) (*gi[1])[i] += gr[i] * hr[i];
          }
          if (gi[2]) {
            for (std::size_t i = 0; i < D; ++i) (*gi[2])[i] += gr[i];
          }
          if (!gi[0]) continue;
          T mean_gg = 0, mean_ggh = 0;
          for (std::size_t i = 0; i < D; ++i) {
            gg[i] = gr[i] * gm[i];
            mean_gg += gg[i];
            mean_ggh += gg[i] * hr[i];
          }
          mean_gg /= static_cast<T>(D);
          mean_ggh /= static_cast<T>(D);
          T* d = gi[0]->data() + r * D;
          for (std::size_t i = 0; i < D; ++i) {
            d[i] += inv_std[r] * (gg[i] - mean_gg - hr[i] * mean_ggh);
          }
        }
      });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// dispatcher

template <typename T>
Var<T> apply_primitive(Primitive kind, std::span<const Var<T>> in, const PrimitiveAttributes<T>& at) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw std::invalid_argument(fmt::format("{}: expected {}..{} inputs, got {}", primitive_name(kind),
                                              lo, hi, in.size()));
    }
  };
  switch (kind) {
    case Primitive::matmul: need(2, 2); return ops::matmul(in[0], in[1]);
    case Primitive::conv2d:
      need(2, 3);
      return ops::conv2d(in[0], in[1], in.size() > 2 ? in[2] : Var<T>{}, at.conv);
    case Primitive::conv1d:
      need(2, 3);
      return ops::conv1d(in[0], in[1], in.size() > 2 ? in[2] : Var<T>{}, at.conv);
    case Primitive::batchnorm2d:
      need(3, 3);
      if (!at.batchnorm) throw std::invalid_argument("batchnorm2d: running statistics required");
      return ops::batchnorm2d(in[0], in[1], in[2], *at.batchnorm, at.training);
    case Primitive::layernorm: need(3, 3); return ops::layernorm(in[0], in[1], in[2]);
    case Primitive::relu: need(1, 1); return ops::relu(in[0]);
    case Primitive::gelu: need(1, 1); return ops::gelu(in[0]);
    case Primitive::softmax: need(1, 1); return ops::softmax(in[0]);
    case Primitive::log_softmax: need(1, 1); return ops::log_softmax(in[0]);
    case Primitive::cross_entropy_with_logits:
      need(1, 1);
      return ops::cross_entropy_with_logits(in[0], std::span<const std::size_t>(at.indices));
    case Primitive::bce_with_logits: need(2, 2); return ops::bce_with_logits(in[0], in[1]);
    case Primitive::add: need(2, 2); return ops::add(in[0], in[1]);
    case Primitive::mul: need(2, 2); return ops::mul(in[0], in[1]);
    case Primitive::scale: need(1, 1); return ops::scale(in[0], at.factor);
    case Primitive::sum:
      need(1, 1);
      return ops::sum(in[0], std::span<const std::int64_t>(at.axes), at.keepdims);
    case Primitive::mean:
      need(1, 1);
      return ops::mean(in[0], std::span<const std::int64_t>(at.axes), at.keepdims);
    case Primitive::reshape: need(1, 1); return ops::reshape(in[0], at.shape);
    case Primitive::permute: need(1, 1); return ops::permute(in[0], std::span<const std::size_t>(at.order));
    case Primitive::concat: need(1, in.size() + 1); return ops::concat(in, at.axis);
    case Primitive::slice: need(1, 1); return ops::slice(in[0], at.axis, at.begin, at.end);
    case Primitive::gather:
      need(1, 1);
      return ops::gather(in[0], at.axis, std::span<const std::size_t>(at.indices));
    case Primitive::leaf: break;
  }
  throw std::invalid_argument(fmt::format("apply_primitive: '{}' is not an operation", primitive_name(kind)));
}

namespace ops {

ReluPatternProbe::ReluPatternProbe() {
  relu_probe.active = true;
  relu_probe.hash = 1469598103934665603ULL;
}

ReluPatternProbe::~ReluPatternProbe() { relu_probe.active = false; }

std::uint64_t ReluPatternProbe::digest() const { return relu_probe.hash; }

ReluPatternRecorder::ReluPatternRecorder(ReluPattern& pattern) {
  pattern.masks.clear();
  relu_probe.record = &pattern;
}

ReluPatternRecorder::~ReluPatternRecorder() { relu_probe.record = nullptr; }

ReluPatternReplay::ReluPatternReplay(const ReluPattern& pattern) {
  relu_probe.replay = &pattern;
  relu_probe.replay_call = 0;
}

ReluPatternReplay::~ReluPatternReplay() { relu_probe.replay = nullptr; }

}  // namespace ops

#define SAL_LAB_INSTANTIATE_OPS(T)                                                              \
  template Var<T> ops::matmul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> ops::add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> ops::sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> ops::mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> ops::scale(const Var<T>&, T);                                                \
  template Var<T> ops::relu(const Var<T>&);                                                    \
  template Var<T> ops::gelu(const Var<T>&);                                                    \
  template Var<T> ops::softmax(const Var<T>&);                                                 \
  template Var<T> ops::log_softmax(const Var<T>&);                                             \
  template Var<T> ops::cross_entropy_with_logits(const Var<T>&, std::span<const std::size_t>); \
  template Var<T> ops::bce_with_logits(const Var<T>&, const Var<T>&);                          \
  template Var<T> ops::sum(const Var<T>&);                                                     \
  template Var<T> ops::sum(const Var<T>&, std::span<const std::int64_t>, bool);                \
  template Var<T> ops::mean(const Var<T>&);                                                    \
  template Var<T> ops::mean(const Var<T>&, std::span<const std::int64_t>, bool);               \
  template Var<T> ops::reshape(const Var<T>&, Shape);                                          \
  template Var<T> ops::permute(const Var<T>&, std::span<const std::size_t>);                   \
  template Var<T> ops::concat(std::span<const Var<T>>, std::int64_t);                          \
  template Var<T> ops::slice(const Var<T>&, std::int64_t, std::size_t, std::size_t);           \
  template Var<T> ops::gather(const Var<T>&, std::int64_t, std::span<const std::size_t>);      \
  template Var<T> ops::conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&); \
  template Var<T> ops::conv1d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&); \
  template Var<T> ops::batchnorm2d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool); \
  template Var<T> ops::layernorm(const Var<T>&, const Var<T>&, const Var<T>&, T);              \
  template Var<T> apply_primitive(Primitive, std::span<const Var<T>>, const PrimitiveAttributes<T>&);

SAL_LAB_INSTANTIATE_OPS(float)
SAL_LAB_INSTANTIATE_OPS(double)

}  // namespace sal_lab
