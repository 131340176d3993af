#pragma once

#include <cstddef>
#include <string>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/nn.hpp"

namespace sal_lab {

/// Panel grid geometry r x c that SAL adapts to.
struct StructureSpec {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t cells() const { return rows * cols; }
  bool operator==(const StructureSpec&) const = default;
};

/// Underlying tensor W* [R, C, d_h, d_v] and per-head bias [L, d_v].
template <typename T>
struct SalWeights {
  Var<T> w_star;
  Var<T> bias;  // empty when the layer is built without bias
  std::size_t heads = 1;

  std::size_t R() const { return w_star.shape()[0]; }
  std::size_t C() const { return w_star.shape()[1]; }
  std::size_t d_h() const { return w_star.shape()[2]; }
  std::size_t d_v() const { return w_star.shape()[3]; }
  std::size_t d_l() const { return d_h() / heads; }

  /// Registers "<prefix>.w_star" and "<prefix>.bias". W* is Glorot-uniform
  /// with fan-in 3*3*d_l (a 3x3 grid of one head's slices) and fan-out d_v.
  static SalWeights create(ParameterStore<T>& store, const std::string& prefix, std::size_t R, std::size_t C,
                           std::size_t d_h, std::size_t heads, std::size_t d_v, bool with_bias, CounterRng& rng);
  /// Wraps existing tensors; validates shapes and head divisibility.
  static SalWeights wrap(Var<T> w_star, Var<T> bias, std::size_t heads);
};

/// W [r*c*d_h, d_v]; row (j*c + l)*d_h + m is the mean of the d_r x d_c block
/// (j, l) of W*[., ., m, :], with d_r = R/r and d_c = C/c.
template <typename T>
struct AdaptedWeights {
  Var<T> w;
  StructureSpec structure;
  std::size_t d_r = 1;
  std::size_t d_c = 1;
};

/// Block-mean pooling of W* onto the structure. Differentiable; each W* entry
/// receives its block's W gradient scaled by 1/(d_r*d_c).
template <typename T>
AdaptedWeights<T> adapt_weights(const Var<T>& w_star, StructureSpec structure);

/// Batched multi-head SAL. groups [N, r*c, d_h] -> [N, L, d_v]. Head l reads
/// the slice [l*d_l, (l+1)*d_l) of every embedding and of W*'s d_h axis.
template <typename T>
Var<T> sal_apply(const Var<T>& groups, const SalWeights<T>& weights, StructureSpec structure);

/// One group [r*c, d_h] through all heads; output [L*d_v] in head order.
template <typename T>
Var<T> multi_head_sal(const Var<T>& group, const SalWeights<T>& weights, StructureSpec structure);

/// Single-head W^T G + B for one group [r*c, d_h]; weights must have one head.
template <typename T>
Var<T> sal_forward(const Var<T>& group, const SalWeights<T>& weights, StructureSpec structure);

}  // namespace sal_lab
