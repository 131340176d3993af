#include "sal_lab/model/sal.hpp"

#include <fmt/format.h>

#include <array>
#include <stdexcept>

#include "sal_lab/core/ops.hpp"

namespace sal_lab {

template <typename T>
SalWeights<T> SalWeights<T>::create(ParameterStore<T>& store, const std::string& prefix, std::size_t R,
                                    std::size_t C, std::size_t d_h, std::size_t heads, std::size_t d_v,
                                    bool with_bias, CounterRng& rng) {
  if (heads == 0 || d_h % heads != 0) {
    throw std::invalid_argument(fmt::format("SAL: {} heads do not divide d_h = {}", heads, d_h));
  }
  const std::size_t d_l = d_h / heads;
  SalWeights w;
  w.heads = heads;
  w.w_star = store.add(prefix + ".w_star", glorot_uniform<T>({R, C, d_h, d_v}, 9 * d_l, d_v, rng));
  if (with_bias) w.bias = store.add(prefix + ".bias", Tensor<T>::zeros({heads, d_v}));
  return w;
}

template <typename T>
SalWeights<T> SalWeights<T>::wrap(Var<T> w_star, Var<T> bias, std::size_t heads) {
  if (w_star.rank() != 4) {
    throw std::invalid_argument(fmt::format("SAL: W* must be [R, C, d_h, d_v], got {}", to_string(w_star.shape())));
  }
  const std::size_t d_h = w_star.shape()[2];
  if (heads == 0 || d_h % heads != 0) {
    throw std::invalid_argument(fmt::format("SAL: {} heads do not divide d_h = {}", heads, d_h));
  }
  if (bias && bias.shape() != Shape{heads, w_star.shape()[3]}) {
    throw std::invalid_argument(fmt::format("SAL: bias {} expected [{}, {}]", to_string(bias.shape()), heads,
                                            w_star.shape()[3]));
  }
  SalWeights w;
  w.w_star = std::move(w_star);
  w.bias = std::move(bias);
  w.heads = heads;
  return w;
}

template <typename T>
AdaptedWeights<T> adapt_weights(const Var<T>& w_star, StructureSpec s) {
  const Shape& ws = w_star.shape();
  if (ws.size() != 4) {
    throw std::invalid_argument(fmt::format("adapt_weights: W* must be [R, C, d_h, d_v], got {}", to_string(ws)));
  }
  const std::size_t R = ws[0], C = ws[1], d_h = ws[2], d_v = ws[3];
  if (s.rows == 0 || s.cols == 0 || R % s.rows != 0 || C % s.cols != 0) {
    throw std::invalid_argument(fmt::format(
        "adapt_weights: structure (r={}, c={}) does not divide (R={}, C={})", s.rows, s.cols, R, C));
  }
  AdaptedWeights<T> out;
  out.structure = s;
  out.d_r = R / s.rows;
  out.d_c = C / s.cols;
  if (out.d_r == 1 && out.d_c == 1) {
    out.w = ops::reshape(w_star, {R * C * d_h, d_v});
    return out;
  }
  // [r, d_r, c, d_c, d_h*d_v]: block (j, l) is indices (j, :, l, :).
  const Var<T> blocks = ops::reshape(w_star, {s.rows, out.d_r, s.cols, out.d_c, d_h * d_v});
  const std::array<std::int64_t, 2> axes{1, 3};
  out.w = ops::reshape(ops::mean(blocks, std::span<const std::int64_t>(axes)), {s.cells() * d_h, d_v});
  return out;
}

template <typename T>
Var<T> sal_apply(const Var<T>& groups, const SalWeights<T>& weights, StructureSpec structure) {
  const std::size_t I = structure.cells();
  const std::size_t d_h = weights.d_h(), d_v = weights.d_v(), L = weights.heads, d_l = weights.d_l();
  const Shape& gs = groups.shape();
  if (gs.size() != 3 || gs[1] != I || gs[2] != d_h) {
    throw std::invalid_argument(fmt::format("SAL: groups {} expected [N, {}, {}] for structure {}x{}",
                                            to_string(gs), I, d_h, structure.rows, structure.cols));
  }
  const std::size_t N = gs[0];
  const AdaptedWeights<T> adapted = adapt_weights(weights.w_star, structure);

  static constexpr std::array<std::size_t, 4> kToHeadsFirst{2, 0, 1, 3};
  static constexpr std::array<std::size_t, 4> kWeightHeadsFirst{1, 0, 2, 3};
  static constexpr std::array<std::size_t, 3> kBatchFirst{1, 0, 2};

  Var<T> x = ops::reshape(groups, {N, I, L, d_l});
  Var<T> w = ops::reshape(adapted.w, {I, L, d_l, d_v});
  if (L > 1) {
    x = ops::permute(x, std::span<const std::size_t>(kToHeadsFirst));
    w = ops::permute(w, std::span<const std::size_t>(kWeightHeadsFirst));
  }
  x = ops::reshape(x, {L, N, I * d_l});
  w = ops::reshape(w, {L, I * d_l, d_v});
  Var<T> v = ops::matmul(x, w);  // [L, N, d_v]
  v = L > 1 ? ops::permute(v, std::span<const std::size_t>(kBatchFirst)) : ops::reshape(v, {N, 1, d_v});
  if (weights.bias) v = ops::add(v, weights.bias);
  return v;
}

template <typename T>
Var<T> multi_head_sal(const Var<T>& group, const SalWeights<T>& weights, StructureSpec structure) {
  const std::size_t I = structure.cells();
  if (group.rank() != 2 || group.shape()[0] != I || group.shape()[1] != weights.d_h()) {
    throw std::invalid_argument(fmt::format("SAL: group {} expected [{}, {}] ({} embeddings of width {})",
                                            to_string(group.shape()), I, weights.d_h(), I, weights.d_h()));
  }
  const Var<T> out = sal_apply(ops::reshape(group, {1, I, weights.d_h()}), weights, structure);
  return ops::reshape(out, {weights.heads * weights.d_v()});
}

template <typename T>
Var<T> sal_forward(const Var<T>& group, const SalWeights<T>& weights, StructureSpec structure) {
  if (weights.heads != 1) {
    throw std::invalid_argument(
        fmt::format("sal_forward: weights have {} heads; use multi_head_sal", weights.heads));
  }
  return multi_head_sal(group, weights, structure);
}

#define SAL_LAB_INSTANTIATE_SAL(T)                                                          \
  template struct SalWeights<T>;                                                            \
  template AdaptedWeights<T> adapt_weights(const Var<T>&, StructureSpec);                   \
  template Var<T> sal_apply(const Var<T>&, const SalWeights<T>&, StructureSpec);            \
  template Var<T> multi_head_sal(const Var<T>&, const SalWeights<T>&, StructureSpec);       \
  template Var<T> sal_forward(const Var<T>&, const SalWeights<T>&, StructureSpec);

SAL_LAB_INSTANTIATE_SAL(float)
SAL_LAB_INSTANTIATE_SAL(double)

}  // namespace sal_lab
