#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// Output length along one spatial axis; throws if the window does not fit.
  std::size_t output_extent(std::size_t input_extent) const;
};

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

namespace ops {

// Linear algebra. `b` is either batched like `a` or a single 2-D matrix
// applied to every leading index of `a`.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

// Elementwise with suffix broadcasting: shapes equal, or one is a trailing
// suffix of the other.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T factor);

template <typename T> Var<T> relu(const Var<T>& x);
/// Exact GELU, x * Phi(x) with the Gaussian CDF.
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> softmax(const Var<T>& x);      // last axis
template <typename T> Var<T> log_softmax(const Var<T>& x);  // last axis

/// Mean over the batch of -log softmax(logits)[label]; logits are [batch, classes].
template <typename T>
Var<T> cross_entropy_with_logits(const Var<T>& logits, std::span<const std::size_t> labels);
/// Mean binary cross-entropy of sigmoid(logits) against same-shaped targets.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& targets);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> sum(const Var<T>& x, std::span<const std::int64_t> axes, bool keepdims = false);
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x, std::span<const std::int64_t> axes, bool keepdims = false);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
/// Output axis i is input axis order[i].
template <typename T> Var<T> permute(const Var<T>& x, std::span<const std::size_t> order);
template <typename T> Var<T> concat(std::span<const Var<T>> xs, std::int64_t axis);
template <typename T>
Var<T> slice(const Var<T>& x, std::int64_t axis, std::size_t begin, std::size_t end);
/// Selects entries `indices` along `axis` (repeats allowed).
template <typename T>
Var<T> gather(const Var<T>& x, std::int64_t axis, std::span<const std::size_t> indices);

/// x [N, C, H, W], weight [O, C, k, k], bias [O] or empty.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const ConvGeometry& geometry);
/// x [N, C, L], weight [O, C, k], bias [O] or empty.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const ConvGeometry& geometry);
/// Normalizes x [N, C, H, W] per channel. Training mode uses batch statistics
/// and updates `state`; eval mode is the affine map given by `state`.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   BatchNormState<T>& state, bool training);
/// Normalizes over the last axis.
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T epsilon = T(1e-5));

/// While alive, folds the sign pattern of every relu input evaluated on this
/// thread into a digest. Used to detect kinks between finite-difference probes.
class ReluPatternProbe {
 public:
  ReluPatternProbe();
  ~ReluPatternProbe();
  ReluPatternProbe(const ReluPatternProbe&) = delete;
  ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;
  std::uint64_t digest() const;
};

/// Sign masks of successive relu calls, in call order.
struct ReluPattern {
  std::vector<std::vector<bool>> masks;
};

/// While alive, every relu call on this thread appends its mask to `pattern`.
class ReluPatternRecorder {
 public:
  explicit ReluPatternRecorder(ReluPattern& pattern);
  ~ReluPatternRecorder();
  ReluPatternRecorder(const ReluPatternRecorder&) = delete;
  ReluPatternRecorder& operator=(const ReluPatternRecorder&) = delete;
};

/// While alive, relu call k on this thread keeps exactly the entries set in
/// mask k instead of the positive ones, pinning the network to one linear
/// region. Throws std::logic_error if the calls do not line up with the recording.
class ReluPatternReplay {
 public:
  explicit ReluPatternReplay(const ReluPattern& pattern);
  ~ReluPatternReplay();
  ReluPatternReplay(const ReluPatternReplay&) = delete;
  ReluPatternReplay& operator=(const ReluPatternReplay&) = delete;
};

}  // namespace ops

/// Attribute bag for the generic dispatcher; each kind reads the fields it needs.
template <typename T>
struct PrimitiveAttributes {
  std::vector<std::int64_t> axes;    // sum/mean (empty = all)
  std::vector<std::size_t> order;    // permute
  Shape shape;                       // reshape
  std::int64_t axis = -1;            // concat, slice, gather
  std::size_t begin = 0;             // slice
  std::size_t end = 0;               // slice
  std::vector<std::size_t> indices;  // gather; labels for cross entropy
  bool keepdims = false;
  T factor = T(1);                   // scale
  ConvGeometry conv;
  bool training = false;             // batchnorm2d
  BatchNormState<T>* batchnorm = nullptr;
};

/// Generic entry point over the primitive set. Input conventions:
/// conv [x, w] or [x, w, b]; batchnorm2d/layernorm [x, gamma, beta];
/// bce_with_logits [logits, targets]; concat takes any number of inputs.
template <typename T>
Var<T> apply_primitive(Primitive kind, std::span<const Var<T>> inputs,
                       const PrimitiveAttributes<T>& attrs);
template <typename T>
Var<T> apply_primitive(std::string_view kind, std::span<const Var<T>> inputs,
                       const PrimitiveAttributes<T>& attrs) {
  return apply_primitive(parse_primitive(kind), inputs, attrs);
}

}  // namespace sal_lab
