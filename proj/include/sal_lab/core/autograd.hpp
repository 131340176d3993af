#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sal_lab/core/tensor.hpp"

namespace sal_lab {

enum class Primitive {
  leaf,
  matmul,
  conv2d,
  conv1d,
  batchnorm2d,
  layernorm,
  relu,
  gelu,
  softmax,
  log_softmax,
  cross_entropy_with_logits,
  bce_with_logits,
  add,
  mul,
  scale,
  sum,
  mean,
  reshape,
  permute,
  concat,
  slice,
  gather,
};

std::string_view primitive_name(Primitive kind);
/// Throws std::invalid_argument for names outside the primitive set.
Primitive parse_primitive(std::string_view name);

template <typename T>
struct Node {
  using BackwardFn =
      std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  Tensor<T> value;
  Primitive kind = Primitive::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  /// Accumulates into grad_in[i]; entries are null for inputs that need no gradient.
  BackwardFn backward;
  bool requires_grad = false;
  bool retain_grad = false;
  std::string name;
};

/// Handle to a value in the computation graph.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value);
  static Var parameter(Tensor<T> value, std::string name = {});

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }
  Primitive kind() const { return node_->kind; }
  const std::string& name() const { return node_->name; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->kind == Primitive::leaf; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Keep this intermediate's gradient in the result of backward().
  void retain_grad() { node_->retain_grad = true; }

  /// Replace a leaf's value in place (parameter updates). Shape must not change.
  void assign(Tensor<T> value);
  /// Mutable access to a leaf's storage.
  std::span<T> mutable_values();

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Per-thread switch for graph recording.
class GradMode {
 public:
  static bool enabled() noexcept;
  static void set_enabled(bool on) noexcept;
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds a graph node. When recording is off or no input needs a gradient the
/// result is a constant and `backward` is dropped.
template <typename T>
Var<T> make_result(Primitive kind, Tensor<T> value, std::vector<Var<T>> inputs,
                   typename Node<T>::BackwardFn backward);

template <typename T>
class Gradients {
 public:
  /// Null when `v` was not reached (or its gradient was not retained).
  const Tensor<T>* find(const Var<T>& v) const;
  /// Gradient of `v`; zeros of matching shape when unreached.
  Tensor<T> of(const Var<T>& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  template <typename U>
  friend Gradients<U> backward(const Var<U>& root);

  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
  std::vector<std::shared_ptr<Node<T>>> keep_alive_;
};

/// Reverse-mode sweep from a rank-0 root. Gradients are returned for every
/// reachable leaf that requires one and for intermediates marked retain_grad().
template <typename T>
Gradients<T> backward(const Var<T>& root);

}  // namespace sal_lab
