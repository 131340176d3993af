#include "sal_lab/core/autograd.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <stdexcept>
#include <utility>

namespace sal_lab {

namespace {

constexpr std::array<std::pair<Primitive, std::string_view>, 22> kPrimitiveNames{{
    {Primitive::leaf, "leaf"},
    {Primitive::matmul, "matmul"},
    {Primitive::conv2d, "conv2d"},
    {Primitive::conv1d, "conv1d"},
    {Primitive::batchnorm2d, "batchnorm2d"},
    {Primitive::layernorm, "layernorm"},
    {Primitive::relu, "relu"},
    {Primitive::gelu, "gelu"},
    {Primitive::softmax, "softmax"},
    {Primitive::log_softmax, "log_softmax"},
    {Primitive::cross_entropy_with_logits, "cross_entropy_with_logits"},
    {Primitive::bce_with_logits, "bce_with_logits"},
    {Primitive::add, "add"},
    {Primitive::mul, "mul"},
    {Primitive::scale, "scale"},
    {Primitive::sum, "sum"},
    {Primitive::mean, "mean"},
    {Primitive::reshape, "reshape"},
    {Primitive::permute, "permute"},
    {Primitive::concat, "concat"},
    {Primitive::slice, "slice"},
    {Primitive::gather, "gather"},
}};

thread_local bool grad_enabled = true;

}  // namespace

std::string_view primitive_name(Primitive kind) {
  for (const auto& [k, name] : kPrimitiveNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

Primitive parse_primitive(std::string_view name) {
  for (const auto& [k, n] : kPrimitiveNames) {
    if (n == name && k != Primitive::leaf) return k;
  }
  throw std::invalid_argument(fmt::format("unknown primitive kind '{}'", name));
}

bool GradMode::enabled() noexcept { return grad_enabled; }
void GradMode::set_enabled(bool on) noexcept { grad_enabled = on; }

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value, std::string name) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->name = std::move(name);
  return Var(std::move(node));
}

template <typename T>
void Var<T>::assign(Tensor<T> value) {
  if (!is_leaf()) throw std::logic_error("assign() on a non-leaf graph value");
  if (value.shape() != node_->value.shape()) {
    throw std::invalid_argument(fmt::format("assign: shape {} does not match {}",
                                            to_string(value.shape()),
                                            to_string(node_->value.shape())));
  }
  node_->value = std::move(value);
}

template <typename T>
std::span<T> Var<T>::mutable_values() {
  if (!is_leaf()) throw std::logic_error("mutable_values() on a non-leaf graph value");
  return node_->value.values();
}

template <typename T>
Var<T> make_result(Primitive kind, Tensor<T> value, std::vector<Var<T>> inputs,
                   typename Node<T>::BackwardFn backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->kind = kind;
  const bool needs = GradMode::enabled() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var<T>& v) { return v.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
const Tensor<T>* Gradients<T>::find(const Var<T>& v) const {
  auto it = grads_.find(v.node());
  return it == grads_.end() ? nullptr : &it->second;
}

template <typename T>
Tensor<T> Gradients<T>::of(const Var<T>& v) const {
  if (const auto* g = find(v)) return *g;
  return Tensor<T>::zeros(v.shape());
}

template <typename T>
Gradients<T> backward(const Var<T>& root) {
  if (!root) throw std::invalid_argument("backward: empty root");
  if (root.rank() != 0) {
    throw std::invalid_argument(
        fmt::format("backward: root must be rank-0, got shape {}", to_string(root.shape())));
  }
  Gradients<T> result;
  if (!root.requires_grad()) return result;

  // Iterative post-order DFS; a grey node met again means a cycle.
  enum class Mark : std::uint8_t { grey, black };
  std::unordered_map<const Node<T>*, Mark> marks;
  std::vector<std::shared_ptr<Node<T>>> order;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
  stack.emplace_back(root.shared(), 0);
  marks[root.node()] = Mark::grey;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (!child->requires_grad) continue;
      auto it = marks.find(child.get());
      if (it == marks.end()) {
        marks.emplace(child.get(), Mark::grey);
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::grey) {
        throw std::logic_error("backward: computation graph contains a cycle");
      }
    } else {
      marks[node.get()] = Mark::black;
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  auto& grads = result.grads_;
  grads.emplace(root.node(), Tensor<T>::ones(root.shape()));
  std::vector<Tensor<T>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (node->kind == Primitive::leaf) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const Tensor<T> grad_out = node->retain_grad ? found->second : std::move(found->second);
    if (!node->retain_grad) grads.erase(found);
    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node<T>* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      grads.try_emplace(in, Tensor<T>::zeros(in->value.shape()));
    }
    // Pointers are taken after all insertions; unordered_map keeps element
    // addresses stable across rehashing anyway.
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node<T>* in = node->inputs[i].get();
      if (in->requires_grad) slots[i] = &grads.at(in);
    }
    node->backward(grad_out, slots);
  }

  for (auto& node : order) {
    if (grads.count(node.get())) result.keep_alive_.push_back(std::move(node));
  }
  return result;
}

template class Var<float>;
template class Var<double>;
template class Gradients<float>;
template class Gradients<double>;
template Var<float> make_result(Primitive, Tensor<float>, std::vector<Var<float>>,
                                Node<float>::BackwardFn);
template Var<double> make_result(Primitive, Tensor<double>, std::vector<Var<double>>,
                                 Node<double>::BackwardFn);
template Gradients<float> backward(const Var<float>&);
template Gradients<double> backward(const Var<double>&);

}  // namespace sal_lab
