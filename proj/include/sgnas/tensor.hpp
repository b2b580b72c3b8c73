#pragma once

// Reverse-mode automatic differentiation substrate.
//
// A BasicTensor is a cheap handle onto a shared graph node. Operations in
// ops.hpp allocate a fresh node per call and record a backward closure when
// any input requires a gradient, so the graph is rebuilt every forward pass.
// ComputationTape linearises the graph reachable from a root into
// topological order and runs the closures in reverse.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sgnas/errors.hpp"

namespace sgnas {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  // Set whenever a backward pass wrote into grad; optimizers use it to skip
  // parameters that were not on the active path.
  bool grad_touched = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    grad_touched = true;
    return grad.data();
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    if (shape.empty()) shape = {1};
    for (auto e : shape)
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    n->value.assign(numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return BasicTensor(std::move(n));
  }

  static BasicTensor from(Shape shape, std::vector<T> values,
                          bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    if (numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return BasicTensor(std::move(n));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const {
    if (axis >= node_->shape.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                           shape_str(node_->shape));
    return node_->shape[axis];
  }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (size() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  bool grad_touched() const { return node_->grad_touched; }
  void zero_grad() {
    node_->grad.clear();
    node_->grad_touched = false;
  }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Same values, no history.
  BasicTensor detach() const { return from(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered record of the graph reachable from a root. Parents always precede
// their children; backward() visits each node once, in reverse.
template <typename T>
class ComputationTape {
 public:
  explicit ComputationTape(const BasicTensor<T>& root) : root_(root.node()) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root_, 0);
    seen.insert(root_);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second)
          stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::span<Node<T>* const> nodes() const { return order_; }

  void backward(T seed = T(1)) {
    // Interior grads are per-pass scratch; leaves accumulate across passes.
    for (Node<T>* n : order_)
      if (n->backward) n->grad.clear();
    T* g = root_->grad_buffer();
    for (std::size_t i = 0; i < root_->value.size(); ++i) g[i] += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  Node<T>* root_;
  std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  ComputationTape<T>(loss).backward();
}

}  // namespace sgnas
