#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Nodes created by operations
// keep their inputs alive and carry a closure that pushes the node's gradient
// back into its inputs. Leaves (parameters, inputs) have no producer.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "marmot/errors.hpp"
#include "marmot/rng.hpp"

namespace marmot {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor identity(std::size_t n, bool requires_grad = false) {
    auto t = zeros({n, n}, requires_grad);
    for (std::size_t i = 0; i < n; ++i) t.node_->values[i * n + i] = 1.0;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    const auto n = numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }
  double at(std::size_t i) const { return node_->values.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->values.at(r * dim(1) + c); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient slot; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Leaf values are writable (optimizer updates, finite-difference probes).
  std::span<double> mutable_values() {
    if (!is_leaf()) throw ContractError("only leaf tensors may be mutated in place");
    return node_->values;
  }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }

  // Deep copy as a fresh leaf.
  Tensor clone() const { return Tensor(shape(), node_->values, requires_grad()); }
  // Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Builds a result node. `backward` is kept only if some input needs a gradient.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    out.node_->op = op;
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->inputs.reserve(inputs.size());
      for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a one-element loss. Leaf gradients accumulate across
/// calls until zeroed; gradients of intermediate nodes are recomputed each call.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  if (loss.is_leaf()) {
    loss.node()->grad_buffer()[0] += 1.0;
    return;
  }

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !child->is_leaf() && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* node : order) node->grad.assign(node->values.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

/// Zeroes the gradient slot of every tensor in `tensors`.
inline void reset_grads(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

}  // namespace marmot
