#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "poseroi/tensor.hpp"

namespace poseroi {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs that require grad.
  std::function<void(Node&)> backward;
};

}  // namespace detail

/// Handle to a value recorded on the op graph of one forward pass.
///
/// Vars are cheap to copy (shared ownership of the node). The graph built by
/// a forward pass lives as long as some Var refers to its root, and
/// `backward()` releases the saved activations once gradients are propagated.
class Var {
 public:
  Var() = default;

  /// A value that takes no part in differentiation.
  static Var constant(Tensor value);
  /// A differentiable leaf (parameter or input under test).
  static Var leaf(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by the last backward pass; zeros when nothing
  /// reached this node.
  Tensor grad() const;

  /// Builds an op node. `backward` is only kept when some input requires grad.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward);

  detail::Node& node() const { return *node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Accumulates `g` into the node's gradient buffer, allocating it on first use.
void accumulate_grad(detail::Node& node, const Tensor& g);
void accumulate_grad(detail::Node& node, Tensor&& g);

/// Reverse-mode sweep from a single-element root, seeded with 1.
void backward(const Var& root);

}  // namespace poseroi
