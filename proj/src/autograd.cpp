#include "poseroi/autograd.hpp"

#include <unordered_set>

#include "poseroi/error.hpp"

namespace poseroi {

Var Var::constant(Tensor value) {
  Var v;
  v.node_ = std::make_shared<detail::Node>();
  v.node_->value = std::move(value);
  return v;
}

Var Var::leaf(Tensor value) {
  Var v = constant(std::move(value));
  v.node_->requires_grad = true;
  return v;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

Var Var::make(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward) {
  Var v = constant(std::move(value));
  bool needs = false;
  for (const Var& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    v.node_->requires_grad = true;
    v.node_->backward = std::move(backward);
    v.node_->inputs.reserve(inputs.size());
    for (Var& in : inputs) v.node_->inputs.push_back(std::move(in.node_));
  }
  return v;
}

void accumulate_grad(detail::Node& node, const Tensor& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    require_same_shape(node.value.shape(), g.shape(), "gradient");
    node.grad = g;
  } else {
    node.grad.accumulate(g);
  }
}

void accumulate_grad(detail::Node& node, Tensor&& g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    require_same_shape(node.value.shape(), g.shape(), "gradient");
    node.grad = std::move(g);
  } else {
    node.grad.accumulate(g);
  }
}

void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward needs a single-element root, got shape " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  // The order owns its nodes so that releasing edges below cannot free a node
  // that is still waiting for its turn.
  std::vector<detail::Node*> order;
  std::vector<std::shared_ptr<detail::Node>> keep_alive;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        keep_alive.push_back(child);
        stack.emplace_back(child.get(), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  accumulate_grad(root.node(), Tensor(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
    // The tape is single-use: drop saved activations and edges.
    node.backward = nullptr;
    node.inputs.clear();
  }
}

}  // namespace poseroi
