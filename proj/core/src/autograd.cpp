#include "fsad/autograd.hpp"

#include <unordered_set>

namespace fsad::ag {

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(const Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->parents.reserve(parents.size());
    for (Var& p : parents) out.node_->parents.push_back(p.node());
  }
  return out;
}

void accumulate(Node& node, const Tensor& g) {
  if (!node.requires_grad) return;
  Tensor& buf = node.grad_buffer();
  if (buf.size() != g.size()) throw ShapeError("gradient shape mismatch " + to_string(g.shape()));
  double* dst = buf.ptr();
  const double* src = g.ptr();
  for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += src[i];
}

void backward(const Var& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw std::invalid_argument("backward requires a scalar root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && p->backward && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate grads are transient; leaves keep accumulating.
  for (Node* n : order) n->grad = Tensor();
  root.node()->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->grad.empty() && n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    if (n != root.node().get()) n->grad = Tensor();
  }
}

}  // namespace fsad::ag
