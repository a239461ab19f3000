#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fsad/tensor.hpp"

// Minimal reverse-mode differentiation over Tensor values. Graphs are built
// eagerly by the functions in ops.hpp and released when the last Var
// referencing them goes away.
namespace fsad::ag {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents.
  std::function<void(const Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient w.r.t. this Var; zeros when nothing was accumulated.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_node(Tensor, std::vector<Var>, std::function<void(const Node&)>);
  std::shared_ptr<Node> node_;
};

/// Creates an op result. Backward is kept only when some parent requires
/// gradients.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(const Node&)> backward);

/// Accumulates d(root)/d(leaf) into every reachable leaf with requires_grad.
/// `root` must hold a single value.
void backward(const Var& root);

/// Adds `g` into the grad buffer of `node` when it tracks gradients.
void accumulate(Node& node, const Tensor& g);

}  // namespace fsad::ag
