// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fersnet/tensor.hpp"

namespace fersnet {

/// One node of the reverse-mode tape. Values are written once at creation;
/// gradients are accumulated during backward().
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;  // reads this->grad, accumulates into parents

  bool has_grad() const { return grad.defined(); }
  Tensor<T>& ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Shared handle to a tape node. Copying a Var aliases the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false) : n_(std::make_shared<Node<T>>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  static Var param(Tensor<T> v) { return Var(std::move(v), true); }
  static Var constant(Tensor<T> v) { return Var(std::move(v), false); }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& value() const { return n_->value; }
  Tensor<T>& value() { return n_->value; }
  const Tensor<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  const Shape& shape() const { return n_->value.shape(); }
  long long numel() const { return n_->value.numel(); }
  T item() const {
    if (numel() != 1) throw InputError("item() requires a scalar tensor");
    return n_->value[0];
  }

  void zero_grad() {
    if (n_->has_grad())
      n_->grad.zero();
  }

  /// Leaf copy of the value; gradients do not flow past it.
  Var detach() const { return Var(n_->value, false); }

  /// Reverse pass from a scalar root. Accumulates into every reachable
  /// requires_grad node (leaves keep their grads; interior nodes are
  /// discarded with the graph).
  void backward() const {
    if (numel() != 1) throw InputError("backward() requires a scalar loss");
    // Iterative post-order topological sort.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

/// Create an interior node. requires_grad is inherited from the parents;
/// the backward fn is dropped when no parent needs gradients.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  Var<T> out(std::move(value), rg);
  if (rg) {
    auto n = out.node();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace fersnet
