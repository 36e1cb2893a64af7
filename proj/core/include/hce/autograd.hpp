#pragma once

#include <cassert>
#include <deque>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hce/tensor.hpp"

namespace hce::ag {

// Define-by-run reverse-mode tape. Ops append nodes in topological order;
// backward() walks the tape in reverse, invoking each node's closure to
// scatter its output gradient into its parents.
struct Var {
  int id = -1;
  bool ok() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  // Constant input; gradients are never propagated into it.
  Var leaf(Tensor<T> v) {
    nodes_.push_back(Node{std::move(v), nullptr, {}, {}, nullptr, false});
    nodes_.back().pv = &nodes_.back().store;
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Trainable parameter living outside the tape. The tape reads values
  // through the pointer and accumulates gradients in its own buffer.
  Var param(Tensor<T>* p) {
    nodes_.push_back(Node{{}, p, {}, {}, nullptr, true});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var node(Tensor<T> out, std::vector<Var> parents, BackFn back) {
    bool rg = false;
    std::vector<int> pids;
    pids.reserve(parents.size());
    for (Var p : parents) {
      pids.push_back(p.id);
      rg = rg || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
    }
    nodes_.push_back(Node{std::move(out), nullptr, std::move(pids), {},
                          rg ? std::move(back) : nullptr, rg});
    nodes_.back().pv = &nodes_.back().store;
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<T>& val(Var v) { return *nodes_[static_cast<std::size_t>(v.id)].pv; }
  const Tensor<T>& val(Var v) const { return *nodes_[static_cast<std::size_t>(v.id)].pv; }

  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Lazily allocated zero-initialized gradient buffer for a node.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.shape != n.pv->shape) n.grad = Tensor<T>(n.pv->shape);
    return n.grad;
  }

  // Pointer to the gradient buffer if this node participates in backward,
  // nullptr otherwise. Op closures use this to skip constants.
  Tensor<T>* grad_if_needed(Var v) {
    return needs_grad(v) ? &grad(v) : nullptr;
  }

  // Backpropagate from a scalar root.
  void backward(Var root) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.pv->numel() != 1) throw std::logic_error("backward root must be scalar");
    grad(root).v[0] = T(1);
    std::vector<char> need(nodes_.size(), 0);
    need[static_cast<std::size_t>(root.id)] = 1;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!need[static_cast<std::size_t>(i)] || !n.requires_grad) continue;
      for (int p : n.parents) need[static_cast<std::size_t>(p)] = 1;
      if (n.back) n.back(*this, i);
    }
  }

  const std::vector<int>& parents(Var v) const {
    return nodes_[static_cast<std::size_t>(v.id)].parents;
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> store;
    Tensor<T>* pv = nullptr;
    std::vector<int> parents;
    Tensor<T> grad;
    BackFn back;
    bool requires_grad = false;
  };
  // deque keeps element references stable across push_back; pv self-pointers
  // and val() references rely on that.
  std::deque<Node> nodes_;
};

}  // namespace hce::ag
