#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "robustda/diffcore/tensor.hpp"

namespace robustda {

/// Handle to a value slot on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode recording of primitive operations. Nodes are appended in
/// execution order, so the node list is already topologically sorted and the
/// backward pass is a single reverse sweep. A tape supports one backward pass.
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor value, bool requires_grad = true) {
    require_finite(value, "tape leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Appends the result of a primitive. `inputs` are the slots the backward
  /// function reads; the node needs a gradient iff any input does.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
    bool needs = false;
    for (auto v : inputs) {
      check(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient of the last backward root with respect to v. Slots that the
  /// root does not depend on report zeros.
  Tensor grad(Var v) const {
    check(v);
    const Node& n = nodes_[v.id];
    if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0);
    return n.grad;
  }

  /// Adds g into the gradient slot of node id.
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.data.empty()) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
  }

  /// Raw gradient buffer of node id, allocated on demand.
  double* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad.data.data();
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var root, const Tensor& seed) {
    check(root);
    if (consumed_) throw Error("tape: backward called on a consumed tape");
    consumed_ = true;
    const Node& r = nodes_[root.id];
    if (!seed.same_shape(r.value))
      throw ShapeError("tape: loss gradient shape " + shape_str(seed.shape) +
                       " does not match terminal shape " + shape_str(r.value.shape));
    if (!r.requires_grad) return;
    nodes_[root.id].grad = seed;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.data.empty()) continue;
      n.backward(*this, id);
    }
  }

  /// Backward from a scalar root with seed 1.
  void backward(Var root) {
    const auto& shape = value(root).shape;
    if (Tensor::numel(shape) != 1)
      throw ShapeError("tape: implicit seed requires a scalar root, got " + shape_str(shape));
    backward(root, Tensor(shape, 1.0));
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check(Var v) const {
    if (v.id >= nodes_.size()) throw Error("tape: unknown slot " + std::to_string(v.id));
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace robustda
