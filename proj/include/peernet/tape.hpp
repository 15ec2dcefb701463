#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "peernet/error.hpp"
#include "peernet/tensor.hpp"

namespace peernet {

// A learnable tensor. The gradient buffer is allocated on first use so that
// large models built only for cost accounting stay cheap.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  i64 size() const { return value.size(); }

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }

  void zero_grad() {
    if (grad.empty())
      grad = Tensor(value.shape());
    else
      grad.fill(0.0);
  }
};

// Reverse-mode tape. Operations append nodes in evaluation order; backward()
// walks the list once, in strict reverse recording order. Parents always
// precede children because a node's inputs must exist before it is recorded.
class Tape {
public:
  using NodeId = int;
  static constexpr NodeId kNone = -1;

  using BackFn = std::function<void(Tape&, const Tensor& out_grad)>;

  NodeId record(const Shape5& shape, BackFn back) {
    nodes_.push_back(Node{shape, Tensor{}, std::move(back), nullptr});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId record_leaf(Parameter* param, const Shape5& shape) {
    nodes_.push_back(Node{shape, Tensor{}, BackFn{}, param});
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  // Gradient buffer for a node, allocated as zeros on first access.
  Tensor& grad_buffer(NodeId id) {
    Node& n = nodes_.at(static_cast<size_t>(id));
    if (n.grad.empty()) n.grad = Tensor(n.shape);
    return n.grad;
  }

  const Tensor& grad(NodeId id) { return grad_buffer(id); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Leaf nodes bound to parameters
  // accumulate into Parameter::grad. Single-shot per tape.
  void backward(NodeId loss) {
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size())) {
      throw ShapeError("backward: invalid loss node");
    }
    if (nodes_[static_cast<size_t>(loss)].shape.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       nodes_[static_cast<size_t>(loss)].shape.str());
    }
    if (backward_done_) throw NumericError("backward: tape already consumed");
    backward_done_ = true;

    grad_buffer(loss)[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.empty()) continue;  // not reachable from the loss
      if (n.back) n.back(*this, n.grad);
      if (n.param) {
        Tensor& pg = n.param->ensure_grad();
        const Tensor& g = n.grad;
        for (i64 i = 0; i < g.size(); ++i) pg[i] += g[i];
      }
    }
  }

  size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

private:
  struct Node {
    Shape5 shape;
    Tensor grad;
    BackFn back;
    Parameter* param;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// A tensor value that may participate in a tape. Constants carry no tape.
class TensorValue {
public:
  TensorValue() = default;
  explicit TensorValue(Tensor v) : value_(std::move(v)) {}
  TensorValue(Tensor v, Tape* tape, Tape::NodeId node)
      : value_(std::move(v)), tape_(tape), node_(node) {}

  const Tensor& value() const { return value_; }
  const Shape5& shape() const { return value_.shape(); }

  bool recorded() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  Tape::NodeId node() const { return node_; }

  // Gradient after backward(); zeros if the value did not influence the loss.
  const Tensor& grad() const {
    if (!recorded()) throw NumericError("grad() on a constant tensor");
    return tape_->grad(node_);
  }

private:
  Tensor value_;
  Tape* tape_ = nullptr;
  Tape::NodeId node_ = Tape::kNone;
};

// Registers a parameter as a differentiable leaf on the tape.
inline TensorValue watch(Tape& tape, Parameter& p) {
  return TensorValue(p.value, &tape, tape.record_leaf(&p, p.value.shape()));
}

inline TensorValue constant(Tensor v) { return TensorValue(std::move(v)); }

}  // namespace peernet
