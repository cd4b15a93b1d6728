#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every operation appends a node holding its value and, when any input
// requires a gradient, a closure that pushes the node's gradient back to its
// inputs. Tape::backward walks the nodes in reverse creation order.

#include "autorig/common.hpp"

#include <functional>
#include <string>
#include <vector>

namespace autorig::nn {

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1 x 1 node.
  T scalar() const { return value()(0, 0); }
};

template <typename T>
class Tape {
 public:
  using M = Matrix<T>;
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var<T> constant(M value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, false, {}});
    return {this, size() - 1};
  }

  /// Constant that aliases external storage; the storage must outlive the tape.
  Var<T> constant_ref(const M& value) {
    nodes_.push_back(Node{{}, &value, {}, false, false, {}});
    return {this, size() - 1};
  }

  /// Leaf bound to a parameter; its gradient is accumulated into `p.grad`.
  Var<T> param(Parameter<T>& p) {
    if (!grad_enabled_) return constant_ref(p.value);
    Parameter<T>* target = &p;
    nodes_.push_back(Node{{}, &p.value, {}, false, true, [target](Tape& t, int self) {
                            if (target->grad.size() == 0) target->grad = M::Zero(target->value.rows(), target->value.cols());
                            target->grad += t.nodes_[self].grad;
                          }});
    return {this, size() - 1};
  }

  /// Appends an operation result. `fn` is kept only if some input needs a gradient.
  Var<T> record(M value, std::initializer_list<Var<T>> inputs, Backward fn) {
    bool req = false;
    if (grad_enabled_)
      for (const Var<T>& v : inputs) req = req || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, req, req ? std::move(fn) : Backward{}});
    return {this, size() - 1};
  }

  Var<T> record(M value, const std::vector<Var<T>>& inputs, Backward fn) {
    bool req = false;
    if (grad_enabled_)
      for (const Var<T>& v : inputs) req = req || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, false, req, req ? std::move(fn) : Backward{}});
    return {this, size() - 1};
  }

  const M& value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  M& grad(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const M& v = value(id);
      n.grad = M::Zero(v.rows(), v.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var<T> loss) {
    if (!grad_enabled_) throw Error("backward on a tape without gradients");
    if (value(loss.id).size() != 1) throw ShapeError("backward needs a scalar loss");
    grad(loss.id)(0, 0) = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    M owned;
    const M* external;
    M grad;
    bool has_grad;
    bool requires_grad;
    Backward backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

}  // namespace autorig::nn
