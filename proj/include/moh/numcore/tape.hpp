#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moh/numcore/tensor.hpp"

namespace moh::nc {

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  /// Invalidated once the tape records further nodes.
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

/// Trainable array with an accumulated gradient slot of the same shape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;  // subject to decoupled weight decay
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order; backward() walks it once in reverse.
///
/// A tape built with record=false keeps values only (inference mode).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value);
  Var<T> input(Tensor<T> value, bool requires_grad);
  /// Binds a parameter without copying; backward() adds into param.grad.
  Var<T> parameter(Parameter<T>& param);

  /// Appends an op result. `fn` runs during backward only if some input
  /// requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);

  const Tensor<T>& value(int id) const;
  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Buffer<T>& grad(int id);
  Buffer<T>& grad(Var<T> v) { return grad(v.id); }
  /// Gradient of a node after backward(); zeros if it received none.
  Tensor<T> grad_tensor(Var<T> v) const;

  /// Seeds d(root)/d(root) = 1 and propagates. Root must be a scalar.
  void backward(Var<T> root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* external = nullptr;
    Tensor<T>* param_grad = nullptr;
    Buffer<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Node node);

  bool record_;
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace moh::nc
