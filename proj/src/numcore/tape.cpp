#include "moh/numcore/tape.hpp"

#include <algorithm>

namespace moh::nc {

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.own = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value, bool requires_grad) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad && record_;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  Node n;
  n.external = &param.value;
  if (record_) {
    n.requires_grad = true;
    n.param_grad = &param.grad;
    if (param.grad.shape != param.value.shape) param.grad = Tensor<T>(param.value.shape);
  }
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
  Node n;
  n.own = std::move(value);
  if (record_) {
    for (const auto& v : inputs) {
      if (v.tape != this) throw std::logic_error("op mixes variables from different tapes");
      if (nodes_[v.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

template <typename T>
const Tensor<T>& Tape<T>::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.own;
}

template <typename T>
Buffer<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad_tensor(Var<T> v) const {
  const Node& n = nodes_[v.id];
  Tensor<T> out(value(v.id).shape);
  if (!n.grad.empty()) out.data = n.grad;
  return out;
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (value(root.id).size() != 1) {
    throw DimensionError("backward() root must be scalar, got shape " +
                         to_string(value(root.id).shape));
  }
  if (!nodes_[root.id].requires_grad) return;
  grad(root.id)[0] = T(1);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param_grad) {
      auto& pg = n.param_grad->data;
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace moh::nc
