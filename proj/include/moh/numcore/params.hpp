#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "moh/numcore/rng.hpp"
#include "moh/numcore/tape.hpp"

namespace moh::nc {

/// Named parameters in a deterministic (sorted) order.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init, bool decay = true);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.decay);
    return out;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

/// Binds parameters onto one tape, creating each node at most once.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamStore<T>& store) : tape_(tape), store_(store) {}

  Var<T> operator()(const std::string& name);
  Tape<T>& tape() { return tape_; }
  ParamStore<T>& store() { return store_; }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  std::unordered_map<std::string, Var<T>> bound_;
};

// Initializers. Each parameter draws from its own stream derived from its
// name, so adding or removing parameters never shifts the others.
template <typename T>
Tensor<T> truncated_normal(const Shape& shape, double std, CounterRng rng);
template <typename T>
Tensor<T> zeros(const Shape& shape) {
  return Tensor<T>(shape);
}
template <typename T>
Tensor<T> ones(const Shape& shape) {
  return Tensor<T>(shape, T(1));
}

}  // namespace moh::nc
