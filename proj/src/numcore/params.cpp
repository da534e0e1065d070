#include "moh/numcore/params.hpp"

#include <stdexcept>

namespace moh::nc {

template <typename T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init, bool decay) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
  it->second.name = name;
  it->second.grad = Tensor<T>(init.shape);
  it->second.value = std::move(init);
  it->second.decay = decay;
  return it->second;
}

template <typename T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& kv : params_) out.push_back(kv.first);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& kv : params_) n += kv.second.value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& kv : params_) std::fill(kv.second.grad.data.begin(), kv.second.grad.data.end(), T(0));
}

template <typename T>
Var<T> Binder<T>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var<T> v = tape_.parameter(store_.get(name));
  bound_.emplace(name, v);
  return v;
}

template <typename T>
Tensor<T> truncated_normal(const Shape& shape, double std, CounterRng rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.truncated_normal(std));
  return t;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Binder<float>;
template class Binder<double>;
template Tensor<float> truncated_normal<float>(const Shape&, double, CounterRng);
template Tensor<double> truncated_normal<double>(const Shape&, double, CounterRng);

}  // namespace moh::nc
