#include "poseroi/params.hpp"

#include <cmath>

#include "poseroi/error.hpp"

namespace poseroi {

void ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("parameter '" + name + "' registered twice");
  order_.push_back(name);
  values_.emplace(name, std::move(value));
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : values_) n += t.size();
  return n;
}

void ParameterStore::assign(const std::map<std::string, Tensor>& values) {
  for (const std::string& name : order_) {
    auto it = values.find(name);
    if (it == values.end()) throw ShapeError("tensor '" + name + "' missing from the loaded weights");
    if (it->second.shape() != values_.at(name).shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + to_string(it->second.shape()) +
                       " but the model expects " + to_string(values_.at(name).shape()));
    }
  }
  for (const auto& [name, t] : values) {
    if (!contains(name)) throw ShapeError("tensor '" + name + "' is not part of the model");
  }
  for (const std::string& name : order_) values_.at(name) = values.at(name);
}

Tensor he_uniform(const Shape& shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
  return uniform(shape, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

Tensor uniform(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

ParamBinding::ParamBinding(const ParameterStore& store, Predicate trainable)
    : store_(&store), trainable_(std::move(trainable)) {}

Var ParamBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor& value = store_->at(name);
  const bool train = !trainable_ || trainable_(name);
  Var v = train ? Var::leaf(value) : Var::constant(value);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Tensor> ParamBinding::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : bound_) {
    if (v.requires_grad()) out.emplace(name, v.grad());
  }
  return out;
}

}  // namespace poseroi
