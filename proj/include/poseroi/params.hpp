#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "poseroi/autograd.hpp"
#include "poseroi/geometry.hpp"

namespace poseroi {

/// Named weight tensors in registration order.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  const std::vector<std::string>& names() const { return order_; }
  std::size_t parameter_count() const;

  /// Replaces every tensor from `values`, which must hold exactly the same
  /// names and shapes (ShapeError names the first offending tensor).
  void assign(const std::map<std::string, Tensor>& values);

  bool operator==(const ParameterStore&) const = default;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> values_;
};

/// He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)) with fan_in the product
/// of all extents after the first.
Tensor he_uniform(const Shape& shape, Rng& rng);

/// Uniform in [-bound, bound].
Tensor uniform(const Shape& shape, double bound, Rng& rng);

/// One forward pass's view of a ParameterStore. Each parameter becomes a
/// graph leaf the first time it is requested; parameters rejected by the
/// `trainable` predicate enter the graph as constants.
class ParamBinding {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  explicit ParamBinding(const ParameterStore& store, Predicate trainable = {});

  Var operator()(const std::string& name);

  /// Gradients of every trainable parameter used so far (zeros if the
  /// backward pass did not reach it).
  std::map<std::string, Tensor> gradients() const;

 private:
  const ParameterStore* store_;
  Predicate trainable_;
  std::map<std::string, Var> bound_;
};

}  // namespace poseroi
