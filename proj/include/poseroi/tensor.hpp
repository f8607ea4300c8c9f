#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace poseroi {

/// Extents of a tensor, outermost first. Feature maps are channels-first
/// (C x H x W).
using Shape = std::vector<int>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense fp64 n-dimensional array in row-major layout.
///
/// A default-constructed Tensor is empty (no shape, no data) and is used as a
/// "not yet allocated" marker, e.g. for gradients. Every non-empty tensor
/// satisfies product(shape) == size() with all extents >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, value); }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Channels-first accessors; rank must be 3.
  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  /// Same data viewed under a new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  void fill(double value);
  /// this += other (shapes must match).
  void accumulate(const Tensor& other);
  /// this += alpha * other (shapes must match).
  void accumulate(const Tensor& other, double alpha);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws ShapeError unless the shapes are identical.
void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

/// Sum of elementwise products.
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace poseroi
