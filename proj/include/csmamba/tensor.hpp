#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace csm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles (last axis fastest).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-3 accessor for C x H x W feature maps.
  double& at(std::size_t c, std::size_t r, std::size_t x) {
    return data_[(c * shape_[1] + r) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t r, std::size_t x) const {
    return data_[(c * shape_[1] + r) * shape_[2] + x];
  }

  /// Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  double item() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

}  // namespace csm
