#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oavnn/errors.hpp"

namespace oavnn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

/// Dense row-major double tensor. Plain value type; the tape, the layers and
/// the geometry code all exchange data through it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec3(double x, double y, double z) { return Tensor({3}, {x, y, z}); }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int64_t extent(int axis) const;  // negative axes count from the back

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  /// Same buffer reinterpreted under a new shape; numel must match.
  Tensor reshaped(Shape s) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Resolve an axis index, allowing negatives; throws ContractError when out of range.
int64_t resolve_axis(const Shape& s, int axis);

inline double sq(double x) { return x * x; }

}  // namespace oavnn
