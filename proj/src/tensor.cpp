#include "oavnn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace oavnn {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw ContractError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
    throw ContractError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

int64_t Tensor::extent(int axis) const { return shape_[resolve_axis(shape_, axis)]; }

Tensor Tensor::reshaped(Shape s) const {
  if (shape_numel(s) != size())
    throw ContractError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                        " changes element count");
  Tensor t;
  t.shape_ = std::move(s);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

int64_t resolve_axis(const Shape& s, int axis) {
  int64_t nd = static_cast<int64_t>(s.size());
  int64_t a = axis < 0 ? nd + axis : axis;
  if (a < 0 || a >= nd)
    throw ContractError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return a;
}

}  // namespace oavnn
