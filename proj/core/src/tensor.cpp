#include "fsad/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace fsad {

std::string to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor of shape " + to_string(shape_) + " given " + std::to_string(data_.size()) +
                     " values");
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::item_size() const {
  if (shape_.empty()) return 1;
  return shape_[0] == 0 ? shape_size(Shape(shape_.begin() + 1, shape_.end())) : data_.size() / shape_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::slice(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     to_string(shape_));
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t n = item_size();
  return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * n)));
}

Tensor Tensor::item(int index) const {
  Tensor t = slice(index, index + 1);
  return t.reshaped(Shape(shape_.begin() + 1, shape_.end()));
}

void Tensor::set_item(int index, const Tensor& value) {
  const std::size_t n = item_size();
  if (index < 0 || index >= dim(0) || value.size() != n) {
    throw ShapeError("set_item mismatch for " + to_string(shape_));
  }
  std::copy(value.storage().begin(), value.storage().end(), data_.begin() + static_cast<std::ptrdiff_t>(index * n));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Shape s = items.front().shape();
  std::vector<double> values;
  values.reserve(items.size() * items.front().size());
  for (const Tensor& t : items) {
    if (t.shape() != s) throw ShapeError("stack shape mismatch: " + to_string(t.shape()) + " vs " + to_string(s));
    values.insert(values.end(), t.storage().begin(), t.storage().end());
  }
  s.insert(s.begin(), static_cast<int>(items.size()));
  return Tensor(std::move(s), std::move(values));
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  int rows = 0;
  std::vector<double> values;
  for (const Tensor& t : parts) {
    if (t.rank() == 0 || Shape(t.shape().begin() + 1, t.shape().end()) != tail) {
      throw ShapeError("concat shape mismatch at " + to_string(t.shape()));
    }
    rows += t.dim(0);
    values.insert(values.end(), t.storage().begin(), t.storage().end());
  }
  tail.insert(tail.begin(), rows);
  return Tensor(std::move(tail), std::move(values));
}

void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape() != expected) {
    throw ShapeError(what + ": expected shape " + to_string(expected) + ", got " + to_string(t.shape()));
  }
}

}  // namespace fsad
