#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsad {

using Shape = std::vector<int>;

/// Cache-line aligned allocation. Vectorised reductions split work by the
/// alignment of the data pointer, so a fixed alignment keeps results
/// bitwise reproducible across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::string to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles. Images are stored as (C, H, W),
/// batches as (B, C, H, W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Size of one entry along the leading axis.
  std::size_t item_size() const;

  Tensor reshaped(Shape shape) const;
  /// Rows [begin, end) along the leading axis.
  Tensor slice(int begin, int end) const;
  /// Entry `index` along the leading axis with that axis dropped.
  Tensor item(int index) const;
  void set_item(int index, const Tensor& value);

  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
/// Concatenates along the existing leading axis.
Tensor concat(std::span<const Tensor> parts);

void require_shape(const Tensor& t, const Shape& expected, const std::string& what);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace fsad
