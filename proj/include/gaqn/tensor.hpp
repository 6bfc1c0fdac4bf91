#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace gaqn {

/// Storage aligned for Eigen's vector units, so kernels take the same code path on every run.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Raised whenever operand shapes disagree with what an operation expects.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

/// Dense row-major tensor. Image batches are laid out NCHW.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(std::vector<int> shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }
  Tensor(std::vector<int> shape, const std::vector<T>& data)
      : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(std::vector<int> shape) const& {
    if (shape_numel(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Slice along the leading dimension.
  Tensor rows(int begin, int count) const {
    if (rank() < 1 || begin < 0 || begin + count > shape_[0]) throw ShapeError("row slice out of range");
    const std::size_t stride = size() / static_cast<std::size_t>(shape_[0]);
    std::vector<int> s = shape_;
    s[0] = count;
    AlignedVector<T> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                     data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return Tensor(std::move(s), std::move(d));
  }

  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  std::vector<int> shape_;
  AlignedVector<T> data_;
};

template <class U, class T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  AlignedVector<U> d(t.size());
  std::transform(t.storage().begin(), t.storage().end(), d.begin(), [](T v) { return static_cast<U>(v); });
  return Tensor<U>(t.shape(), std::move(d));
}

/// Stack equally shaped tensors along a new leading dimension.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("cannot stack an empty list");
  std::vector<int> s{static_cast<int>(items.size())};
  for (int d : items[0].shape()) s.push_back(d);
  AlignedVector<T> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) throw ShapeError("stack: mixed shapes");
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

/// Concatenate along the leading dimension.
template <class T>
Tensor<T> concat_rows(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("cannot concatenate an empty list");
  std::vector<int> s = items[0].shape();
  s[0] = 0;
  AlignedVector<T> data;
  for (const auto& t : items) {
    if (t.rank() != items[0].rank() ||
        !std::equal(t.shape().begin() + 1, t.shape().end(), items[0].shape().begin() + 1))
      throw ShapeError("concat_rows: trailing shapes differ");
    s[0] += t.dim(0);
    data.insert(data.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.storage().begin(), t.storage().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace gaqn
