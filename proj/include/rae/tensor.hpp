#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rae/error.hpp"
#include "rae/rng.hpp"

namespace rae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_count(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Element type is double by default throughout the
// library; float instantiations exist for faster training runs.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_count(shape_), T{}) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_count(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
  }
  static Tensor ones(Shape s) { return full(std::move(s), T{1}); }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor t(std::move(s));
    for (auto& x : t.data_) x = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }
  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  std::size_t rows() const {
    require_2d("rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_2d("cols");
    return shape_[1];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T item() const {
    if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (shape_count(s) != size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  void fill(T v) {
    for (auto& x : data_) x = v;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  const std::vector<T>& values() const { return data_; }

 private:
  void require_2d(const char* what) const {
    if (shape_.size() != 2) throw ShapeError(std::string(what) + ": tensor is not 2-D, shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i])) return false;
  return true;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace rae
