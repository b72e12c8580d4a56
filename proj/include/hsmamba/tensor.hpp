#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hsmamba/errors.hpp"

namespace hsmamba {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Dense row-major N-d array of 64-bit floats. All tensor math in the library
// runs through this one container; shape and buffer length always agree.
class NdArray {
 public:
  NdArray() = default;

  explicit NdArray(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

  NdArray(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("NdArray: shape " + shape_str(shape_) + " does not match buffer of " +
                       std::to_string(data_.size()) + " values");
  }

  static NdArray zeros(Shape s) { return NdArray(std::move(s)); }

  static NdArray full(Shape s, double v) {
    NdArray a(std::move(s));
    for (double& x : a.data_) x = v;
    return a;
  }

  static NdArray scalar(double v) { return NdArray({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }

  NdArray reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s) +
                       " changes element count");
    return NdArray(std::move(s), data_);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0, axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw ShapeError("index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const NdArray& a, const NdArray& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace hsmamba
