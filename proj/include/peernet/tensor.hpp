#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "peernet/error.hpp"

namespace peernet {

using i64 = long long;

// Dense 5-D layout: [batch, time, height, width, channel], channel fastest.
struct Shape5 {
  i64 n = 1, t = 1, h = 1, w = 1, c = 1;

  i64 numel() const { return n * t * h * w * c; }
  bool operator==(const Shape5&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << t << "," << h << "," << w << "," << c << ")";
    return os.str();
  }
};

class Tensor {
public:
  Tensor() = default;

  explicit Tensor(const Shape5& s, double fill = 0.0)
      : shape_(s), data_(static_cast<size_t>(s.numel()), fill) {}

  Tensor(const Shape5& s, std::vector<double> data) : shape_(s), data_(std::move(data)) {
    if (static_cast<i64>(data_.size()) != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape5{}, std::vector<double>{v}); }

  const Shape5& shape() const { return shape_; }
  i64 size() const { return static_cast<i64>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](i64 i) { return data_[static_cast<size_t>(i)]; }
  double operator[](i64 i) const { return data_[static_cast<size_t>(i)]; }

  i64 offset(i64 n, i64 t, i64 h, i64 w, i64 c) const {
    return ((((n * shape_.t + t) * shape_.h + h) * shape_.w + w) * shape_.c + c);
  }

  double& at(i64 n, i64 t, i64 h, i64 w, i64 c) { return data_[static_cast<size_t>(offset(n, t, h, w, c))]; }
  const double& at(i64 n, i64 t, i64 h, i64 w, i64 c) const {
    return data_[static_cast<size_t>(offset(n, t, h, w, c))];
  }

  // Value of a one-element tensor.
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
  Shape5 shape_;
  std::vector<double> data_;
};

}  // namespace peernet
