#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "micronet/common.hpp"
#include "micronet/rng.hpp"

namespace micronet {

/// Dense NCHW tensor, row-major (w fastest). Also used as a conv-weight
/// container with layout (out_channels, in_channels_per_group, kh, kw).
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0, 0, 0, 0} {}

  Tensor(int n, int c, int h, int w, T fill = T(0)) : shape_{n, c, h, w} {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw DimensionError("tensor dims must be >= 1, got " + shape_.str());
    }
    data_.assign(static_cast<std::size_t>(shape_.numel()), fill);
  }

  explicit Tensor(const Shape4& s, T fill = T(0))
      : Tensor(s.n, s.c, s.h, s.w, fill) {}

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void fill_normal(Rng& rng, double mean, double stddev) {
    for (auto& v : data_) v = static_cast<T>(rng.normal(mean, stddev));
  }

  void fill_uniform(Rng& rng, double lo, double hi) {
    for (auto& v : data_) v = static_cast<T>(rng.uniform(lo, hi));
  }

  /// Elementwise max-abs difference against another tensor of equal shape.
  double max_abs_diff(const Tensor& o) const {
    if (shape_ != o.shape_) {
      throw DimensionError("max_abs_diff shape mismatch " + shape_.str() +
                           " vs " + o.shape_.str());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) {
      m = std::max(m, std::abs(static_cast<double>(data_[i]) -
                               static_cast<double>(o.data_[i])));
    }
    return m;
  }

  /// Convert element type (float <-> double twin kernels).
  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_.n, shape_.c, shape_.h, shape_.w);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

}  // namespace micronet
