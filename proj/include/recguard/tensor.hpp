#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "recguard/rng.hpp"

namespace recguard {

// Dense float tensor, row-major, rank <= 4. Images are CHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

  static Tensor randn(std::vector<int> shape, Rng& rng, float std_dev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<float>(rng.normal()) * std_dev;
    return t;
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dim");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // CHW accessors
  float& at(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  float at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  // matrix accessors
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw std::invalid_argument("reshape numel mismatch");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const Tensor& o) {
    assert(same_shape(o));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }
  void scale_(float s) {
    for (auto& v : data_) v *= s;
  }

  float max_abs() const {
    float m = 0.0f;
    for (float v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  double sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

inline float linf_distance(const Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sq_l2_distance(const Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace recguard
