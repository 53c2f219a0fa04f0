#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aitl {

/// Dense row-major float32 tensor. Images are stored as H x W x C.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
  }
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("Tensor: data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, float value) {
    Tensor t(std::move(s));
    for (float& v : t.data) v = value;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float& operator[](size_t i) { return data[i]; }
  float operator[](size_t i) const { return data[i]; }

  // H x W x C access
  float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c]; }

  // 2-D access (rows x cols)
  float& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

inline bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

inline double l1_norm(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data) s += std::fabs(static_cast<double>(v));
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - b.data[i]));
  return m;
}

inline void clamp01_inplace(Tensor& t) {
  for (float& v : t.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
}

inline Tensor clamped01(Tensor t) {
  clamp01_inplace(t);
  return t;
}

}  // namespace aitl
