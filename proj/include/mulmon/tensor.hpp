#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "mulmon/common.hpp"

namespace mulmon {

// Dense row-major shape, up to 4 axes. Axis conventions used throughout:
//   [K, D]        slot vectors
//   [K, C, H, W]  per-slot image stacks
//   [C, H, W]     a single image
struct Shape {
  std::array<int64_t, 4> d{1, 1, 1, 1};
  int ndim = 0;

  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    MULMON_CHECK(dims.size() <= 4, "shape rank > 4");
    ndim = static_cast<int>(dims.size());
    int i = 0;
    for (auto v : dims) d[i++] = v;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < ndim; ++i) n *= d[i];
    return ndim == 0 ? 0 : n;
  }
  int64_t operator[](int i) const { return d[i]; }
  bool operator==(const Shape& o) const {
    if (ndim != o.ndim) return false;
    for (int i = 0; i < ndim; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < ndim; ++i) s += std::to_string(d[i]) + (i + 1 < ndim ? "," : "");
    return s + "]";
  }
};

template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), v(static_cast<size_t>(s.numel()), S(0)) {}
  Tensor(Shape s, S fill) : shape(s), v(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, S x) { return Tensor(s, x); }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  S& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  const S& at(int64_t i) const { return v[static_cast<size_t>(i)]; }

  // 2-D / 3-D / 4-D indexing (row-major)
  S& at(int64_t i, int64_t j) { return v[i * shape.d[1] + j]; }
  const S& at(int64_t i, int64_t j) const { return v[i * shape.d[1] + j]; }
  S& at(int64_t i, int64_t j, int64_t k) {
    return v[(i * shape.d[1] + j) * shape.d[2] + k];
  }
  const S& at(int64_t i, int64_t j, int64_t k) const {
    return v[(i * shape.d[1] + j) * shape.d[2] + k];
  }
  S& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return v[((i * shape.d[1] + j) * shape.d[2] + k) * shape.d[3] + l];
  }
  const S& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return v[((i * shape.d[1] + j) * shape.d[2] + k) * shape.d[3] + l];
  }

  bool all_finite() const {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  MULMON_CHECK(a.shape == b.shape, "max_abs_diff shape mismatch ", a.shape.str(),
               " vs ", b.shape.str());
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i])));
  return m;
}

}  // namespace mulmon
