#pragma once

#include <cassert>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hce {

// Dense row-major tensor with value semantics. Rank is dynamic; shapes are
// small so a std::vector<int> shape is fine.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    v.assign(numel_of(shape), fill);
  }
  Tensor(std::initializer_list<int> s, T fill = T(0)) : Tensor(std::vector<int>(s), fill) {}

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dim");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t numel() const { return v.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::size_t i) { return v[i]; }
  const T& operator[](std::size_t i) const { return v[i]; }

  // Indexing helpers for the common ranks.
  T& at(int i, int j) { return v[static_cast<std::size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return v[static_cast<std::size_t>(i) * dim(1) + j]; }
  T& at(int c, int y, int x) {
    return v[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  const T& at(int c, int y, int x) const {
    return v[(static_cast<std::size_t>(c) * dim(1) + y) * dim(2) + x];
  }
  T& at(int n, int c, int y, int x) {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != numel()) throw std::invalid_argument("reshape numel mismatch");
    Tensor out;
    out.shape = std::move(s);
    out.v = v;
    return out;
  }

  void fill(T x) { std::fill(v.begin(), v.end(), x); }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  assert(a.same_shape(b));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] += b.v[i];
  return out;
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
  Tensor<To> out;
  out.shape = a.shape;
  out.v.resize(a.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = static_cast<To>(a.v[i]);
  return out;
}

}  // namespace hce
