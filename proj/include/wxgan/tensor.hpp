#pragma once

// Dense row-major tensor. Production code instantiates S = float (32-bit
// storage contract); tests instantiate S = double to re-evaluate forward
// passes at higher precision for finite-difference oracles.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "wxgan/common.hpp"

namespace wxgan {

template <class S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> sh) : shape(std::move(sh)), data(size_t(numel_of(shape)), S(0)) {}
  TensorT(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if (int64_t(data.size()) != numel_of(shape)) throw ShapeError("tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& sh) {
    int64_t n = 1;
    for (int d : sh) {
      if (d <= 0) throw ShapeError("tensor dims must be positive");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return int64_t(data.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  int ndim() const { return int(shape.size()); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& at(int64_t i) { return data[size_t(i)]; }
  S at(int64_t i) const { return data[size_t(i)]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  template <class S2>
  TensorT<S2> cast() const {
    TensorT<S2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = S2(data[i]);
    return out;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& sh) {
  std::string s = "(";
  for (size_t i = 0; i < sh.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(sh[i]);
  }
  return s + ")";
}

template <class S>
void require_shape(const TensorT<S>& t, const std::vector<int>& sh, const char* what) {
  if (t.shape != sh)
    throw ShapeError(std::string(what) + ": expected " + shape_str(sh) + ", got " + shape_str(t.shape));
}

// trainable value + gradient accumulator, zeroed between optimization steps
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.fill(0.0f); }
};

}  // namespace wxgan
