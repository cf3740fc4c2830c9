#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <utility>
#include <vector>

#include "caplab/errors.hpp"

namespace caplab {

// Dense row-major array of 64-bit reals. Rank 0 (empty shape) is a scalar.
// Invariant: product(shape) == data.size() at all times.
struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Array() = default;

  explicit Array(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  Array(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("array data length does not match shape");
    }
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Array scalar(double v) {
    Array a;
    a.data.assign(1, v);
    return a;
  }

  static Array vec(std::vector<double> d) {
    Array a;
    a.shape = {d.size()};
    a.data = std::move(d);
    return a;
  }

  static Array zeros(std::initializer_list<std::size_t> s) {
    return Array(std::vector<std::size_t>(s));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return numel() == 1; }
  bool same_shape(const Array& o) const { return shape == o.shape; }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("rows() needs a rank-2 array");
    return shape[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols() needs a rank-2 array");
    return shape[1];
  }

  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

}  // namespace caplab
