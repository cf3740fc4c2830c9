#pragma once

#include <cmath>
#include <cstddef>

#include "caplab/array.hpp"
#include "caplab/errors.hpp"

// Shared numeric kernels. Both the autodiff tape and the raw (gradient-free)
// decode path call these, so the two paths agree bit-for-bit by construction.
// All loops run in a fixed order; nothing here is parallel or stateful.

namespace caplab::kernels {

inline Array matvec(const Array& w, const Array& x) {
  if (w.rank() != 2 || x.rank() != 1 || w.cols() != x.shape[0]) {
    throw ShapeError("matvec expects {m,n} x {n}");
  }
  const std::size_t m = w.rows(), n = w.cols();
  Array y({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* row = &w.data[i * n];
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * x.data[j];
    y.data[i] = acc;
  }
  return y;
}

inline Array matmul2(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul expects {m,n} x {n,p}");
  }
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  Array y({m, p});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a.data[i * n + k];
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) {
        y.data[i * p + j] += aik * b.data[k * p + j];
      }
    }
  }
  return y;
}

inline Array add_same(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw ShapeError("add expects matching shapes");
  Array y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += b.data[i];
  return y;
}

// {m,n} + {n}: the only broadcast the library supports (row-vector bias).
inline Array add_rowvec(const Array& m, const Array& r) {
  if (m.rank() != 2 || r.rank() != 1 || m.cols() != r.shape[0]) {
    throw ShapeError("row-vector add expects {m,n} + {n}");
  }
  Array y = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) y.data[i * m.cols() + j] += r.data[j];
  }
  return y;
}

inline Array tanh_arr(const Array& a) {
  Array y = a;
  for (double& v : y.data) v = std::tanh(v);
  return y;
}

inline Array sigmoid_arr(const Array& a) {
  Array y = a;
  for (double& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
  return y;
}

inline Array log_arr(const Array& a) {
  Array y = a;
  for (double& v : y.data) v = std::log(v);
  return y;
}

// Softmax over the last axis, max-subtracted for stability. Outputs are in
// (0,1) and every slice sums to 1 up to rounding.
inline Array softmax_last(const Array& a) {
  if (a.rank() == 0 || a.shape.back() == 0) {
    throw ShapeError("softmax needs a non-empty last axis");
  }
  const std::size_t n = a.shape.back();
  const std::size_t slices = a.numel() / n;
  Array y = a;
  for (std::size_t s = 0; s < slices; ++s) {
    double* v = &y.data[s * n];
    double mx = v[0];
    for (std::size_t j = 1; j < n; ++j) mx = v[j] > mx ? v[j] : mx;
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      v[j] = std::exp(v[j] - mx);
      total += v[j];
    }
    for (std::size_t j = 0; j < n; ++j) v[j] /= total;
  }
  return y;
}

inline Array concat1d(const Array& a, const Array& b) {
  if (a.rank() != 1 || b.rank() != 1) throw ShapeError("concat expects two vectors");
  Array y({a.shape[0] + b.shape[0]});
  for (std::size_t i = 0; i < a.numel(); ++i) y.data[i] = a.data[i];
  for (std::size_t i = 0; i < b.numel(); ++i) y.data[a.numel() + i] = b.data[i];
  return y;
}

inline Array hadamard(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw ShapeError("elementwise mul expects matching shapes");
  Array y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] *= b.data[i];
  return y;
}

inline Array affine(const Array& a, double k, double c) {
  Array y = a;
  for (double& v : y.data) v = k * v + c;
  return y;
}

inline Array gather_row(const Array& table, std::size_t row) {
  if (table.rank() != 2) throw ShapeError("gather expects a {rows,cols} table");
  if (row >= table.rows()) throw IndexError("gather row out of range");
  const std::size_t c = table.cols();
  Array y({c});
  for (std::size_t j = 0; j < c; ++j) y.data[j] = table.data[row * c + j];
  return y;
}

inline double sum_all(const Array& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return acc;
}

inline double dot(const Array& a, const Array& b) {
  if (!a.same_shape(b)) throw ShapeError("dot expects matching shapes");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

inline double cosine_similarity(const Array& a, const Array& b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace caplab::kernels
