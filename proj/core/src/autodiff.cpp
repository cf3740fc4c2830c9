#include "caplab/autodiff.hpp"

#include <cmath>
#include <cstdlib>

#include "caplab/errors.hpp"
#include "caplab/kernels.hpp"

namespace caplab {

int Tape::push(TapeNode n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_id(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ContractError("tape node id out of range");
  }
}

int Tape::leaf(Array v) {
  TapeNode n;
  n.op = OpKind::leaf;
  n.value = std::move(v);
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  check_id(a);
  check_id(b);
  TapeNode n;
  n.a = a;
  n.b = b;
  if (val(b).rank() == 1) {
    n.op = OpKind::matvec;
    n.value = kernels::matvec(val(a), val(b));
  } else {
    n.op = OpKind::matmul;
    n.value = kernels::matmul2(val(a), val(b));
  }
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  check_id(a);
  check_id(b);
  TapeNode n;
  n.a = a;
  n.b = b;
  if (val(a).same_shape(val(b))) {
    n.op = OpKind::add;
    n.value = kernels::add_same(val(a), val(b));
  } else {
    n.op = OpKind::add_rowvec;
    n.value = kernels::add_rowvec(val(a), val(b));
  }
  return push(std::move(n));
}

int Tape::tanh_op(int a) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::tanh_fn;
  n.a = a;
  n.value = kernels::tanh_arr(val(a));
  return push(std::move(n));
}

int Tape::sigmoid_op(int a) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::sigmoid_fn;
  n.a = a;
  n.value = kernels::sigmoid_arr(val(a));
  return push(std::move(n));
}

int Tape::softmax(int a) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::softmax_fn;
  n.a = a;
  n.value = kernels::softmax_last(val(a));
  return push(std::move(n));
}

int Tape::log_op(int a) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::log_fn;
  n.a = a;
  n.value = kernels::log_arr(val(a));
  return push(std::move(n));
}

int Tape::sum(int a) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::sum_fn;
  n.a = a;
  n.value = Array::scalar(kernels::sum_all(val(a)));
  return push(std::move(n));
}

int Tape::concat(int a, int b) {
  check_id(a);
  check_id(b);
  TapeNode n;
  n.op = OpKind::concat2;
  n.a = a;
  n.b = b;
  n.value = kernels::concat1d(val(a), val(b));
  return push(std::move(n));
}

int Tape::mul(int a, int b) {
  check_id(a);
  check_id(b);
  TapeNode n;
  n.op = OpKind::mul;
  n.a = a;
  n.b = b;
  n.value = kernels::hadamard(val(a), val(b));
  return push(std::move(n));
}

int Tape::affine(int a, double k, double c) {
  check_id(a);
  TapeNode n;
  n.op = OpKind::affine_fn;
  n.a = a;
  n.k = k;
  n.c = c;
  n.value = kernels::affine(val(a), k, c);
  return push(std::move(n));
}

int Tape::gather(int table, int row) {
  check_id(table);
  if (row < 0) throw IndexError("gather row out of range");
  TapeNode n;
  n.op = OpKind::gather;
  n.a = table;
  n.idx = row;
  n.value = kernels::gather_row(val(table), static_cast<std::size_t>(row));
  return push(std::move(n));
}

int Tape::pick(int v, int index) {
  check_id(v);
  const Array& x = val(v);
  if (x.rank() != 1) throw ShapeError("pick expects a vector");
  if (index < 0 || static_cast<std::size_t>(index) >= x.numel()) {
    throw IndexError("pick index out of range");
  }
  TapeNode n;
  n.op = OpKind::pick;
  n.a = v;
  n.idx = index;
  n.value = Array::scalar(x.data[static_cast<std::size_t>(index)]);
  return push(std::move(n));
}

int Tape::cross_entropy(int dist, int target) {
  check_id(dist);
  const Array& p = val(dist);
  if (p.rank() != 1) throw ShapeError("cross_entropy expects a probability vector");
  if (target < 0 || static_cast<std::size_t>(target) >= p.numel()) {
    throw IndexError("cross_entropy target out of range");
  }
  double total = 0.0;
  for (double v : p.data) total += v;
  if (std::abs(total - 1.0) > 1e-6) {
    throw ContractError("cross_entropy input does not sum to 1");
  }
  // -log p[target], composed from pick -> log -> negate.
  return affine(log_op(pick(dist, target)), -1.0, 0.0);
}

const Array& Tape::value(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].value;
}

const Array& Tape::adjoint(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].adjoint;
}

void Tape::backward(int root) {
  check_id(root);
  if (!nodes_[static_cast<std::size_t>(root)].value.is_scalar()) {
    throw ContractError("backward root must be scalar");
  }
  for (TapeNode& n : nodes_) {
    n.adjoint = Array(n.value.shape);
  }
  nodes_[static_cast<std::size_t>(root)].adjoint.data[0] = 1.0;

  for (int id = root; id >= 0; --id) {
    TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    const Array& g = n.adjoint;
    switch (n.op) {
      case OpKind::leaf:
        break;
      case OpKind::matvec: {
        TapeNode& w = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& x = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t m = w.value.rows(), cols = w.value.cols();
        for (std::size_t i = 0; i < m; ++i) {
          const double gi = g.data[i];
          if (gi == 0.0) continue;
          for (std::size_t j = 0; j < cols; ++j) {
            w.adjoint.data[i * cols + j] += gi * x.value.data[j];
            x.adjoint.data[j] += gi * w.value.data[i * cols + j];
          }
        }
        break;
      }
      case OpKind::matmul: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& b = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t m = a.value.rows(), kk = a.value.cols(), p = b.value.cols();
        // dA = g * B^T, dB = A^T * g
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k2 = 0; k2 < kk; ++k2) {
            double acc = 0.0;
            for (std::size_t j = 0; j < p; ++j) {
              acc += g.data[i * p + j] * b.value.data[k2 * p + j];
            }
            a.adjoint.data[i * kk + k2] += acc;
          }
        }
        for (std::size_t k2 = 0; k2 < kk; ++k2) {
          for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              acc += a.value.data[i * kk + k2] * g.data[i * p + j];
            }
            b.adjoint.data[k2 * p + j] += acc;
          }
        }
        break;
      }
      case OpKind::add: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& b = nodes_[static_cast<std::size_t>(n.b)];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          a.adjoint.data[i] += g.data[i];
          b.adjoint.data[i] += g.data[i];
        }
        break;
      }
      case OpKind::add_rowvec: {
        TapeNode& mnode = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& r = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t rows = mnode.value.rows(), cols = mnode.value.cols();
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            mnode.adjoint.data[i * cols + j] += g.data[i * cols + j];
            r.adjoint.data[j] += g.data[i * cols + j];
          }
        }
        break;
      }
      case OpKind::tanh_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double y = n.value.data[i];
          a.adjoint.data[i] += g.data[i] * (1.0 - y * y);
        }
        break;
      }
      case OpKind::sigmoid_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          const double y = n.value.data[i];
          a.adjoint.data[i] += g.data[i] * y * (1.0 - y);
        }
        break;
      }
      case OpKind::softmax_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        const std::size_t nlast = n.value.shape.back();
        const std::size_t slices = n.value.numel() / nlast;
        for (std::size_t s = 0; s < slices; ++s) {
          const double* y = &n.value.data[s * nlast];
          const double* gs = &g.data[s * nlast];
          double inner = 0.0;
          for (std::size_t j = 0; j < nlast; ++j) inner += gs[j] * y[j];
          for (std::size_t j = 0; j < nlast; ++j) {
            a.adjoint.data[s * nlast + j] += y[j] * (gs[j] - inner);
          }
        }
        break;
      }
      case OpKind::log_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          a.adjoint.data[i] += g.data[i] / a.value.data[i];
        }
        break;
      }
      case OpKind::sum_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        const double g0 = g.data[0];
        for (std::size_t i = 0; i < a.adjoint.numel(); ++i) a.adjoint.data[i] += g0;
        break;
      }
      case OpKind::concat2: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& b = nodes_[static_cast<std::size_t>(n.b)];
        const std::size_t na = a.value.numel();
        for (std::size_t i = 0; i < na; ++i) a.adjoint.data[i] += g.data[i];
        for (std::size_t i = 0; i < b.value.numel(); ++i) b.adjoint.data[i] += g.data[na + i];
        break;
      }
      case OpKind::mul: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        TapeNode& b = nodes_[static_cast<std::size_t>(n.b)];
        for (std::size_t i = 0; i < g.numel(); ++i) {
          a.adjoint.data[i] += g.data[i] * b.value.data[i];
          b.adjoint.data[i] += g.data[i] * a.value.data[i];
        }
        break;
      }
      case OpKind::affine_fn: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        for (std::size_t i = 0; i < g.numel(); ++i) a.adjoint.data[i] += n.k * g.data[i];
        break;
      }
      case OpKind::gather: {
        TapeNode& t = nodes_[static_cast<std::size_t>(n.a)];
        const std::size_t cols = t.value.cols();
        const std::size_t row = static_cast<std::size_t>(n.idx);
        for (std::size_t j = 0; j < cols; ++j) {
          t.adjoint.data[row * cols + j] += g.data[j];
        }
        break;
      }
      case OpKind::pick: {
        TapeNode& a = nodes_[static_cast<std::size_t>(n.a)];
        a.adjoint.data[static_cast<std::size_t>(n.idx)] += g.data[0];
        break;
      }
    }
  }
}

}  // namespace caplab
