#pragma once

#include <cstddef>
#include <vector>

#include "caplab/array.hpp"

namespace caplab {

// Reverse-mode tape. Nodes form a DAG in construction order, so ids are a
// valid topological order and backward is a single reverse sweep. One tape
// per worker; nothing here is safe to share across threads mid-build.
enum class OpKind {
  leaf,
  matvec,      // {m,n} x {n}
  matmul,      // {m,n} x {n,p}
  add,         // matching shapes
  add_rowvec,  // {m,n} + {n} row-vector bias broadcast
  tanh_fn,
  sigmoid_fn,
  softmax_fn,  // last axis
  log_fn,
  sum_fn,      // -> scalar
  concat2,     // two vectors
  mul,         // elementwise
  affine_fn,   // k*x + c with scalar constants
  gather,      // one row of a table
  pick,        // one element of a vector -> scalar
};

struct TapeNode {
  OpKind op = OpKind::leaf;
  int a = -1;
  int b = -1;
  int idx = 0;      // gather row / pick index
  double k = 0.0;   // affine slope
  double c = 0.0;   // affine offset
  Array value;
  Array adjoint;    // allocated lazily by backward()
};

class Tape {
 public:
  int leaf(Array v);

  // Dispatches to matvec or matmul on the operand ranks.
  int matmul(int a, int b);
  // Matching shapes, or the {m,n} + {n} row-vector bias broadcast.
  int add(int a, int b);
  int tanh_op(int a);
  int sigmoid_op(int a);
  int softmax(int a);
  int log_op(int a);
  int sum(int a);
  int concat(int a, int b);
  int mul(int a, int b);
  int affine(int a, double k, double c);
  int gather(int table, int row);
  int pick(int v, int index);

  // -log dist[target]. dist must be a probability vector (sums to 1 within
  // 1e-6); target must be in range. Differentiable through dist.
  int cross_entropy(int dist, int target);

  const Array& value(int id) const;
  const Array& adjoint(int id) const;

  // Seeds the scalar root with 1 and sweeps the tape in reverse. Adjoints of
  // nodes past the root stay zero. Throws ContractError on non-scalar roots.
  void backward(int root);

  std::size_t size() const { return nodes_.size(); }

 private:
  int push(TapeNode n);
  void check_id(int id) const;
  const Array& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  std::vector<TapeNode> nodes_;
};

}  // namespace caplab
