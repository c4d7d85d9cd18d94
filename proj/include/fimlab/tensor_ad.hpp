#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors of rank 0, 1 or 2. A tape records primitive operations in
// topological order; `backward` runs one reverse sweep and `replay` re-runs
// the forward pass after leaf values change.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fimlab/common.hpp"

namespace fimlab::ad {

struct Shape {
  std::vector<std::size_t> dims;

  static Shape scalar() { return {}; }
  static Shape vector(std::size_t n) { return {{n}}; }
  static Shape matrix(std::size_t r, std::size_t c) { return {{r, c}}; }

  std::size_t rank() const { return dims.size(); }
  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  /// Rows/cols when a rank-0/1 tensor is read as a single row.
  std::size_t rows() const { return rank() == 2 ? dims[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? dims[1] : (rank() == 1 ? dims[0] : 1); }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + ")";
  }
};

enum class Op {
  Leaf,
  Constant,
  Slice,
  MatMul,
  MatMulNT,
  Add,
  AddRow,
  Mul,
  Scale,
  Tanh,
  Relu,
  Exp,
  Sqrt,
  ClampMin,
  LogSoftmax,
  Gather,
  WeightedSum,
  Sum,
  StopGradient,
};

template <class T>
struct Node {
  Op op = Op::Leaf;
  int lhs = -1;
  int rhs = -1;
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  T scalar_arg{};                  // Scale factor / ClampMin floor
  std::size_t offset = 0;          // Slice start
  std::vector<std::size_t> index;  // Gather columns
};

template <class T>
Node<T> make_node(Op op, int lhs, int rhs, Shape shape, std::vector<T> value = {}, bool requires_grad = false) {
  Node<T> n;
  n.op = op;
  n.lhs = lhs;
  n.rhs = rhs;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return n;
}

template <class T>
class BasicTape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  BasicTape<T>* tape = nullptr;
  int id = -1;

  const Node<T>& node() const { return tape->node(id); }
  const Shape& shape() const { return node().shape; }
  const std::vector<T>& value() const { return node().value; }
  T item() const {
    require(node().value.size() == 1, "Var::item: tensor is not a scalar");
    return node().value[0];
  }
};

/// Per-node adjoints produced by one reverse sweep.
template <class T>
class Gradients {
 public:
  explicit Gradients(std::vector<std::vector<T>> adj) : adj_(std::move(adj)) {}
  /// Adjoint of `v`; all zeros for constants and nodes off the gradient path.
  std::vector<T> of(const Var<T>& v) const {
    const auto& a = adj_.at(static_cast<std::size_t>(v.id));
    if (!a.empty()) return a;
    return std::vector<T>(v.node().shape.numel(), T(0));
  }

 private:
  std::vector<std::vector<T>> adj_;
};

template <class T>
class BasicTape {
 public:
  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;
  BasicTape(BasicTape&& other) noexcept
      : nodes_(std::move(other.nodes_)), backward_count_(other.backward_count_.load()) {}

  Var<T> leaf(Shape shape, std::vector<T> value) {
    check_size(shape, value, "leaf");
    return push(make_node<T>(Op::Leaf, -1, -1, std::move(shape), std::move(value), true));
  }
  Var<T> constant(Shape shape, std::vector<T> value) {
    check_size(shape, value, "constant");
    return push(make_node<T>(Op::Constant, -1, -1, std::move(shape), std::move(value), false));
  }

  /// Overwrite a leaf or constant. Call `replay` afterwards to refresh
  /// dependent values.
  void set_value(const Var<T>& v, std::span<const T> value) {
    Node<T>& n = nodes_.at(static_cast<std::size_t>(v.id));
    require(n.op == Op::Leaf || n.op == Op::Constant, "set_value: node is not a leaf or constant");
    require(value.size() == n.value.size(), "set_value: size mismatch");
    std::copy(value.begin(), value.end(), n.value.begin());
  }

  /// Recompute derived nodes in recording order, starting at node `from`
  /// (nodes recorded earlier must not depend on anything that changed). With
  /// `freeze_stopped`, stop-gradient nodes keep their cached values, so the
  /// replayed function is the one whose derivative `backward` reports.
  void replay(bool freeze_stopped = false, int from = 0) {
    for (std::size_t i = static_cast<std::size_t>(std::max(from, 0)); i < nodes_.size(); ++i) {
      Node<T>& n = nodes_[i];
      if (n.op == Op::Leaf || n.op == Op::Constant) continue;
      if (freeze_stopped && n.op == Op::StopGradient) continue;
      n.value = evaluate(n);
    }
  }

  const Node<T>& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  std::size_t backward_count() const { return backward_count_.load(); }

  /// Gradient of a rank-0 root with respect to every node.
  Gradients<T> backward(const Var<T>& root) const {
    require(root.shape().rank() == 0, "backward: root must be a scalar, got shape " +
                                          root.shape().str());
    const T one(1);
    return vjp(root, std::span<const T>(&one, 1));
  }

  /// One reverse sweep seeded with `seed` at `output`.
  Gradients<T> vjp(const Var<T>& output, std::span<const T> seed) const {
    const auto& out = node(output.id);
    require(seed.size() == out.value.size(), "vjp: seed size mismatch");
    backward_count_.fetch_add(1);
    std::vector<std::vector<T>> adj(nodes_.size());
    if (!out.requires_grad) return Gradients<T>(std::move(adj));
    adj[static_cast<std::size_t>(output.id)].assign(seed.begin(), seed.end());
    for (int i = output.id; i >= 0; --i) {
      auto& g = adj[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      const Node<T>& n = nodes_[static_cast<std::size_t>(i)];
      if (n.op == Op::Leaf) continue;
      propagate(n, g, adj);
    }
    return Gradients<T>(std::move(adj));
  }

  // Recording ----------------------------------------------------------------

  Var<T> record(Node<T> n) {
    n.requires_grad = n.op != Op::StopGradient && n.op != Op::Constant &&
                      ((n.lhs >= 0 && node(n.lhs).requires_grad) ||
                       (n.rhs >= 0 && node(n.rhs).requires_grad));
    n.value = evaluate(n);
    return push(std::move(n));
  }

 private:
  Var<T> push(Node<T> n) {
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  static void check_size(const Shape& s, const std::vector<T>& v, const char* what) {
    require(s.rank() <= 2, std::string(what) + ": rank above 2 unsupported");
    require(s.numel() == v.size(), std::string(what) + ": value size does not match shape");
  }

  std::vector<T> evaluate(const Node<T>& n) const {
    const std::vector<T>* a = n.lhs >= 0 ? &nodes_[static_cast<std::size_t>(n.lhs)].value : nullptr;
    const std::vector<T>* b = n.rhs >= 0 ? &nodes_[static_cast<std::size_t>(n.rhs)].value : nullptr;
    std::vector<T> out(n.shape.numel());
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        return n.value;
      case Op::Slice:
        std::copy_n(a->begin() + static_cast<std::ptrdiff_t>(n.offset), out.size(), out.begin());
        break;
      case Op::MatMul: {
        const Shape& sa = node(n.lhs).shape;
        const std::size_t m = sa.rows(), k = sa.cols(), c = n.shape.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T acc(0);
            for (std::size_t t = 0; t < k; ++t) acc += (*a)[i * k + t] * (*b)[t * c + j];
            out[i * c + j] = acc;
          }
        break;
      }
      case Op::MatMulNT: {
        const Shape& sa = node(n.lhs).shape;
        const std::size_t m = sa.rows(), k = sa.cols(), c = n.shape.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T acc(0);
            for (std::size_t t = 0; t < k; ++t) acc += (*a)[i * k + t] * (*b)[j * k + t];
            out[i * c + j] = acc;
          }
        break;
      }
      case Op::Add:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] + (*b)[i];
        break;
      case Op::AddRow: {
        const std::size_t c = n.shape.cols();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] + (*b)[i % c];
        break;
      }
      case Op::Mul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] * (*b)[i];
        break;
      case Op::Scale:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] * n.scalar_arg;
        break;
      case Op::Tanh:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh((*a)[i]);
        break;
      case Op::Relu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i] > T(0) ? (*a)[i] : T(0);
        break;
      case Op::Exp:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp((*a)[i]);
        break;
      case Op::Sqrt:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt((*a)[i]);
        break;
      case Op::ClampMin:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max((*a)[i], n.scalar_arg);
        break;
      case Op::LogSoftmax: {
        const std::size_t r = n.shape.rows(), c = n.shape.cols();
        for (std::size_t i = 0; i < r; ++i) {
          const T* row = a->data() + i * c;
          const T top = *std::max_element(row, row + c);
          T total(0);
          for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - top);
          const T lse = top + std::log(total);
          for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
        }
        break;
      }
      case Op::Gather: {
        const std::size_t c = node(n.lhs).shape.cols();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a)[i * c + n.index[i]];
        break;
      }
      case Op::WeightedSum: {
        T acc(0);
        for (std::size_t i = 0; i < a->size(); ++i) acc += (*a)[i] * (*b)[i];
        out[0] = acc;
        break;
      }
      case Op::Sum: {
        T acc(0);
        for (const T& x : *a) acc += x;
        out[0] = acc;
        break;
      }
      case Op::StopGradient:
        out = *a;
        break;
    }
    return out;
  }

  void accumulate(std::vector<std::vector<T>>& adj, int id, std::size_t i, T v) const {
    auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].value.size(), T(0));
    g[i] += v;
  }

  bool flows(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; }

  void propagate(const Node<T>& n, const std::vector<T>& g, std::vector<std::vector<T>>& adj) const {
    const std::vector<T>* a = n.lhs >= 0 ? &nodes_[static_cast<std::size_t>(n.lhs)].value : nullptr;
    const std::vector<T>* b = n.rhs >= 0 ? &nodes_[static_cast<std::size_t>(n.rhs)].value : nullptr;
    const bool fa = flows(n.lhs), fb = flows(n.rhs);
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
      case Op::StopGradient:
        break;
      case Op::Slice:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(adj, n.lhs, n.offset + i, g[i]);
        break;
      case Op::MatMul: {
        const Shape& sa = node(n.lhs).shape;
        const std::size_t m = sa.rows(), k = sa.cols(), c = n.shape.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const T gij = g[i * c + j];
            if (gij == T(0)) continue;
            for (std::size_t t = 0; t < k; ++t) {
              if (fa) accumulate(adj, n.lhs, i * k + t, gij * (*b)[t * c + j]);
              if (fb) accumulate(adj, n.rhs, t * c + j, gij * (*a)[i * k + t]);
            }
          }
        break;
      }
      case Op::MatMulNT: {
        const Shape& sa = node(n.lhs).shape;
        const std::size_t m = sa.rows(), k = sa.cols(), c = n.shape.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const T gij = g[i * c + j];
            if (gij == T(0)) continue;
            for (std::size_t t = 0; t < k; ++t) {
              if (fa) accumulate(adj, n.lhs, i * k + t, gij * (*b)[j * k + t]);
              if (fb) accumulate(adj, n.rhs, j * k + t, gij * (*a)[i * k + t]);
            }
          }
        break;
      }
      case Op::Add:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (fa) accumulate(adj, n.lhs, i, g[i]);
          if (fb) accumulate(adj, n.rhs, i, g[i]);
        }
        break;
      case Op::AddRow: {
        const std::size_t c = n.shape.cols();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (fa) accumulate(adj, n.lhs, i, g[i]);
          if (fb) accumulate(adj, n.rhs, i % c, g[i]);
        }
        break;
      }
      case Op::Mul:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (fa) accumulate(adj, n.lhs, i, g[i] * (*b)[i]);
          if (fb) accumulate(adj, n.rhs, i, g[i] * (*a)[i]);
        }
        break;
      case Op::Scale:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(adj, n.lhs, i, g[i] * n.scalar_arg);
        break;
      case Op::Tanh:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i)
            accumulate(adj, n.lhs, i, g[i] * (T(1) - n.value[i] * n.value[i]));
        break;
      case Op::Relu:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i)
            if ((*a)[i] > T(0)) accumulate(adj, n.lhs, i, g[i]);
        break;
      case Op::Exp:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i) accumulate(adj, n.lhs, i, g[i] * n.value[i]);
        break;
      case Op::Sqrt:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i)
            accumulate(adj, n.lhs, i, g[i] / (T(2) * n.value[i]));
        break;
      case Op::ClampMin:
        if (fa)
          for (std::size_t i = 0; i < g.size(); ++i)
            if ((*a)[i] > n.scalar_arg) accumulate(adj, n.lhs, i, g[i]);
        break;
      case Op::LogSoftmax: {
        if (!fa) break;
        const std::size_t r = n.shape.rows(), c = n.shape.cols();
        for (std::size_t i = 0; i < r; ++i) {
          T gsum(0);
          for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            accumulate(adj, n.lhs, i * c + j, g[i * c + j] - std::exp(n.value[i * c + j]) * gsum);
        }
        break;
      }
      case Op::Gather: {
        if (!fa) break;
        const std::size_t c = node(n.lhs).shape.cols();
        for (std::size_t i = 0; i < g.size(); ++i) accumulate(adj, n.lhs, i * c + n.index[i], g[i]);
        break;
      }
      case Op::WeightedSum:
        for (std::size_t i = 0; i < a->size(); ++i) {
          if (fa) accumulate(adj, n.lhs, i, g[0] * (*b)[i]);
          if (fb) accumulate(adj, n.rhs, i, g[0] * (*a)[i]);
        }
        break;
      case Op::Sum:
        if (fa)
          for (std::size_t i = 0; i < a->size(); ++i) accumulate(adj, n.lhs, i, g[0]);
        break;
    }
  }

  std::vector<Node<T>> nodes_;
  mutable std::atomic<std::size_t> backward_count_{0};
};

using Tape = BasicTape<double>;

// Primitives -----------------------------------------------------------------

namespace detail {
template <class T>
BasicTape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  require(a.tape != nullptr && a.tape == b.tape, "operands live on different tapes");
  return *a.tape;
}
template <class T>
Node<T> unary(Op op, const Var<T>& a, Shape shape) {
  return make_node<T>(op, a.id, -1, std::move(shape));
}
template <class T>
Node<T> binary(Op op, const Var<T>& a, const Var<T>& b, Shape shape) {
  return make_node<T>(op, a.id, b.id, std::move(shape));
}
}  // namespace detail

/// Contiguous sub-range of `a` reinterpreted with `shape`.
template <class T>
Var<T> slice(const Var<T>& a, std::size_t offset, Shape shape) {
  require(offset + shape.numel() <= a.shape().numel(), "slice: range exceeds source");
  require(shape.rank() <= 2, "slice: rank above 2 unsupported");
  auto n = detail::unary(Op::Slice, a, std::move(shape));
  n.offset = offset;
  return a.tape->record(std::move(n));
}

/// (m x k) * (k x n).
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  require(sa.rank() == 2 && sb.rank() == 2, "matmul: operands must be matrices");
  require(sa.dims[1] == sb.dims[0], "matmul: inner dimensions differ " + sa.str() + " x " + sb.str());
  return t.record(detail::binary(Op::MatMul, a, b, Shape::matrix(sa.dims[0], sb.dims[1])));
}

/// (m x k) * (n x k)^T.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  require(sa.rank() == 2 && sb.rank() == 2, "matmul_nt: operands must be matrices");
  require(sa.dims[1] == sb.dims[1], "matmul_nt: inner dimensions differ " + sa.str() + " x " + sb.str() + "^T");
  return t.record(detail::binary(Op::MatMulNT, a, b, Shape::matrix(sa.dims[0], sb.dims[0])));
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  return t.record(detail::binary(Op::Add, a, b, a.shape()));
}

/// Bias add: every row of a matrix plus a vector of matching width.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& bias) {
  auto& t = detail::same_tape(a, bias);
  require(a.shape().rank() == 2 && bias.shape().rank() == 1 && bias.shape().dims[0] == a.shape().dims[1],
          "add_row: bias width must match matrix columns");
  return t.record(detail::binary(Op::AddRow, a, bias, a.shape()));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& t = detail::same_tape(a, b);
  require(a.shape() == b.shape(), "mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  return t.record(detail::binary(Op::Mul, a, b, a.shape()));
}

template <class T, class U>
Var<T> scale(const Var<T>& a, U factor) {
  auto n = detail::unary(Op::Scale, a, a.shape());
  n.scalar_arg = static_cast<T>(factor);
  return a.tape->record(std::move(n));
}

template <class T> Var<T> tanh(const Var<T>& a) { return a.tape->record(detail::unary(Op::Tanh, a, a.shape())); }
template <class T> Var<T> relu(const Var<T>& a) { return a.tape->record(detail::unary(Op::Relu, a, a.shape())); }
template <class T> Var<T> exp(const Var<T>& a) { return a.tape->record(detail::unary(Op::Exp, a, a.shape())); }
template <class T> Var<T> sqrt(const Var<T>& a) { return a.tape->record(detail::unary(Op::Sqrt, a, a.shape())); }

template <class T, class U>
Var<T> clamp_min(const Var<T>& a, U floor) {
  auto n = detail::unary(Op::ClampMin, a, a.shape());
  n.scalar_arg = static_cast<T>(floor);
  return a.tape->record(std::move(n));
}

/// Row-wise log-softmax, z - logsumexp(z), with max subtraction.
template <class T>
Var<T> log_softmax(const Var<T>& a) {
  require(a.shape().rank() >= 1, "log_softmax: needs a vector or matrix");
  return a.tape->record(detail::unary(Op::LogSoftmax, a, a.shape()));
}

/// out[i] = a[i, columns[i]].
template <class T>
Var<T> gather(const Var<T>& a, std::vector<std::size_t> columns) {
  const Shape& s = a.shape();
  require(s.rank() >= 1, "gather: needs a vector or matrix");
  require(columns.size() == s.rows(), "gather: one column index per row required");
  for (auto c : columns) require(c < s.cols(), "gather: column index out of range");
  auto n = detail::unary(Op::Gather, a, Shape::vector(columns.size()));
  n.index = std::move(columns);
  return a.tape->record(std::move(n));
}

/// sum(a * w) as a scalar.
template <class T>
Var<T> weighted_sum(const Var<T>& a, const Var<T>& w) {
  auto& t = detail::same_tape(a, w);
  require(a.shape().numel() == w.shape().numel(), "weighted_sum: size mismatch");
  return t.record(detail::binary(Op::WeightedSum, a, w, Shape::scalar()));
}

template <class T>
Var<T> sum(const Var<T>& a) {
  return a.tape->record(detail::unary(Op::Sum, a, Shape::scalar()));
}

/// Identity in the forward pass; the adjoint through this edge is zero.
template <class T>
Var<T> stop_gradient(const Var<T>& a) {
  return a.tape->record(detail::unary(Op::StopGradient, a, a.shape()));
}

// Gradient check ---------------------------------------------------------------

/// Worst coordinate-wise relative error between `backward` and central
/// differences, with denominator max(|g|, 1e-8).
///
/// `f` is a generic callable `(BasicTape<S>&, Var<S> theta) -> Var<S>`
/// recording a scalar. The reverse pass runs in double. Differences use a
/// five-point central stencil on a long-double replay of the same recording
/// with stop-gradient nodes frozen, which keeps rounding noise far below the
/// tolerance this check is used at.
template <class F>
double grad_check(F&& f, const Vector& theta, double step) {
  require(step > 0.0, "grad_check: step must be positive");
  const std::size_t n = static_cast<std::size_t>(theta.size());

  Tape tape;
  auto leaf = tape.leaf(Shape::vector(n), std::vector<double>(theta.data(), theta.data() + n));
  auto root = f(tape, leaf);
  const std::vector<double> grad = tape.backward(root).of(leaf);

  using Wide = long double;
  BasicTape<Wide> wide;
  std::vector<Wide> base(n);
  for (std::size_t i = 0; i < n; ++i) base[i] = static_cast<Wide>(theta[static_cast<Index>(i)]);
  auto wleaf = wide.leaf(Shape::vector(n), base);
  auto wroot = f(wide, wleaf);
  const Wide h = static_cast<Wide>(step);

  auto eval_at = [&](std::size_t i, Wide offset) {
    std::vector<Wide> x = base;
    x[i] += offset;
    wide.set_value(wleaf, x);
    wide.replay(/*freeze_stopped=*/true);
    return wroot.item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // pair the symmetric evaluations first so a flat direction gives exactly 0
    const Wide near = eval_at(i, h) - eval_at(i, -h);
    const Wide far = eval_at(i, 2 * h) - eval_at(i, -2 * h);
    const Wide fd = (8 * near - far) / (12 * h);
    const double err = std::abs(static_cast<double>(fd) - grad[i]) / std::max(std::abs(grad[i]), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fimlab::ad
