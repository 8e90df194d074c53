#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// tensors. A Tape is built fresh for every forward pass and owns all
// intermediate values; Var is a cheap handle into it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "cmq/tensor.hpp"

namespace cmq::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor v) { return push(std::move(v), false, true, "const", nullptr); }
  /// Differentiable input; its gradient is kept after backward().
  Var leaf(Tensor v) { return push(std::move(v), true, true, "leaf", nullptr); }
  /// Non-owning variants: the referenced tensor must outlive the tape and
  /// stay unchanged while it is in use.
  Var constant_view(const Tensor& v) { return push_view(v, false); }
  Var leaf_view(const Tensor& v) { return push_view(v, true); }

  const Tensor& value(Var v) const { return node(v).get(); }
  bool requires_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient of the last backward() root with respect to a leaf. Returns
  /// zeros of the leaf's shape if nothing reached it.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (!n.is_leaf) throw Error("autodiff: gradients are retained for leaves only (node op '" + std::string(n.op) + "')");
    return n.has_grad ? n.grad : Tensor(n.get().shape, 0.0);
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
  }

  /// Accumulates d(root)/d(leaf) into every reachable leaf.
  void backward(Var root) {
    Node& r = node(root);
    if (r.get().size() != 1) throw Error("autodiff: backward() needs a scalar root, got shape " + shape_str(r.get().shape));
    for (auto& n : nodes_)
      if (!n.is_leaf) {
        n.has_grad = false;
        n.grad = Tensor();
      }
    if (!r.needs_grad) return;
    accumulate(root.id()).data[0] += 1.0;
    for (std::int64_t i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.get(), n.grad);
      if (!n.is_leaf) n.grad = Tensor();
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn, const char* op) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape() != this) throw Error(std::string("autodiff: op '") + op + "' mixes vars from different tapes");
      needs = needs || node(p).needs_grad;
    }
    return push(std::move(value), needs, false, op, needs ? std::move(fn) : Backward{});
  }
  Var record(Tensor value, const std::vector<Var>& parents, Backward fn, const char* op) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape() != this) throw Error(std::string("autodiff: op '") + op + "' mixes vars from different tapes");
      needs = needs || node(p).needs_grad;
    }
    return push(std::move(value), needs, false, op, needs ? std::move(fn) : Backward{});
  }
  bool wants_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
  /// Gradient buffer of a node, zero-initialized on first touch.
  Tensor& accumulate(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor(n.get().shape, 0.0);
      n.has_grad = true;
    }
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    bool is_leaf = false;
    const char* op = "";
    Backward backward;
    const Tensor* view = nullptr;

    const Tensor& get() const { return view ? *view : value; }
  };

  Var push_view(const Tensor& v, bool needs) {
    Node n;
    n.view = &v;
    n.needs_grad = needs;
    n.is_leaf = true;
    n.op = needs ? "leaf" : "const";
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Var push(Tensor v, bool needs, bool is_leaf, const char* op, Backward fn) {
    nodes_.push_back(Node{std::move(v), Tensor(), false, needs, is_leaf, op, std::move(fn), nullptr});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }
  const Node& node(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) throw Error("autodiff: var does not belong to this tape");
    return nodes_[v.id()];
  }
  Node& node(Var v) {
    if (v.tape() != this || v.id() >= nodes_.size()) throw Error("autodiff: var does not belong to this tape");
    return nodes_[v.id()];
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw Error(std::string(op) + ": " + what);
}

inline void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape == b.shape, op, "shape mismatch, expected " + shape_str(a.shape) + " got " + shape_str(b.shape));
}

inline void matrix_like(const char* op, const Tensor& t) {
  require(t.rank() == 1 || t.rank() == 2, op, "expected a vector or matrix, got shape " + shape_str(t.shape));
}

// y[0..n) += a * x[0..n)
inline void axpy(std::size_t n, double a, const double* __restrict x, double* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// C[R x m] += A[R x n] * B[n x m], all row-major with the given leading
/// dimensions. Each C entry sums over k in ascending order, so the result
/// matches a plain triple loop bit for bit. Terms whose A entries are zero
/// for a whole block of rows are skipped.
inline void gemm_acc(std::size_t R, std::size_t n, std::size_t m, const double* A, std::size_t lda, const double* B,
                     std::size_t ldb, double* C, std::size_t ldc) {
  std::size_t r = 0;
  for (; r + 4 <= R; r += 4) {
    const double* a0 = A + r * lda;
    const double* a1 = a0 + lda;
    const double* a2 = a1 + lda;
    const double* a3 = a2 + lda;
    double* __restrict c0 = C + r * ldc;
    double* __restrict c1 = c0 + ldc;
    double* __restrict c2 = c1 + ldc;
    double* __restrict c3 = c2 + ldc;
    for (std::size_t k = 0; k < n; ++k) {
      const double x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      if (x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0) continue;
      const double* __restrict b = B + k * ldb;
      for (std::size_t j = 0; j < m; ++j) {
        const double bj = b[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; r < R; ++r) {
    const double* a = A + r * lda;
    double* c = C + r * ldc;
    for (std::size_t k = 0; k < n; ++k)
      if (a[k] != 0.0) axpy(m, a[k], B + k * ldb, c);
  }
}

/// Row-major transpose of an R x C block.
inline std::vector<double> transpose(const double* x, std::size_t R, std::size_t C) {
  std::vector<double> t(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) t[c * R + r] = x[r * C + c];
  return t;
}

inline double dot(std::size_t n, const double* x, const double* y) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail
}  // namespace cmq::ad
