#pragma once

// Differentiable primitives. Matrices are row-major; a rank-1 tensor acts as
// a single row wherever a matrix is expected. Kernels accumulate in a fixed
// order so repeated runs are bit-identical.

#include <cstdint>
#include <limits>
#include <vector>

#include "cmq/autodiff.hpp"

namespace cmq::ad {

enum class Activation { identity, relu, sigmoid, tanh };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// elementwise

namespace detail {

template <class Fwd, class Deriv>
Var map_unary(Var x, const char* op, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  const auto xi = x.id();
  // deriv(x, y) -> dy/dx
  return x.tape()->record(std::move(y), {x},
                          [xi, deriv](Tape& t, const Tensor& out, const Tensor& g) {
                            const Tensor& xv = t.value(Var(&t, xi));
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], out[i]);
                          },
                          op);
}

}  // namespace detail

inline Var relu(Var x) {
  return detail::map_unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var x) {
  return detail::map_unary(
      x, "sigmoid", [](double v) { return detail::sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
  return detail::map_unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var abs(Var x) {
  return detail::map_unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var activation(Activation kind, Var x) {
  switch (kind) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
  }
  throw Error("activation: unknown kind");
}

/// a * x + c with constant scalars.
inline Var affine(Var x, double a, double c) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = a * xv[i] + c;
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, a](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
                          },
                          "affine");
}

inline Var scale(Var x, double a) { return affine(x, a, 0.0); }

/// 1 - x, computed exactly as a subtraction.
inline Var one_minus(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = 1.0 - xv[i];
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
                          },
                          "one_minus");
}

inline Var add(Var a, Var b) {
  detail::same_shape("add", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
                            if (t.wants_grad(ai)) detail::axpy(g.size(), 1.0, g.data.data(), t.accumulate(ai).data.data());
                            if (t.wants_grad(bi)) detail::axpy(g.size(), 1.0, g.data.data(), t.accumulate(bi).data.data());
                          },
                          "add");
}

inline Var sub(Var a, Var b) {
  detail::same_shape("sub", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] - bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
                            if (t.wants_grad(ai)) detail::axpy(g.size(), 1.0, g.data.data(), t.accumulate(ai).data.data());
                            if (t.wants_grad(bi)) detail::axpy(g.size(), -1.0, g.data.data(), t.accumulate(bi).data.data());
                          },
                          "sub");
}

inline Var mul(Var a, Var b) {
  detail::same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape);
  for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& av = t.value(Var(&t, ai));
                            const Tensor& bv = t.value(Var(&t, bi));
                            if (t.wants_grad(ai)) {
                              Tensor& ga = t.accumulate(ai);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                            }
                            if (t.wants_grad(bi)) {
                              Tensor& gb = t.accumulate(bi);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                            }
                          },
                          "mul");
}

/// p * a + (1 - p) * b, elementwise. With p exactly 1 (or 0) the result is
/// bit-identical to a (or b) and no gradient reaches the unused branch.
inline Var lerp(Var p, Var a, Var b) { return add(mul(p, a), mul(one_minus(p), b)); }

// ---------------------------------------------------------------------------
// dense products

/// W·x + b. W is [m x n]; x is [n] (result [m]) or a batch [R x n]
/// (result [R x m]). Pass an invalid Var to omit the bias.
inline Var linear(Var W, Var x, Var b = Var()) {
  const Tensor& Wv = W.value();
  const Tensor& xv = x.value();
  detail::require(Wv.rank() == 2, "linear", "weight must be a matrix, got shape " + shape_str(Wv.shape));
  detail::matrix_like("linear", xv);
  const std::size_t m = Wv.shape[0], n = Wv.shape[1];
  const std::size_t R = xv.rows();
  detail::require(xv.cols() == n, "linear",
                  "input shape mismatch, expected " + (xv.rank() == 1 ? shape_str({n}) : shape_str({R, n})) + " got " +
                      shape_str(xv.shape));
  if (b.valid())
    detail::require(b.value().shape == Shape{m}, "linear",
                    "bias shape mismatch, expected " + shape_str({m}) + " got " + shape_str(b.value().shape));

  const std::vector<double> Wt = detail::transpose(Wv.data.data(), m, n);
  Tensor y(xv.rank() == 1 ? Shape{m} : Shape{R, m});
  if (b.valid())
    for (std::size_t r = 0; r < R; ++r) std::copy(b.value().data.begin(), b.value().data.end(), y.data.begin() + r * m);
  detail::gemm_acc(R, n, m, xv.data.data(), n, Wt.data(), m, y.data.data(), m);

  const auto wi = W.id(), xi = x.id();
  const bool has_b = b.valid();
  const auto bi = has_b ? b.id() : 0u;
  std::vector<Var> parents{W, x};
  if (has_b) parents.push_back(b);
  return W.tape()->record(
      std::move(y), parents,
      [wi, xi, bi, has_b, m, n, R](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& Wv = t.value(Var(&t, wi));
        const Tensor& xv = t.value(Var(&t, xi));
        if (t.wants_grad(xi)) {
          Tensor& gx = t.accumulate(xi);
          detail::gemm_acc(R, m, n, g.data.data(), m, Wv.data.data(), n, gx.data.data(), n);
        }
        if (t.wants_grad(wi)) {
          Tensor& gW = t.accumulate(wi);
          const std::vector<double> gt = detail::transpose(g.data.data(), R, m);
          detail::gemm_acc(m, R, n, gt.data(), R, xv.data.data(), n, gW.data.data(), n);
        }
        if (has_b && t.wants_grad(bi)) {
          Tensor& gb = t.accumulate(bi);
          for (std::size_t r = 0; r < R; ++r) detail::axpy(m, 1.0, g.data.data() + r * m, gb.data.data());
        }
      },
      "linear");
}

/// x·B with x [R x n] (or [n]) and B [n x m].
inline Var matmul(Var x, Var B) {
  const Tensor& xv = x.value();
  const Tensor& Bv = B.value();
  detail::matrix_like("matmul", xv);
  detail::require(Bv.rank() == 2, "matmul", "right operand must be a matrix, got shape " + shape_str(Bv.shape));
  const std::size_t R = xv.rows(), n = xv.cols(), m = Bv.shape[1];
  detail::require(Bv.shape[0] == n, "matmul",
                  "inner dimension mismatch, expected " + shape_str({n, m}) + " got " + shape_str(Bv.shape));
  Tensor y(xv.rank() == 1 ? Shape{m} : Shape{R, m});
  detail::gemm_acc(R, n, m, xv.data.data(), n, Bv.data.data(), m, y.data.data(), m);
  const auto xi = x.id(), bi = B.id();
  return x.tape()->record(std::move(y), {x, B},
                          [xi, bi, R, n, m](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& xv = t.value(Var(&t, xi));
                            const Tensor& Bv = t.value(Var(&t, bi));
                            if (t.wants_grad(xi)) {
                              Tensor& gx = t.accumulate(xi);
                              for (std::size_t r = 0; r < R; ++r)
                                for (std::size_t k = 0; k < n; ++k)
                                  gx.data[r * n + k] += detail::dot(m, g.data.data() + r * m, Bv.data.data() + k * m);
                            }
                            if (t.wants_grad(bi)) {
                              Tensor& gB = t.accumulate(bi);
                              const std::vector<double> xt = detail::transpose(xv.data.data(), R, n);
                              detail::gemm_acc(n, R, m, xt.data(), R, g.data.data(), m, gB.data.data(), m);
                            }
                          },
                          "matmul");
}

// ---------------------------------------------------------------------------
// reductions and normalization

/// Numerically stable softmax over the last axis (each row of a matrix).
inline Var softmax(Var x) {
  const Tensor& xv = x.value();
  detail::require(xv.size() > 0 && xv.rank() >= 1, "softmax", "empty input");
  detail::matrix_like("softmax", xv);
  const std::size_t R = xv.rows(), K = xv.cols();
  detail::require(K > 0, "softmax", "empty input");
  Tensor y(xv.shape);
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = xv.data.data() + r * K;
    double* out = y.data.data() + r * K;
    double mx = in[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, in[k]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      out[k] = std::exp(in[k] - mx);
      s += out[k];
    }
    for (std::size_t k = 0; k < K; ++k) out[k] /= s;
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, R, K](Tape& t, const Tensor& y, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < R; ++r) {
                              const double* yr = y.data.data() + r * K;
                              const double* gr = g.data.data() + r * K;
                              const double s = detail::dot(K, gr, yr);
                              for (std::size_t k = 0; k < K; ++k) gx.data[r * K + k] += yr[k] * (gr[k] - s);
                            }
                          },
                          "softmax");
}

/// Sum of all entries -> scalar.
inline Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data) s += v;
  const auto xi = x.id();
  return x.tape()->record(Tensor::scalar(s), {x},
                          [xi](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (auto& v : gx.data) v += g[0];
                          },
                          "sum");
}

/// sum_i w_i x_i with constant weights -> scalar.
inline Var weighted_sum(Var x, const Tensor& w) {
  const Tensor& xv = x.value();
  detail::require(w.size() == xv.size(), "weighted_sum",
                  "weight shape mismatch, expected " + shape_str(xv.shape) + " got " + shape_str(w.shape));
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += w[i] * xv[i];
  const auto xi = x.id();
  return x.tape()->record(Tensor::scalar(s), {x},
                          [xi, w](Tape& t, const Tensor&, const Tensor& g) {
                            detail::axpy(w.size(), g[0], w.data.data(), t.accumulate(xi).data.data());
                          },
                          "weighted_sum");
}

/// Row-wise inner product of two equally shaped matrices -> [R].
inline Var rowdot(Var a, Var b) {
  detail::same_shape("rowdot", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::matrix_like("rowdot", av);
  const std::size_t R = av.rows(), C = av.cols();
  Tensor y(Shape{R});
  for (std::size_t r = 0; r < R; ++r) y[r] = detail::dot(C, av.data.data() + r * C, bv.data.data() + r * C);
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi, R, C](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& av = t.value(Var(&t, ai));
                            const Tensor& bv = t.value(Var(&t, bi));
                            if (t.wants_grad(ai)) {
                              Tensor& ga = t.accumulate(ai);
                              for (std::size_t r = 0; r < R; ++r)
                                detail::axpy(C, g[r], bv.data.data() + r * C, ga.data.data() + r * C);
                            }
                            if (t.wants_grad(bi)) {
                              Tensor& gb = t.accumulate(bi);
                              for (std::size_t r = 0; r < R; ++r)
                                detail::axpy(C, g[r], av.data.data() + r * C, gb.data.data() + r * C);
                            }
                          },
                          "rowdot");
}

/// Grouped row dot product: a is [R*k x C], b is [R x C], and
/// y[r*k + j] = a[r*k + j] . b[r]. Same as rowdot(a, repeat_rows(b, k))
/// without materializing the repeated rows.
inline Var group_rowdot(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::matrix_like("group_rowdot", av);
  detail::matrix_like("group_rowdot", bv);
  const std::size_t RK = av.rows(), C = av.cols(), R = bv.rows();
  detail::require(R > 0 && bv.cols() == C && RK % R == 0, "group_rowdot",
                  "shape mismatch, got " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  const std::size_t k = RK / R;
  Tensor y(Shape{RK});
  for (std::size_t i = 0; i < RK; ++i) y[i] = detail::dot(C, av.data.data() + i * C, bv.data.data() + (i / k) * C);
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi, RK, C, k](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& av = t.value(Var(&t, ai));
                            const Tensor& bv = t.value(Var(&t, bi));
                            if (t.wants_grad(ai)) {
                              Tensor& ga = t.accumulate(ai);
                              for (std::size_t i = 0; i < RK; ++i)
                                if (g[i] != 0.0)
                                  detail::axpy(C, g[i], bv.data.data() + (i / k) * C, ga.data.data() + i * C);
                            }
                            if (t.wants_grad(bi)) {
                              Tensor& gb = t.accumulate(bi);
                              for (std::size_t i = 0; i < RK; ++i)
                                if (g[i] != 0.0)
                                  detail::axpy(C, g[i], av.data.data() + i * C, gb.data.data() + (i / k) * C);
                            }
                          },
                          "group_rowdot");
}

/// Row sums -> [R].
inline Var rowsum(Var x) {
  const Tensor& xv = x.value();
  detail::matrix_like("rowsum", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor y(Shape{R});
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += xv.data[r * C + c];
    y[r] = s;
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, R, C](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < R; ++r)
                              for (std::size_t c = 0; c < C; ++c) gx.data[r * C + c] += g[r];
                          },
                          "rowsum");
}

/// Row maxima -> [R]; the gradient goes to the first maximal entry.
inline Var rowmax(Var x) {
  const Tensor& xv = x.value();
  detail::matrix_like("rowmax", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  detail::require(C > 0, "rowmax", "empty rows");
  Tensor y(Shape{R});
  std::vector<std::size_t> arg(R);
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (xv.data[r * C + c] > xv.data[r * C + best]) best = c;
    arg[r] = best;
    y[r] = xv.data[r * C + best];
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, arg, C](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < arg.size(); ++r) gx.data[r * C + arg[r]] += g[r];
                          },
                          "rowmax");
}

/// Elementwise binary cross-entropy against constant targets, taking logits
/// z: max(z,0) - z*c + log(1 + exp(-|z|)).
inline Var bce_with_logits(Var z, const Tensor& target) {
  const Tensor& zv = z.value();
  detail::require(target.size() == zv.size(), "bce_with_logits",
                  "target shape mismatch, expected " + shape_str(zv.shape) + " got " + shape_str(target.shape));
  Tensor y(zv.shape);
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double v = zv[i];
    y[i] = std::max(v, 0.0) - v * target[i] + std::log1p(std::exp(-std::fabs(v)));
  }
  const auto zi = z.id();
  return z.tape()->record(std::move(y), {z},
                          [zi, target](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& zv = t.value(Var(&t, zi));
                            Tensor& gz = t.accumulate(zi);
                            for (std::size_t i = 0; i < g.size(); ++i) gz[i] += g[i] * (detail::sigmoid(zv[i]) - target[i]);
                          },
                          "bce_with_logits");
}

// ---------------------------------------------------------------------------
// structural

/// Same data, new shape.
inline Var reshape(Var x, Shape shape) {
  const Tensor& xv = x.value();
  detail::require(shape_numel(shape) == xv.size(), "reshape",
                  "cannot view " + shape_str(xv.shape) + " as " + shape_str(shape));
  Tensor y(std::move(shape), xv.data);
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi](Tape& t, const Tensor&, const Tensor& g) {
                            detail::axpy(g.size(), 1.0, g.data.data(), t.accumulate(xi).data.data());
                          },
                          "reshape");
}

/// [R x Ca] ++ [R x Cb] -> [R x (Ca+Cb)].
inline Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::matrix_like("concat_cols", av);
  detail::matrix_like("concat_cols", bv);
  detail::require(av.rows() == bv.rows() && av.rank() == bv.rank(), "concat_cols",
                  "row mismatch between " + shape_str(av.shape) + " and " + shape_str(bv.shape));
  const std::size_t R = av.rows(), Ca = av.cols(), Cb = bv.cols(), C = Ca + Cb;
  Tensor y(av.rank() == 1 ? Shape{C} : Shape{R, C});
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(av.data.data() + r * Ca, Ca, y.data.data() + r * C);
    std::copy_n(bv.data.data() + r * Cb, Cb, y.data.data() + r * C + Ca);
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape()->record(std::move(y), {a, b},
                          [ai, bi, R, Ca, Cb, C](Tape& t, const Tensor&, const Tensor& g) {
                            if (t.wants_grad(ai)) {
                              Tensor& ga = t.accumulate(ai);
                              for (std::size_t r = 0; r < R; ++r)
                                detail::axpy(Ca, 1.0, g.data.data() + r * C, ga.data.data() + r * Ca);
                            }
                            if (t.wants_grad(bi)) {
                              Tensor& gb = t.accumulate(bi);
                              for (std::size_t r = 0; r < R; ++r)
                                detail::axpy(Cb, 1.0, g.data.data() + r * C + Ca, gb.data.data() + r * Cb);
                            }
                          },
                          "concat_cols");
}

/// Columns [start, start+len) of every row.
inline Var slice_cols(Var x, std::size_t start, std::size_t len) {
  const Tensor& xv = x.value();
  detail::matrix_like("slice_cols", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  detail::require(start + len <= C, "slice_cols",
                  "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside " + shape_str(xv.shape));
  Tensor y(xv.rank() == 1 ? Shape{len} : Shape{R, len});
  for (std::size_t r = 0; r < R; ++r) std::copy_n(xv.data.data() + r * C + start, len, y.data.data() + r * len);
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, R, C, start, len](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < R; ++r)
                              detail::axpy(len, 1.0, g.data.data() + r * len, gx.data.data() + r * C + start);
                          },
                          "slice_cols");
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t C = parts[0].value().cols();
  std::size_t R = 0;
  for (const Var& p : parts) {
    detail::matrix_like("concat_rows", p.value());
    detail::require(p.value().cols() == C, "concat_rows",
                    "column mismatch, expected " + std::to_string(C) + " got " + shape_str(p.value().shape));
    R += p.value().rows();
  }
  Tensor y(Shape{R, C});
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
    ids.push_back(p.id());
  }
  return parts[0].tape()->record(std::move(y), parts,
                                 [ids](Tape& t, const Tensor&, const Tensor& g) {
                                   std::size_t off = 0;
                                   for (auto id : ids) {
                                     const std::size_t n = t.value(Var(&t, id)).size();
                                     if (t.wants_grad(id)) detail::axpy(n, 1.0, g.data.data() + off, t.accumulate(id).data.data());
                                     off += n;
                                   }
                                 },
                                 "concat_rows");
}

/// Each row repeated k times consecutively: [R x C] -> [R*k x C].
inline Var repeat_rows(Var x, std::size_t k) {
  const Tensor& xv = x.value();
  detail::matrix_like("repeat_rows", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor y(Shape{R * k, C});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t i = 0; i < k; ++i) std::copy_n(xv.data.data() + r * C, C, y.data.data() + (r * k + i) * C);
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, R, C, k](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < R; ++r)
                              for (std::size_t i = 0; i < k; ++i)
                                detail::axpy(C, 1.0, g.data.data() + (r * k + i) * C, gx.data.data() + r * C);
                          },
                          "repeat_rows");
}

/// Scales row r of x [R x C] by s[r]; s has R entries.
inline Var row_scale(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  detail::matrix_like("row_scale", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  detail::require(sv.size() == R, "row_scale",
                  "scale needs " + std::to_string(R) + " entries, got shape " + shape_str(sv.shape));
  Tensor y(xv.shape);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y.data[r * C + c] = sv[r] * xv.data[r * C + c];
  const auto xi = x.id(), si = s.id();
  return x.tape()->record(std::move(y), {x, s},
                          [xi, si, R, C](Tape& t, const Tensor&, const Tensor& g) {
                            const Tensor& xv = t.value(Var(&t, xi));
                            const Tensor& sv = t.value(Var(&t, si));
                            if (t.wants_grad(xi)) {
                              Tensor& gx = t.accumulate(xi);
                              for (std::size_t r = 0; r < R; ++r)
                                detail::axpy(C, sv[r], g.data.data() + r * C, gx.data.data() + r * C);
                            }
                            if (t.wants_grad(si)) {
                              Tensor& gs = t.accumulate(si);
                              for (std::size_t r = 0; r < R; ++r)
                                gs[r] += detail::dot(C, g.data.data() + r * C, xv.data.data() + r * C);
                            }
                          },
                          "row_scale");
}

/// Picks x[r][idx[r]] for every row -> [R].
inline Var gather_cols(Var x, const std::vector<std::size_t>& idx) {
  const Tensor& xv = x.value();
  detail::matrix_like("gather_cols", xv);
  const std::size_t R = xv.rows(), C = xv.cols();
  detail::require(idx.size() == R, "gather_cols",
                  "need " + std::to_string(R) + " indices, got " + std::to_string(idx.size()));
  Tensor y(Shape{R});
  for (std::size_t r = 0; r < R; ++r) {
    detail::require(idx[r] < C, "gather_cols", "index " + std::to_string(idx[r]) + " out of range " + std::to_string(C));
    y[r] = xv.data[r * C + idx[r]];
  }
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, idx, C](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t r = 0; r < idx.size(); ++r) gx.data[r * C + idx[r]] += g[r];
                          },
                          "gather_cols");
}

/// Replaces masked entries by constants. Overridden entries carry no
/// gradient back to x.
inline Var override_entries(Var x, const std::vector<std::uint8_t>& mask, const Tensor& values) {
  const Tensor& xv = x.value();
  detail::require(mask.size() == xv.size() && values.size() == xv.size(), "override_entries",
                  "mask/value size mismatch for shape " + shape_str(xv.shape));
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = mask[i] ? values[i] : xv[i];
  const auto xi = x.id();
  return x.tape()->record(std::move(y), {x},
                          [xi, mask](Tape& t, const Tensor&, const Tensor& g) {
                            Tensor& gx = t.accumulate(xi);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (!mask[i]) gx[i] += g[i];
                          },
                          "override");
}

}  // namespace cmq::ad
