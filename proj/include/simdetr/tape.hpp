// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation on a dynamic tape.
//
// Nodes are appended in execution order, so the tape is its own topological
// order and backward() is a single reverse sweep. Losses are scalars. Leaves
// bound to external Tensors accumulate gradients into Tensor::grad, so
// repeated backward() calls add up until the caller zeroes them.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "simdetr/tensor.hpp"

namespace simdetr {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

class Tape;

// Lightweight handle to a tape node.
class Var {
 public:
  Var() = default;
  const Shape& shape() const;
  const std::vector<double>& value() const;
  double scalar() const;
  std::size_t size() const;
  bool defined() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Backward closures receive the tape and the node's own id.
  using BackFn = std::function<void(Tape&, int)>;

  // Leaf bound to an external tensor; backward() accumulates into t.grad.
  Var leaf(Tensor& t) {
    return push("leaf", t.shape, t.data, t.requires_grad, nullptr, &t);
  }

  Var constant(const Tensor& t) {
    return push("const", t.shape, t.data, false, nullptr, nullptr);
  }

  Var constant(Shape shape, std::vector<double> data) {
    return push("const", std::move(shape), std::move(data), false, nullptr, nullptr);
  }

  Var constant(double v) { return push("const", Shape{}, {v}, false, nullptr, nullptr); }

  Var push(const char* op, Shape shape, std::vector<double> val, bool needs_grad,
           BackFn back, Tensor* bound = nullptr) {
    if (numel(shape) != val.size()) {
      throw std::invalid_argument(std::string(op) + ": shape/buffer mismatch");
    }
    if (!all_finite(val)) {
      throw std::runtime_error(std::string(op) + ": non-finite result");
    }
    Node n;
    n.shape = std::move(shape);
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.back = needs_grad ? std::move(back) : nullptr;
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Populates grads of every requires_grad leaf reachable from `loss`.
  // `seed` is the upstream gradient of the loss itself (1 by default);
  // batch averaging passes 1/batch_size.
  void backward(const Var& loss, double seed = 1.0) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss from another tape");
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    int top = loss.id();
    for (int i = 0; i <= top; ++i) {
      nodes_[i].grad.assign(nodes_[i].val.size(), 0.0);
    }
    nodes_[top].grad[0] = seed;
    for (int i = top; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.back) n.back(*this, i);
    }
    for (int i = 0; i <= top; ++i) {
      Node& n = nodes_[i];
      if (n.bound && n.needs_grad) {
        n.bound->ensure_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) n.bound->grad[k] += n.grad[k];
      }
    }
  }

  const Shape& shape_of(int id) const { return nodes_[id].shape; }
  const std::vector<double>& val_of(int id) const { return nodes_[id].val; }
  std::vector<double>& grad_of(int id) { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* bound = nullptr;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape_->shape_of(id_); }
inline const std::vector<double>& Var::value() const { return tape_->val_of(id_); }
inline std::size_t Var::size() const { return tape_->val_of(id_).size(); }
inline double Var::scalar() const {
  const auto& v = tape_->val_of(id_);
  if (v.size() != 1) throw std::invalid_argument("Var::scalar: size != 1");
  return v[0];
}

namespace detail {

inline Tape* same_tape(const Var& a, const Var& b) {
  if (!a.defined() || !b.defined() || a.tape() != b.tape()) {
    throw std::invalid_argument("op: operands from different tapes");
  }
  return a.tape();
}

// An operand is broadcast-compatible with the output if it has the same
// shape, is a scalar, or its shape is a suffix of the output shape
// (broadcast over leading dims). Row-major layout makes the element map a
// plain modulo by the operand size.
inline bool bcast_ok(const Shape& operand, const Shape& out) {
  if (operand == out) return true;
  if (numel(operand) == 1) return true;
  if (operand.size() > out.size()) return false;
  std::size_t off = out.size() - operand.size();
  for (std::size_t i = 0; i < operand.size(); ++i) {
    if (operand[i] != out[off + i]) return false;
  }
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcast over leading dims

inline Var binary_op(const char* name, const Var& a, const Var& b,
                     double (*fwd)(double, double),
                     void (*bwd)(double, double, double, double&, double&)) {
  Tape* t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Shape out_shape;
  if (detail::bcast_ok(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (detail::bcast_ok(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw std::invalid_argument(std::string(name) + ": incompatible shapes " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::size_t n = numel(out_shape);
  std::size_t an = av.size(), bn = bv.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % an], bv[i % bn]);
  bool ng = t->needs_grad(a.id()) || t->needs_grad(b.id());
  int aid = a.id(), bid = b.id();
  return t->push(name, std::move(out_shape), std::move(out), ng,
                 [aid, bid, bwd](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   const auto& av2 = tp.val_of(aid);
                   const auto& bv2 = tp.val_of(bid);
                   auto& ga = tp.grad_of(aid);
                   auto& gb = tp.grad_of(bid);
                   std::size_t an2 = av2.size(), bn2 = bv2.size();
                   bool need_a = tp.needs_grad(aid), need_b = tp.needs_grad(bid);
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     double da = 0.0, db = 0.0;
                     bwd(av2[i % an2], bv2[i % bn2], g[i], da, db);
                     if (need_a) ga[i % an2] += da;
                     if (need_b) gb[i % bn2] += db;
                   }
                 });
}

inline Var add(const Var& a, const Var& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

inline Var sub(const Var& a, const Var& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

inline Var mul(const Var& a, const Var& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

inline Var div(const Var& a, const Var& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

// Ties route the gradient to the first argument.
inline Var emin(const Var& a, const Var& b) {
  return binary_op(
      "emin", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x <= y) da = g; else db = g;
      });
}

inline Var emax(const Var& a, const Var& b) {
  return binary_op(
      "emax", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x >= y) da = g; else db = g;
      });
}

// ---------------------------------------------------------------------------
// elementwise unary ops

inline Var unary_op(const char* name, const Var& a, double (*fwd)(double),
                    double (*bwd)(double /*x*/, double /*y*/)) {
  Tape* t = a.tape();
  if (!t) throw std::invalid_argument("op on undefined Var");
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  bool ng = t->needs_grad(a.id());
  int aid = a.id();
  return t->push(name, a.shape(), std::move(out), ng,
                 [aid, bwd](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   const auto& x = tp.val_of(aid);
                   const auto& y = tp.val_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(x[i], y[i]);
                 });
}

inline Var neg(const Var& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double) { return -1.0; });
}

inline Var relu(const Var& a) {
  return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return unary_op("sigmoid", a, [](double x) { return stable_sigmoid(x); },
                  [](double, double y) { return y * (1.0 - y); });
}

inline Var vexp(const Var& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

inline Var vlog(const Var& a) {
  return unary_op("log", a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

inline Var vabs(const Var& a) {
  return unary_op("abs", a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// multiply by a plain constant (no extra operand node)
inline Var scale(const Var& a, double c) {
  Tape* t = a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  int aid = a.id();
  return t->push("scale", a.shape(), std::move(out), t->needs_grad(aid),
                 [aid, c](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                 });
}

inline Var add_const(const Var& a, double c) {
  Tape* t = a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  int aid = a.id();
  return t->push("add_const", a.shape(), std::move(out), t->needs_grad(aid),
                 [aid](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 });
}

// ---------------------------------------------------------------------------
// structural ops

inline Var reshape(const Var& a, Shape new_shape) {
  if (numel(new_shape) != a.size()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  Tape* t = a.tape();
  int aid = a.id();
  return t->push("reshape", std::move(new_shape), a.value(), t->needs_grad(aid),
                 [aid](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 });
}

// Gather rows of a rank-2 (or elements of a rank-1) tensor. The index list is
// opaque to differentiation; gradients scatter-add back into the source.
inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
  Tape* t = a.tape();
  const Shape& s = a.shape();
  if (s.size() != 1 && s.size() != 2) {
    throw std::invalid_argument("gather_rows: rank-1 or rank-2 input required");
  }
  std::size_t rows = s[0];
  std::size_t cols = s.size() == 2 ? s[1] : 1;
  for (std::size_t i : idx) {
    if (i >= rows) throw std::invalid_argument("gather_rows: index out of range");
  }
  const auto& av = a.value();
  std::vector<double> out(idx.size() * cols);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    for (std::size_t c = 0; c < cols; ++c) out[k * cols + c] = av[idx[k] * cols + c];
  }
  Shape out_shape = s.size() == 2 ? Shape{idx.size(), cols} : Shape{idx.size()};
  int aid = a.id();
  return t->push("gather_rows", std::move(out_shape), std::move(out), t->needs_grad(aid),
                 [aid, idx, cols](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t k = 0; k < idx.size(); ++k) {
                     for (std::size_t c = 0; c < cols; ++c) {
                       ga[idx[k] * cols + c] += g[k * cols + c];
                     }
                   }
                 });
}

inline Var select_row(const Var& a, std::size_t i) {
  if (a.shape().size() != 2) throw std::invalid_argument("select_row: rank-2 input required");
  Var g = gather_rows(a, {i});
  return reshape(g, {a.shape()[1]});
}

inline Var select(const Var& a, std::size_t i) {
  if (a.shape().size() != 1) throw std::invalid_argument("select: rank-1 input required");
  Var g = gather_rows(a, {i});
  return reshape(g, {});
}

inline Var select_col(const Var& a, std::size_t j) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("select_col: rank-2 input required");
  std::size_t rows = s[0], cols = s[1];
  if (j >= cols) throw std::invalid_argument("select_col: index out of range");
  const auto& av = a.value();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = av[r * cols + j];
  Tape* t = a.tape();
  int aid = a.id();
  return t->push("select_col", Shape{rows}, std::move(out), t->needs_grad(aid),
                 [aid, j, cols](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t r = 0; r < g.size(); ++r) ga[r * cols + j] += g[r];
                 });
}

// ---------------------------------------------------------------------------
// matrix ops

inline Var matmul(const Var& a, const Var& b) {
  Tape* t = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " +
                                shape_str(sb));
  }
  std::size_t p = sa[0], q = sa[1], r = sb[1];
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      double aik = av[i * q + k];
      const double* brow = &bv[k * r];
      double* orow = &out[i * r];
      for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
    }
  }
  bool ng = t->needs_grad(a.id()) || t->needs_grad(b.id());
  int aid = a.id(), bid = b.id();
  return t->push("matmul", Shape{p, r}, std::move(out), ng,
                 [aid, bid, p, q, r](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   const auto& av2 = tp.val_of(aid);
                   const auto& bv2 = tp.val_of(bid);
                   if (tp.needs_grad(aid)) {
                     auto& ga = tp.grad_of(aid);
                     for (std::size_t i = 0; i < p; ++i) {
                       for (std::size_t k = 0; k < q; ++k) {
                         double acc = 0.0;
                         const double* grow = &g[i * r];
                         const double* brow = &bv2[k * r];
                         for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
                         ga[i * q + k] += acc;
                       }
                     }
                   }
                   if (tp.needs_grad(bid)) {
                     auto& gb = tp.grad_of(bid);
                     for (std::size_t i = 0; i < p; ++i) {
                       const double* grow = &g[i * r];
                       for (std::size_t k = 0; k < q; ++k) {
                         double aik = av2[i * q + k];
                         double* gbrow = &gb[k * r];
                         for (std::size_t j = 0; j < r; ++j) gbrow[j] += aik * grow[j];
                       }
                     }
                   }
                 });
}

inline Var transpose(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose: rank-2 input required");
  std::size_t p = s[0], q = s[1];
  const auto& av = a.value();
  std::vector<double> out(p * q);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) out[j * p + i] = av[i * q + j];
  }
  Tape* t = a.tape();
  int aid = a.id();
  return t->push("transpose", Shape{q, p}, std::move(out), t->needs_grad(aid),
                 [aid, p, q](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t i = 0; i < p; ++i) {
                     for (std::size_t j = 0; j < q; ++j) ga[i * q + j] += g[j * p + i];
                   }
                 });
}

// Row-stabilized softmax over the last dim of a rank-2 tensor. Each output
// row sums to 1 within 1e-12.
inline Var softmax_rows(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("softmax_rows: rank-2 input required");
  std::size_t rows = s[0], cols = s[1];
  const auto& av = a.value();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &av[r * cols];
    double m = x[0];
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double sum = 0.0;
    double* y = &out[r * cols];
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  Tape* t = a.tape();
  int aid = a.id();
  return t->push("softmax_rows", s, std::move(out), t->needs_grad(aid),
                 [aid, rows, cols](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   const auto& y = tp.val_of(self);
                   auto& ga = tp.grad_of(aid);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gr = &g[r * cols];
                     const double* yr = &y[r * cols];
                     double dot = 0.0;
                     for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                     for (std::size_t c = 0; c < cols; ++c) {
                       ga[r * cols + c] += yr[c] * (gr[c] - dot);
                     }
                   }
                 });
}

// Row-wise layer normalization with learnable gain/bias over the last dim.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  Tape* t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("layer_norm: rank-2 input required");
  std::size_t rows = s[0], cols = s[1];
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw std::invalid_argument("layer_norm: gamma/beta must have shape (cols)");
  }
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<double> out(rows * cols);
  std::vector<double> xhat(rows * cols);
  std::vector<double> inv_s(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv[r * cols];
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double is = 1.0 / std::sqrt(var + eps);
    inv_s[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      double xh = (xr[c] - mean) * is;
      xhat[r * cols + c] = xh;
      out[r * cols + c] = gv[c] * xh + bv[c];
    }
  }
  bool ng = t->needs_grad(x.id()) || t->needs_grad(gamma.id()) || t->needs_grad(beta.id());
  int xid = x.id(), gid = gamma.id(), bid = beta.id();
  return t->push("layer_norm", s, std::move(out), ng,
                 [xid, gid, bid, rows, cols, xhat = std::move(xhat),
                  inv_s = std::move(inv_s)](Tape& tp, int self) {
                   const auto& g = tp.grad_of(self);
                   const auto& gv2 = tp.val_of(gid);
                   double invc = 1.0 / static_cast<double>(cols);
                   if (tp.needs_grad(gid)) {
                     auto& gg = tp.grad_of(gid);
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < cols; ++c) {
                         gg[c] += g[r * cols + c] * xhat[r * cols + c];
                       }
                     }
                   }
                   if (tp.needs_grad(bid)) {
                     auto& gb = tp.grad_of(bid);
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                     }
                   }
                   if (tp.needs_grad(xid)) {
                     auto& gx = tp.grad_of(xid);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mean_h = 0.0, mean_hx = 0.0;
                       for (std::size_t c = 0; c < cols; ++c) {
                         double h = g[r * cols + c] * gv2[c];
                         mean_h += h;
                         mean_hx += h * xhat[r * cols + c];
                       }
                       mean_h *= invc;
                       mean_hx *= invc;
                       for (std::size_t c = 0; c < cols; ++c) {
                         double h = g[r * cols + c] * gv2[c];
                         gx[r * cols + c] +=
                             inv_s[r] * (h - mean_h - xhat[r * cols + c] * mean_hx);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// reductions and vector ops

inline Var sum(const Var& a) {
  Tape* t = a.tape();
  const auto& av = a.value();
  double s = 0.0;
  for (double v : av) s += v;
  int aid = a.id();
  return t->push("sum", Shape{}, {s}, t->needs_grad(aid), [aid](Tape& tp, int self) {
    double g = tp.grad_of(self)[0];
    auto& ga = tp.grad_of(aid);
    for (double& v : ga) v += g;
  });
}

inline Var mean(const Var& a) {
  Tape* t = a.tape();
  const auto& av = a.value();
  if (av.empty()) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : av) s += v;
  double n = static_cast<double>(av.size());
  int aid = a.id();
  return t->push("mean", Shape{}, {s / n}, t->needs_grad(aid), [aid, n](Tape& tp, int self) {
    double g = tp.grad_of(self)[0] / n;
    auto& ga = tp.grad_of(aid);
    for (double& v : ga) v += g;
  });
}

// Euclidean norm; gradient is zero at the origin.
inline Var norm2(const Var& a) {
  Tape* t = a.tape();
  const auto& av = a.value();
  double s = 0.0;
  for (double v : av) s += v * v;
  double n = std::sqrt(s);
  int aid = a.id();
  return t->push("norm2", Shape{}, {n}, t->needs_grad(aid), [aid, n](Tape& tp, int self) {
    if (n == 0.0) return;
    double g = tp.grad_of(self)[0];
    const auto& x = tp.val_of(aid);
    auto& ga = tp.grad_of(aid);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * x[i] / n;
  });
}

namespace detail {
// cosine gradient shared by cosine_sim and rowwise_cosine
inline void cosine_backward(const double* a, const double* b, std::size_t n, double na,
                            double nb, double c, double g, double* ga, double* gb) {
  double inv = 1.0 / (na * nb);
  double ia2 = c / (na * na);
  double ib2 = c / (nb * nb);
  if (ga) {
    for (std::size_t i = 0; i < n; ++i) ga[i] += g * (b[i] * inv - a[i] * ia2);
  }
  if (gb) {
    for (std::size_t i = 0; i < n; ++i) gb[i] += g * (a[i] * inv - b[i] * ib2);
  }
}
}  // namespace detail

// Cosine similarity of two vectors. A zero-norm operand yields 0 with zero
// gradient (degenerate-input rule).
inline Var cosine_sim(const Var& a, const Var& b) {
  Tape* t = detail::same_tape(a, b);
  if (a.shape().size() != 1 || b.shape().size() != 1 || a.size() != b.size()) {
    throw std::invalid_argument("cosine_sim: two equal-length vectors required");
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  std::size_t n = av.size();
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
    dot += av[i] * bv[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double c = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (na * nb);
  bool ng = t->needs_grad(a.id()) || t->needs_grad(b.id());
  int aid = a.id(), bid = b.id();
  return t->push("cosine_sim", Shape{}, {c}, ng,
                 [aid, bid, n, na, nb, c](Tape& tp, int self) {
                   if (na == 0.0 || nb == 0.0) return;
                   double g = tp.grad_of(self)[0];
                   const auto& a2 = tp.val_of(aid);
                   const auto& b2 = tp.val_of(bid);
                   double* ga = tp.needs_grad(aid) ? tp.grad_of(aid).data() : nullptr;
                   double* gb = tp.needs_grad(bid) ? tp.grad_of(bid).data() : nullptr;
                   detail::cosine_backward(a2.data(), b2.data(), n, na, nb, c, g, ga, gb);
                 });
}

// Cosine similarity between each row of a rank-2 matrix and one vector.
inline Var rowwise_cosine(const Var& m, const Var& q) {
  Tape* t = detail::same_tape(m, q);
  const Shape& s = m.shape();
  if (s.size() != 2 || q.shape().size() != 1 || q.size() != s[1]) {
    throw std::invalid_argument("rowwise_cosine: (R,C) matrix and (C) vector required");
  }
  std::size_t rows = s[0], cols = s[1];
  const auto& mv = m.value();
  const auto& qv = q.value();
  double nq = 0.0;
  for (double v : qv) nq += v * v;
  nq = std::sqrt(nq);
  std::vector<double> out(rows);
  std::vector<double> row_norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* mr = &mv[r * cols];
    double nm = 0.0, dot = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      nm += mr[c] * mr[c];
      dot += mr[c] * qv[c];
    }
    nm = std::sqrt(nm);
    row_norms[r] = nm;
    out[r] = (nm == 0.0 || nq == 0.0) ? 0.0 : dot / (nm * nq);
  }
  bool ng = t->needs_grad(m.id()) || t->needs_grad(q.id());
  int mid = m.id(), qid = q.id();
  return t->push("rowwise_cosine", Shape{rows}, std::move(out), ng,
                 [mid, qid, rows, cols, nq, row_norms = std::move(row_norms)](Tape& tp,
                                                                              int self) {
                   if (nq == 0.0) return;
                   const auto& g = tp.grad_of(self);
                   const auto& y = tp.val_of(self);
                   const auto& mv2 = tp.val_of(mid);
                   const auto& qv2 = tp.val_of(qid);
                   double* gm = tp.needs_grad(mid) ? tp.grad_of(mid).data() : nullptr;
                   double* gq = tp.needs_grad(qid) ? tp.grad_of(qid).data() : nullptr;
                   for (std::size_t r = 0; r < rows; ++r) {
                     if (row_norms[r] == 0.0) continue;
                     detail::cosine_backward(&mv2[r * cols], qv2.data(), cols, row_norms[r],
                                             nq, y[r], g[r], gm ? gm + r * cols : nullptr,
                                             gq);
                   }
                 });
}

// Weighted binary cross-entropy from logits, summed over elements.
// Stable form: w*(max(z,0) - z*y + log1p(exp(-|z|))); gradient w*(sigmoid(z)-y).
inline Var bce_with_logits(const Var& logits, std::vector<double> targets,
                           std::vector<double> weights) {
  Tape* t = logits.tape();
  const auto& zv = logits.value();
  if (targets.size() != zv.size() || weights.size() != zv.size()) {
    throw std::invalid_argument("bce_with_logits: target/weight size mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    double z = zv[i];
    s += weights[i] * (std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::fabs(z))));
  }
  int zid = logits.id();
  return t->push("bce_with_logits", Shape{}, {s}, t->needs_grad(zid),
                 [zid, targets = std::move(targets), weights = std::move(weights)](
                     Tape& tp, int self) {
                   double g = tp.grad_of(self)[0];
                   const auto& z = tp.val_of(zid);
                   auto& gz = tp.grad_of(zid);
                   for (std::size_t i = 0; i < z.size(); ++i) {
                     gz[i] += g * weights[i] * (stable_sigmoid(z[i]) - targets[i]);
                   }
                 });
}

// operator sugar for elementwise arithmetic
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace simdetr
