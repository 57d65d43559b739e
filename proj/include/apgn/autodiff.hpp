#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns a growing list of nodes; each op appends one node holding the
// forward value and a closure that scatters the node's gradient back to its
// inputs. Backward walks the tape in reverse creation order, so accumulation
// order is fixed and results are bit-reproducible for a given tape.

#include <cassert>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "apgn/errors.hpp"
#include "apgn/mat.hpp"

namespace apgn {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int i = -1;
  bool valid() const { return tape != nullptr; }
};

template <typename T>
class Tape {
 public:
  using M = Mat<T>;

  struct Node {
    M val;
    const M* ext = nullptr;  // external storage for parameter leaves
    M grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf referencing externally owned storage (model parameters). The pointee
  // must outlive the tape and stay unmodified until backward() is done.
  Var<T> leaf(const M* p, bool requires_grad = true) {
    Node n;
    n.ext = p;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  Var<T> constant(M v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  Var<T> scalar_constant(T v) {
    M m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  Var<T> make(M v, bool requires_grad) {
    Node n;
    n.val = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  void set_back(int i, std::function<void(Tape&)> fn) { nodes_[i].back = std::move(fn); }

  const M& val(int i) const {
    const Node& n = nodes_[i];
    return n.ext ? *n.ext : n.val;
  }
  const M& val(Var<T> v) const { return val(v.i); }

  bool needs_grad(int i) const { return nodes_[i].requires_grad; }
  bool needs_grad(Var<T> v) const { return nodes_[v.i].requires_grad; }

  // Gradient buffer of node i, zero-initialized on first touch.
  M& grad_ref(int i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) {
      const M& v = val(i);
      n.grad = M::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  // Gradient flowing into node i during backward; only valid for nodes whose
  // closure is currently running (backward() guarantees it is sized).
  const M& out_grad(int i) const { return nodes_[i].grad; }

  void backward(Var<T> root) {
    assert(root.tape == this);
    for (Node& n : nodes_) n.grad.resize(0, 0);
    Node& r = nodes_[root.i];
    if (!r.requires_grad)
      throw ValidationError("backward: root does not depend on any parameter");
    r.grad = M::Ones(val(root.i).rows(), val(root.i).cols());
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.requires_grad && n.grad.size() != 0) n.back(*this);
    }
  }

  // Gradient of a node after backward(); zeros if it was not reached.
  M grad_of(Var<T> v) const {
    const Node& n = nodes_[v.i];
    if (n.grad.size() == 0) {
      const M& x = val(v.i);
      return M::Zero(x.rows(), x.cols());
    }
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace ad_detail {
template <typename T>
bool any_requires(std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (v.tape->needs_grad(v)) return true;
  return false;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace ad_detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  if (t.val(a).cols() != t.val(b).rows()) throw ValidationError("matmul: inner dim mismatch");
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> out = t.make(t.val(a) * t.val(b), req);
  if (req) {
    int self = out.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) tp.grad_ref(ai).noalias() += g * tp.val(bi).transpose();
      if (tp.needs_grad(bi)) tp.grad_ref(bi).noalias() += tp.val(ai).transpose() * g;
    });
  }
  return out;
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> out = t.make(t.val(a).transpose(), req);
  if (req) {
    int self = out.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      tp.grad_ref(ai) += tp.out_grad(self).transpose();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> out = t.make(t.val(a) + t.val(b), req);
  if (req) {
    int self = out.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) tp.grad_ref(ai) += g;
      if (tp.needs_grad(bi)) tp.grad_ref(bi) += g;
    });
  }
  return out;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> out = t.make(t.val(a) - t.val(b), req);
  if (req) {
    int self = out.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) tp.grad_ref(ai) += g;
      if (tp.needs_grad(bi)) tp.grad_ref(bi) -= g;
    });
  }
  return out;
}

template <typename T>
Var<T> elem_mul(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> out = t.make(t.val(a).cwiseProduct(t.val(b)), req);
  if (req) {
    int self = out.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) tp.grad_ref(ai) += g.cwiseProduct(tp.val(bi));
      if (tp.needs_grad(bi)) tp.grad_ref(bi) += g.cwiseProduct(tp.val(ai));
    });
  }
  return out;
}

template <typename T>
Var<T> elem_div(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> out = t.make(t.val(a).cwiseQuotient(t.val(b)), req);
  if (req) {
    int self = out.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      const Mat<T>& bv = tp.val(bi);
      if (tp.needs_grad(ai)) tp.grad_ref(ai) += g.cwiseQuotient(bv);
      if (tp.needs_grad(bi))
        tp.grad_ref(bi) -= g.cwiseProduct(tp.val(self)).cwiseQuotient(bv);
    });
  }
  return out;
}

// min(a, c) with constant c; ties send the (one-sided) derivative to a.
template <typename T>
Var<T> elem_min_const(Var<T> a, Mat<T> c) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> out = t.make(t.val(a).cwiseMin(c), req);
  if (req) {
    int self = out.i, ai = a.i;
    auto cc = std::make_shared<Mat<T>>(std::move(c));
    t.set_back(self, [self, ai, cc](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      const Mat<T>& av = tp.val(ai);
      tp.grad_ref(ai) += g.cwiseProduct(
          (av.array() <= cc->array()).template cast<T>().matrix());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaling / broadcast
// ---------------------------------------------------------------------------

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> out = t.make(t.val(a) * s, req);
  if (req) {
    int self = out.i, ai = a.i;
    t.set_back(self, [self, ai, s](Tape<T>& tp) {
      tp.grad_ref(ai) += tp.out_grad(self) * s;
    });
  }
  return out;
}

template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {  // b: [1 x C]
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Mat<T> out = t.val(a);
  out.rowwise() += Eigen::RowVector<T, Eigen::Dynamic>(t.val(b).row(0));
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) tp.grad_ref(ai) += g;
      if (tp.needs_grad(bi)) tp.grad_ref(bi) += g.colwise().sum();
    });
  }
  return o;
}

template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> b) {  // b: [1 x C]
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Mat<T> out = t.val(a);
  out.array().rowwise() *= t.val(b).row(0).array();
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) {
        Mat<T> ga = g;
        ga.array().rowwise() *= tp.val(bi).row(0).array();
        tp.grad_ref(ai) += ga;
      }
      if (tp.needs_grad(bi))
        tp.grad_ref(bi) += g.cwiseProduct(tp.val(ai)).colwise().sum();
    });
  }
  return o;
}

// Per-row scaling by a constant vector (masking).
template <typename T>
Var<T> colvec_scale_const(Var<T> a, std::vector<T> s) {
  Tape<T>& t = *a.tape;
  if ((int)s.size() != t.val(a).rows()) throw ValidationError("colvec_scale_const: size mismatch");
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a);
  for (int r = 0; r < out.rows(); ++r) out.row(r) *= s[r];
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    auto sv = std::make_shared<std::vector<T>>(std::move(s));
    t.set_back(self, [self, ai, sv](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      Mat<T>& ga = tp.grad_ref(ai);
      for (int r = 0; r < g.rows(); ++r) ga.row(r) += g.row(r) * (*sv)[r];
    });
  }
  return o;
}

// Row-wise select: out.row(i) = take_a[i] ? a.row(i) : b.row(i). Exact (no
// arithmetic), used to carry recurrent state across padded steps.
template <typename T>
Var<T> row_select_const(Var<T> a, Var<T> b, std::vector<uint8_t> take_a) {
  Tape<T>& t = *a.tape;
  bool req = ad_detail::any_requires<T>({a, b});
  Mat<T> out = t.val(b);
  const Mat<T>& av = t.val(a);
  for (int r = 0; r < out.rows(); ++r)
    if (take_a[r]) out.row(r) = av.row(r);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i, bi = b.i;
    auto m = std::make_shared<std::vector<uint8_t>>(std::move(take_a));
    t.set_back(self, [self, ai, bi, m](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      bool ra = tp.needs_grad(ai), rb = tp.needs_grad(bi);
      Mat<T>* ga = ra ? &tp.grad_ref(ai) : nullptr;
      Mat<T>* gb = rb ? &tp.grad_ref(bi) : nullptr;
      for (int r = 0; r < g.rows(); ++r) {
        if ((*m)[r]) {
          if (ra) ga->row(r) += g.row(r);
        } else {
          if (rb) gb->row(r) += g.row(r);
        }
      }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> out = t.make(t.val(a).cwiseMax(T(0)), req);
  if (req) {
    int self = out.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      tp.grad_ref(ai) += g.cwiseProduct(
          (tp.val(ai).array() > T(0)).template cast<T>().matrix());
    });
  }
  return out;
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a).unaryExpr([](T x) { return ad_detail::stable_sigmoid(x); });
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& y = tp.val(self);
      tp.grad_ref(ai) += tp.out_grad(self).cwiseProduct(
          y.cwiseProduct((Mat<T>::Ones(y.rows(), y.cols()) - y)));
    });
  }
  return o;
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a).array().tanh().matrix();
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& y = tp.val(self);
      tp.grad_ref(ai) += tp.out_grad(self).cwiseProduct(
          (Mat<T>::Ones(y.rows(), y.cols()) - y.cwiseProduct(y)));
    });
  }
  return o;
}

template <typename T>
Var<T> softplus(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a).unaryExpr([](T x) { return ad_detail::stable_softplus(x); });
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      Mat<T> s = tp.val(ai).unaryExpr([](T x) { return ad_detail::stable_sigmoid(x); });
      tp.grad_ref(ai) += tp.out_grad(self).cwiseProduct(s);
    });
  }
  return o;
}

// Elementwise smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
template <typename T>
Var<T> smooth_l1(Var<T> a) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a).unaryExpr([](T x) {
    T ax = std::abs(x);
    return ax < T(1) ? T(0.5) * x * x : ax - T(0.5);
  });
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      Mat<T> d = tp.val(ai).unaryExpr([](T x) {
        return std::abs(x) < T(1) ? x : (x > T(0) ? T(1) : T(-1));
      });
      tp.grad_ref(ai) += tp.out_grad(self).cwiseProduct(d);
    });
  }
  return o;
}

// 1/sqrt(x + eps)
template <typename T>
Var<T> rsqrt_shift(Var<T> a, T eps) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = (t.val(a).array() + eps).rsqrt().matrix();
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& y = tp.val(self);
      tp.grad_ref(ai) += tp.out_grad(self).cwiseProduct(
          (y.array().cube() * T(-0.5)).matrix());
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Var<T> row_mean(Var<T> a) {  // [R x C] -> [R x 1]
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out = t.val(a).rowwise().mean();
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      int c = (int)tp.val(ai).cols();
      tp.grad_ref(ai) += (g * Mat<T>::Ones(1, c)) / T(c);
    });
  }
  return o;
}

template <typename T>
Var<T> broadcast_col(Var<T> v, int cols) {  // [R x 1] -> [R x cols]
  Tape<T>& t = *v.tape;
  bool req = t.needs_grad(v);
  Mat<T> out = t.val(v) * Mat<T>::Ones(1, cols);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, vi = v.i;
    t.set_back(self, [self, vi](Tape<T>& tp) {
      tp.grad_ref(vi) += tp.out_grad(self).rowwise().sum();
    });
  }
  return o;
}

template <typename T>
Var<T> sum_all(Var<T> a) {  // -> [1 x 1]
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Mat<T> out(1, 1);
  out(0, 0) = t.val(a).sum();
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& x = tp.val(ai);
      tp.grad_ref(ai).array() += tp.out_grad(self)(0, 0);
      (void)x;
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Softmax (masked)
// ---------------------------------------------------------------------------

// Row-wise softmax over columns where col_mask is nonzero (empty mask = all
// valid). Fully-masked rows produce zeros.
template <typename T>
Var<T> softmax_rows(Var<T> a, std::vector<uint8_t> col_mask = {}) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  int rows = (int)x.rows(), cols = (int)x.cols();
  if (!col_mask.empty() && (int)col_mask.size() != cols)
    throw ValidationError("softmax_rows: mask size mismatch");
  Mat<T> y(rows, cols);
  for (int r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c)
      if (col_mask.empty() || col_mask[c]) mx = std::max(mx, x(r, c));
    if (!std::isfinite(mx)) {
      y.row(r).setZero();
      continue;
    }
    T s = 0;
    for (int c = 0; c < cols; ++c) {
      if (col_mask.empty() || col_mask[c]) {
        y(r, c) = std::exp(x(r, c) - mx);
        s += y(r, c);
      } else {
        y(r, c) = 0;
      }
    }
    y.row(r) /= s;
  }
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(y), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& yv = tp.val(self);
      const Mat<T>& g = tp.out_grad(self);
      Mat<T> gy = g.cwiseProduct(yv);
      Mat<T> rs = gy.rowwise().sum();
      Mat<T>& ga = tp.grad_ref(ai);
      for (int r = 0; r < yv.rows(); ++r)
        ga.row(r) += gy.row(r) - yv.row(r) * rs(r, 0);
    });
  }
  return o;
}

// Column-wise softmax over rows where row_mask is nonzero.
template <typename T>
Var<T> softmax_cols(Var<T> a, std::vector<uint8_t> row_mask = {}) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  int rows = (int)x.rows(), cols = (int)x.cols();
  if (!row_mask.empty() && (int)row_mask.size() != rows)
    throw ValidationError("softmax_cols: mask size mismatch");
  Mat<T> y(rows, cols);
  for (int c = 0; c < cols; ++c) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int r = 0; r < rows; ++r)
      if (row_mask.empty() || row_mask[r]) mx = std::max(mx, x(r, c));
    if (!std::isfinite(mx)) {
      y.col(c).setZero();
      continue;
    }
    T s = 0;
    for (int r = 0; r < rows; ++r) {
      if (row_mask.empty() || row_mask[r]) {
        y(r, c) = std::exp(x(r, c) - mx);
        s += y(r, c);
      } else {
        y(r, c) = 0;
      }
    }
    y.col(c) /= s;
  }
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(y), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai](Tape<T>& tp) {
      const Mat<T>& yv = tp.val(self);
      const Mat<T>& g = tp.out_grad(self);
      Mat<T> gy = g.cwiseProduct(yv);
      Mat<T> cs = gy.colwise().sum();
      Mat<T>& ga = tp.grad_ref(ai);
      for (int c = 0; c < yv.cols(); ++c)
        ga.col(c) += gy.col(c) - yv.col(c) * cs(0, c);
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Structure: concat / slice / gather / pool
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  Tape<T>& t = *parts.front().tape;
  int rows = (int)t.val(parts[0]).rows(), cols = 0;
  bool req = false;
  for (auto p : parts) {
    cols += (int)t.val(p).cols();
    req = req || t.needs_grad(p);
  }
  Mat<T> out(rows, cols);
  std::vector<int> idx, offs;
  int off = 0;
  for (auto p : parts) {
    int c = (int)t.val(p).cols();
    out.middleCols(off, c) = t.val(p);
    idx.push_back(p.i);
    offs.push_back(off);
    off += c;
  }
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i;
    auto ids = std::make_shared<std::vector<int>>(std::move(idx));
    auto ofs = std::make_shared<std::vector<int>>(std::move(offs));
    t.set_back(self, [self, ids, ofs](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      for (size_t k = 0; k < ids->size(); ++k) {
        int i = (*ids)[k];
        if (!tp.needs_grad(i)) continue;
        int c = (int)tp.val(i).cols();
        tp.grad_ref(i) += g.middleCols((*ofs)[k], c);
      }
    });
  }
  return o;
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  Tape<T>& t = *parts.front().tape;
  int cols = (int)t.val(parts[0]).cols(), rows = 0;
  bool req = false;
  for (auto p : parts) {
    rows += (int)t.val(p).rows();
    req = req || t.needs_grad(p);
  }
  Mat<T> out(rows, cols);
  std::vector<int> idx, offs;
  int off = 0;
  for (auto p : parts) {
    int r = (int)t.val(p).rows();
    out.middleRows(off, r) = t.val(p);
    idx.push_back(p.i);
    offs.push_back(off);
    off += r;
  }
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i;
    auto ids = std::make_shared<std::vector<int>>(std::move(idx));
    auto ofs = std::make_shared<std::vector<int>>(std::move(offs));
    t.set_back(self, [self, ids, ofs](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      for (size_t k = 0; k < ids->size(); ++k) {
        int i = (*ids)[k];
        if (!tp.needs_grad(i)) continue;
        int r = (int)tp.val(i).rows();
        tp.grad_ref(i) += g.middleRows((*ofs)[k], r);
      }
    });
  }
  return o;
}

template <typename T>
Var<T> slice_rows(Var<T> a, int r0, int n) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> o = t.make(t.val(a).middleRows(r0, n), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai, r0, n](Tape<T>& tp) {
      tp.grad_ref(ai).middleRows(r0, n) += tp.out_grad(self);
    });
  }
  return o;
}

template <typename T>
Var<T> slice_cols(Var<T> a, int c0, int n) {
  Tape<T>& t = *a.tape;
  bool req = t.needs_grad(a);
  Var<T> o = t.make(t.val(a).middleCols(c0, n), req);
  if (req) {
    int self = o.i, ai = a.i;
    t.set_back(self, [self, ai, c0, n](Tape<T>& tp) {
      tp.grad_ref(ai).middleCols(c0, n) += tp.out_grad(self);
    });
  }
  return o;
}

// Gather rows by index (duplicates allowed); also serves as row permutation
// and embedding lookup.
template <typename T>
Var<T> row_gather(Var<T> a, std::vector<int> rows) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  Mat<T> out((int)rows.size(), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row((int)i) = x.row(rows[i]);
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    auto rr = std::make_shared<std::vector<int>>(std::move(rows));
    t.set_back(self, [self, ai, rr](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      Mat<T>& ga = tp.grad_ref(ai);
      for (size_t i = 0; i < rr->size(); ++i) ga.row((*rr)[i]) += g.row((int)i);
    });
  }
  return o;
}

// Column-wise max over contiguous row ranges [begin, end); one output row per
// range. Ties resolve to the smallest row index.
template <typename T>
Var<T> rows_reduce_max(Var<T> a, std::vector<std::pair<int, int>> ranges) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  int cols = (int)x.cols();
  Mat<T> out((int)ranges.size(), cols);
  std::vector<int> argmax(ranges.size() * cols);
  for (size_t gidx = 0; gidx < ranges.size(); ++gidx) {
    auto [b, e] = ranges[gidx];
    if (b >= e) throw ValidationError("rows_reduce_max: empty range");
    for (int c = 0; c < cols; ++c) {
      T best = x(b, c);
      int bi = b;
      for (int r = b + 1; r < e; ++r)
        if (x(r, c) > best) {
          best = x(r, c);
          bi = r;
        }
      out((int)gidx, c) = best;
      argmax[gidx * cols + c] = bi;
    }
  }
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    auto am = std::make_shared<std::vector<int>>(std::move(argmax));
    t.set_back(self, [self, ai, am, cols](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      Mat<T>& ga = tp.grad_ref(ai);
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < cols; ++c) ga((*am)[r * cols + c], c) += g(r, c);
    });
  }
  return o;
}

template <typename T>
Var<T> rows_reduce_mean(Var<T> a, std::vector<std::pair<int, int>> ranges) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  Mat<T> out((int)ranges.size(), x.cols());
  for (size_t gidx = 0; gidx < ranges.size(); ++gidx) {
    auto [b, e] = ranges[gidx];
    if (b >= e) throw ValidationError("rows_reduce_mean: empty range");
    out.row((int)gidx) = x.middleRows(b, e - b).colwise().mean();
  }
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    auto rg = std::make_shared<std::vector<std::pair<int, int>>>(std::move(ranges));
    t.set_back(self, [self, ai, rg](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      Mat<T>& ga = tp.grad_ref(ai);
      for (int r = 0; r < g.rows(); ++r) {
        auto [b, e] = (*rg)[r];
        ga.middleRows(b, e - b).rowwise() +=
            Eigen::RowVector<T, Eigen::Dynamic>(g.row(r)) / T(e - b);
      }
    });
  }
  return o;
}

// All ordered pairs of rows: out[i*M + j] = a.row(i) + b.row(j) - b.row(i),
// where a and b have the same shape [M x C].
template <typename T>
Var<T> pairwise_combine(Var<T> a, Var<T> b) {
  Tape<T>& t = *a.tape;
  const Mat<T>& av = t.val(a);
  const Mat<T>& bv = t.val(b);
  int m = (int)av.rows(), c = (int)av.cols();
  if (bv.rows() != m || bv.cols() != c) throw ValidationError("pairwise_combine: shape mismatch");
  Mat<T> out(m * m, c);
  for (int i = 0; i < m; ++i) {
    auto base = av.row(i) - bv.row(i);
    for (int j = 0; j < m; ++j) out.row(i * m + j) = base + bv.row(j);
  }
  bool req = ad_detail::any_requires<T>({a, b});
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i, bi = b.i;
    t.set_back(self, [self, ai, bi, m](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      if (tp.needs_grad(ai)) {
        Mat<T>& ga = tp.grad_ref(ai);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < m; ++j) ga.row(i) += g.row(i * m + j);
      }
      if (tp.needs_grad(bi)) {
        Mat<T>& gb = tp.grad_ref(bi);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < m; ++j) {
            gb.row(j) += g.row(i * m + j);
            gb.row(i) -= g.row(i * m + j);
          }
      }
    });
  }
  return o;
}

// Shift rows in time within each [begin, end) block: out[r] = a[r + shift] if
// r + shift stays inside r's block, else zeros. Implements temporal
// convolution taps with zero padding at block boundaries.
template <typename T>
Var<T> time_shift(Var<T> a, int shift, std::vector<std::pair<int, int>> blocks) {
  Tape<T>& t = *a.tape;
  const Mat<T>& x = t.val(a);
  Mat<T> out = Mat<T>::Zero(x.rows(), x.cols());
  for (auto [b, e] : blocks)
    for (int r = b; r < e; ++r) {
      int src = r + shift;
      if (src >= b && src < e) out.row(r) = x.row(src);
    }
  bool req = t.needs_grad(a);
  Var<T> o = t.make(std::move(out), req);
  if (req) {
    int self = o.i, ai = a.i;
    auto blk = std::make_shared<std::vector<std::pair<int, int>>>(std::move(blocks));
    t.set_back(self, [self, ai, shift, blk](Tape<T>& tp) {
      const Mat<T>& g = tp.out_grad(self);
      Mat<T>& ga = tp.grad_ref(ai);
      for (auto [b, e] : *blk)
        for (int r = b; r < e; ++r) {
          int src = r + shift;
          if (src >= b && src < e) ga.row(src) += g.row(r);
        }
    });
  }
  return o;
}

// ---------------------------------------------------------------------------
// Small conveniences
// ---------------------------------------------------------------------------

template <typename T>
Var<T> neg_op(Var<T> a) {
  return scale(a, T(-1));
}

template <typename T>
T scalar_value(Var<T> v) {
  return v.tape->val(v)(0, 0);
}

// Mean of scalar [1x1] vars.
template <typename T>
Var<T> mean_of(std::vector<Var<T>> vs) {
  Var<T> acc = vs[0];
  for (size_t i = 1; i < vs.size(); ++i) acc = add(acc, vs[i]);
  return scale(acc, T(1) / T(vs.size()));
}

}  // namespace apgn
