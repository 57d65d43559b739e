#pragma once

// Parameter storage, initialization, Adam, and the recurring layer shapes
// (linear stacks, layer norm, multi-head self-attention, bidirectional GRU)
// expressed as tape ops.

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "apgn/autodiff.hpp"
#include "apgn/errors.hpp"
#include "apgn/mat.hpp"

namespace apgn {

template <typename T>
class ParamStore {
 public:
  Mat<T>& add(const std::string& name, int rows, int cols) {
    if (data_.count(name)) throw ConfigError("duplicate parameter: " + name);
    order_.push_back(name);
    return data_[name] = Mat<T>::Zero(rows, cols);
  }

  Mat<T>& get(const std::string& name) {
    auto it = data_.find(name);
    if (it == data_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Mat<T>& get(const std::string& name) const {
    auto it = data_.find(name);
    if (it == data_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return data_.count(name) != 0; }

  const std::vector<std::string>& order() const { return order_; }

  size_t scalar_count() const {
    size_t n = 0;
    for (auto& name : order_) n += data_.at(name).size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Mat<T>> data_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <typename T>
void init_glorot_uniform(Mat<T>& w, DetRng& rng) {
  double limit = std::sqrt(6.0 / (double)(w.rows() + w.cols()));
  for (int r = 0; r < w.rows(); ++r)
    for (int c = 0; c < w.cols(); ++c) w(r, c) = (T)rng.uniform(-limit, limit);
}

// Orthogonal init via QR of a Gaussian matrix, sign-fixed for determinism.
template <typename T>
void init_orthogonal(Mat<T>& w, DetRng& rng) {
  int n = (int)w.rows(), m = (int)w.cols();
  MatD g(std::max(n, m), std::min(n, m));
  for (int r = 0; r < g.rows(); ++r)
    for (int c = 0; c < g.cols(); ++c) g(r, c) = rng.gaussian();
  Eigen::HouseholderQR<MatD> qr(g);
  MatD q = qr.householderQ() * MatD::Identity(g.rows(), g.cols());
  MatD rmat = qr.matrixQR().topRows(g.cols()).template triangularView<Eigen::Upper>();
  for (int c = 0; c < q.cols(); ++c)
    if (rmat(c, c) < 0) q.col(c) = -q.col(c);
  if (n >= m)
    w = q.template cast<T>();
  else
    w = q.transpose().template cast<T>();
}

// ---------------------------------------------------------------------------
// Adam optimizer (state aligned with the store's registration order)
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T>& store, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
       T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& name : store.order()) {
      const Mat<T>& p = store.get(name);
      m_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
      v_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    }
  }

  void step(ParamStore<T>& store, const std::vector<Mat<T>>& grads) {
    ++t_;
    T bc1 = T(1) - std::pow(beta1_, (T)t_);
    T bc2 = T(1) - std::pow(beta2_, (T)t_);
    const auto& names = store.order();
    for (size_t i = 0; i < names.size(); ++i) {
      Mat<T>& p = store.get(names[i]);
      const Mat<T>& g = grads[i];
      m_[i] = beta1_ * m_[i] + (T(1) - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (T(1) - beta2_) * g.cwiseProduct(g);
      Mat<T> mhat = m_[i] / bc1;
      Mat<T> vhat = v_[i] / bc2;
      p.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
  }

  T lr() const { return lr_; }
  void set_lr(T lr) { lr_ = lr; }
  int64_t steps() const { return t_; }
  void set_steps(int64_t t) { t_ = t; }
  std::vector<Mat<T>>& m() { return m_; }
  std::vector<Mat<T>>& v() { return v_; }

 private:
  T lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Mat<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Bound parameters: per-tape leaf vars, created once per forward pass
// ---------------------------------------------------------------------------

template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamStore<T>& store, bool requires_grad = true)
      : store_(&store) {
    const auto& names = store.order();
    for (size_t i = 0; i < names.size(); ++i) {
      vars_.push_back(tape.leaf(&store.get(names[i]), requires_grad));
      index_[names[i]] = i;
    }
  }

  Var<T> operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unbound parameter: " + name);
    return vars_[it->second];
  }

  // Gradients in registration order (zeros for unused parameters).
  std::vector<Mat<T>> grads(Tape<T>& tape) const {
    std::vector<Mat<T>> out;
    out.reserve(vars_.size());
    for (auto v : vars_) out.push_back(tape.grad_of(v));
    return out;
  }

  const std::vector<Var<T>>& vars() const { return vars_; }

 private:
  const ParamStore<T>* store_;
  std::vector<Var<T>> vars_;
  std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Layer helpers (parameters addressed by name prefix)
// ---------------------------------------------------------------------------

template <typename T>
void register_linear(ParamStore<T>& store, const std::string& prefix, int in, int out,
                     DetRng& rng) {
  init_glorot_uniform(store.add(prefix + ".w", in, out), rng);
  store.add(prefix + ".b", 1, out);  // zero bias
}

template <typename T>
Var<T> linear(const BoundParams<T>& p, const std::string& prefix, Var<T> x) {
  return add_rowvec(matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

template <typename T>
void register_layer_norm(ParamStore<T>& store, const std::string& prefix, int dim) {
  store.add(prefix + ".gamma", 1, dim).setOnes();
  store.add(prefix + ".beta", 1, dim);
}

template <typename T>
Var<T> layer_norm(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                  T eps = T(1e-5)) {
  int cols = (int)x.tape->val(x).cols();
  Var<T> mu = row_mean(x);
  Var<T> xc = sub(x, broadcast_col(mu, cols));
  Var<T> var = row_mean(elem_mul(xc, xc));
  Var<T> inv = rsqrt_shift(var, eps);
  Var<T> normed = elem_mul(xc, broadcast_col(inv, cols));
  return add_rowvec(mul_rowvec(normed, p[prefix + ".gamma"]), p[prefix + ".beta"]);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention (one layer, residual + layer norm)
// ---------------------------------------------------------------------------

template <typename T>
void register_self_attention(ParamStore<T>& store, const std::string& prefix, int dim,
                             int heads, DetRng& rng) {
  if (dim % heads != 0) throw ConfigError("attention dim must divide heads");
  for (const char* nm : {".wq", ".wk", ".wv", ".wo"})
    init_glorot_uniform(store.add(prefix + nm, dim, dim), rng);
  for (const char* nm : {".bq", ".bk", ".bv", ".bo"}) store.add(prefix + nm, 1, dim);
  register_layer_norm(store, prefix + ".ln", dim);
}

// Raw multi-head attention output (before residual/norm) for one sequence.
// `mask` marks valid key positions; empty means all valid.
template <typename T>
Var<T> multi_head_attention(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                            int heads, const std::vector<uint8_t>& mask) {
  Tape<T>& t = *x.tape;
  int dim = (int)t.val(x).cols();
  int hd = dim / heads;
  Var<T> q = add_rowvec(matmul(x, p[prefix + ".wq"]), p[prefix + ".bq"]);
  Var<T> k = add_rowvec(matmul(x, p[prefix + ".wk"]), p[prefix + ".bk"]);
  Var<T> v = add_rowvec(matmul(x, p[prefix + ".wv"]), p[prefix + ".bv"]);
  std::vector<Var<T>> ctx;
  T inv_sqrt = T(1) / std::sqrt((T)hd);
  for (int h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(q, h * hd, hd);
    Var<T> kh = slice_cols(k, h * hd, hd);
    Var<T> vh = slice_cols(v, h * hd, hd);
    Var<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Var<T> attn = softmax_rows(scores, mask);
    ctx.push_back(matmul(attn, vh));
  }
  return add_rowvec(matmul(concat_cols(ctx), p[prefix + ".wo"]), p[prefix + ".bo"]);
}

// Full block: x + MHA(x), then layer norm.
template <typename T>
Var<T> self_attention_block(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                            int heads, const std::vector<uint8_t>& mask) {
  Var<T> attn = multi_head_attention(p, prefix, x, heads, mask);
  return layer_norm(p, prefix + ".ln", add(x, attn));
}

// ---------------------------------------------------------------------------
// GRU / BiGRU
// ---------------------------------------------------------------------------
//
// Gate layout in the 3h-wide weights: [update z | reset r | candidate n].
//   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
//   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
//   n_t = tanh(x_t Wn + r_t o (h_{t-1} Un) + bn)
//   h_t = n_t + z_t o (h_{t-1} - n_t)
// Padded steps carry h_{t-1} through unchanged.

template <typename T>
void register_gru(ParamStore<T>& store, const std::string& prefix, int in, int hidden,
                  DetRng& rng) {
  init_glorot_uniform(store.add(prefix + ".w", in, 3 * hidden), rng);
  Mat<T>& u = store.add(prefix + ".u", hidden, 3 * hidden);
  for (int g = 0; g < 3; ++g) {
    Mat<T> block(hidden, hidden);
    init_orthogonal(block, rng);
    u.middleCols(g * hidden, hidden) = block;
  }
  store.add(prefix + ".b", 1, 3 * hidden);
}

template <typename T>
void register_bigru(ParamStore<T>& store, const std::string& prefix, int in, int hidden,
                    DetRng& rng) {
  register_gru(store, prefix + ".fwd", in, hidden, rng);
  register_gru(store, prefix + ".bwd", in, hidden, rng);
}

// One GRU direction over a time-major input transform.
//   xw_tm: [steps*batch x 3h], already x W + b, time-major.
//   step_mask[t*batch + b]: 1 if (t, b) is a valid step.
// Returns time-major hidden states [steps*batch x h].
template <typename T>
Var<T> gru_direction(const BoundParams<T>& p, const std::string& prefix, Var<T> xw_tm,
                     int steps, int batch, int hidden,
                     const std::vector<uint8_t>& step_mask, bool reverse_time) {
  Tape<T>& t = *xw_tm.tape;
  Var<T> u = p[prefix + ".u"];
  Var<T> h = t.constant(Mat<T>::Zero(batch, hidden));
  std::vector<Var<T>> outs(steps);
  for (int s = 0; s < steps; ++s) {
    int step = reverse_time ? steps - 1 - s : s;
    Var<T> xw = slice_rows(xw_tm, step * batch, batch);
    Var<T> hu = matmul(h, u);
    Var<T> z = sigmoid(add(slice_cols(xw, 0, hidden), slice_cols(hu, 0, hidden)));
    Var<T> r = sigmoid(add(slice_cols(xw, hidden, hidden), slice_cols(hu, hidden, hidden)));
    Var<T> n = tanh_op(add(slice_cols(xw, 2 * hidden, hidden),
                           elem_mul(r, slice_cols(hu, 2 * hidden, hidden))));
    // h_new = n + z o (h - n)
    Var<T> h_new = add(n, elem_mul(z, sub(h, n)));
    bool all_valid = true;
    std::vector<uint8_t> take(batch);
    for (int b = 0; b < batch; ++b) {
      take[b] = step_mask[step * batch + b];
      all_valid = all_valid && take[b];
    }
    h = all_valid ? h_new : row_select_const(h_new, h, take);
    outs[step] = h;
  }
  return concat_rows(outs);
}

// Bidirectional GRU over a batch of padded sequences stored batch-major
// ([b*steps + t] row order). Output is batch-major [batch*steps x 2h].
template <typename T>
Var<T> bigru(const BoundParams<T>& p, const std::string& prefix, Var<T> x_bm, int steps,
             int batch, int hidden, const std::vector<uint8_t>& mask_bm) {
  Tape<T>& t = *x_bm.tape;
  // batch-major -> time-major permutation
  std::vector<int> to_tm(steps * batch), to_bm(steps * batch);
  std::vector<uint8_t> mask_tm(steps * batch);
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < steps; ++s) {
      to_tm[s * batch + b] = b * steps + s;
      to_bm[b * steps + s] = s * batch + b;
      mask_tm[s * batch + b] = mask_bm[b * steps + s];
    }
  (void)t;
  Var<T> fwd_in = add_rowvec(matmul(x_bm, p[prefix + ".fwd.w"]), p[prefix + ".fwd.b"]);
  Var<T> bwd_in = add_rowvec(matmul(x_bm, p[prefix + ".bwd.w"]), p[prefix + ".bwd.b"]);
  Var<T> fwd_tm = gru_direction(p, prefix + ".fwd", row_gather(fwd_in, to_tm), steps,
                                batch, hidden, mask_tm, false);
  Var<T> bwd_tm = gru_direction(p, prefix + ".bwd", row_gather(bwd_in, to_tm), steps,
                                batch, hidden, mask_tm, true);
  Var<T> out_tm = concat_cols<T>({fwd_tm, bwd_tm});
  return row_gather(out_tm, to_bm);
}

}  // namespace apgn
