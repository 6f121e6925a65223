#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen
// matrices. A Tape records every operation of one forward pass; calling
// backward() on a scalar result walks the tape in reverse and accumulates
// gradients into the Param objects that were bound as leaves.
//
// Everything is templated on the scalar type so the same model code runs in
// float for training and in double for finite-difference gradient checks.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "vfx/core/error.hpp"

namespace vfx::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool frozen = false;

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <class T>
class Tape {
 public:
  // A tape that does not record skips every backward closure; use it for
  // sampling and evaluation.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

  Var<T> param(Param<T>& p) {
    const bool needs = record_ && !p.frozen;
    Var<T> out = push(p.value, needs, nullptr);
    nodes_[out.id].param = needs ? &p : nullptr;
    return out;
  }

  // Registers an op result. `backward` reads the output gradient via grad(id)
  // and accumulates into its inputs.
  Var<T> push(Mat<T> v, bool needs, std::function<void()> backward) {
    Node n;
    n.value = std::move(v);
    n.needs = needs && record_;
    if (n.needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& value(int id) const { return nodes_[id].value; }
  bool needs(int id) const { return nodes_[id].needs; }

  Mat<T>& grad(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var<T> root) {
    if (!record_) throw RuntimeFailure("backward() on a non-recording tape");
    if (root.rows() != 1 || root.cols() != 1) throw RuntimeFailure("backward() needs a scalar root");
    if (!needs(root.id)) return;
    grad(root.id)(0, 0) = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs || !n.has_grad) continue;
      if (n.backward) n.backward();
      if (n.param) {
        if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols())
          n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs = false;
    bool has_grad = false;
    std::function<void()> backward;
    Param<T>* param = nullptr;
  };

  bool record_;
  std::deque<Node> nodes_;
};

namespace detail {
template <class T>
inline void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
}
}  // namespace detail

// Id the next pushed node will receive; op closures capture it before the
// push so they can address their own output gradient.
template <class T>
inline int next_id(const Tape<T>* tp) {
  return static_cast<int>(tp->size());
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimension mismatch");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ib = b.id, io = next_id(tp);
  return tp->push(a.value() * b.value(), tp->needs(ia) || tp->needs(ib), [tp, ia, ib, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia).noalias() += g * tp->value(ib).transpose();
    if (tp->needs(ib)) tp->grad(ib).noalias() += tp->value(ia).transpose() * g;
  });
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimension mismatch");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ib = b.id, io = next_id(tp);
  return tp->push(a.value() * b.value().transpose(), tp->needs(ia) || tp->needs(ib), [tp, ia, ib, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia).noalias() += g * tp->value(ib);
    if (tp->needs(ib)) tp->grad(ib).noalias() += g.transpose() * tp->value(ia);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "add");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ib = b.id, io = next_id(tp);
  return tp->push(a.value() + b.value(), tp->needs(ia) || tp->needs(ib), [tp, ia, ib, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia) += g;
    if (tp->needs(ib)) tp->grad(ib) += g;
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "sub");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ib = b.id, io = next_id(tp);
  return tp->push(a.value() - b.value(), tp->needs(ia) || tp->needs(ib), [tp, ia, ib, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia) += g;
    if (tp->needs(ib)) tp->grad(ib) -= g;
  });
}

// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same(a, b, "mul");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ib = b.id, io = next_id(tp);
  return tp->push(a.value().cwiseProduct(b.value()), tp->needs(ia) || tp->needs(ib), [tp, ia, ib, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia) += g.cwiseProduct(tp->value(ib));
    if (tp->needs(ib)) tp->grad(ib) += g.cwiseProduct(tp->value(ia));
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  return tp->push(a.value() * s, tp->needs(ia), [tp, ia, io, s] { tp->grad(ia) += tp->grad(io) * s; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  Mat<T> v = a.value().array() + s;
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io] { tp->grad(ia) += tp->grad(io); });
}

// a + broadcast of the 1 x cols row vector r over every row.
template <class T>
Var<T> add_row(Var<T> a, Var<T> r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ValidationError("add_row: bias shape mismatch");
  Tape<T>* tp = a.tape;
  const int ia = a.id, ir = r.id, io = next_id(tp);
  Mat<T> v = a.value().rowwise() + r.value().row(0);
  return tp->push(std::move(v), tp->needs(ia) || tp->needs(ir), [tp, ia, ir, io] {
    const Mat<T>& g = tp->grad(io);
    if (tp->needs(ia)) tp->grad(ia) += g;
    if (tp->needs(ir)) tp->grad(ir) += g.colwise().sum();
  });
}

// out.row(i) = a.row(index[i]); the backward pass scatter-adds.
template <class T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
  Tape<T>* tp = a.tape;
  Mat<T> v(static_cast<Index>(index.size()), a.cols());
  const Mat<T>& av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.rows()) throw ValidationError("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = av.row(index[i]);
  }
  const int ia = a.id, io = next_id(tp);
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io, index = std::move(index)] {
    const Mat<T>& g = tp->grad(io);
    Mat<T>& ga = tp->grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Index>(i));
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: empty input");
  Tape<T>* tp = parts.front().tape;
  Index rows = 0;
  const Index cols = parts.front().cols();
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || tp->needs(p.id);
  }
  Mat<T> v(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, r);
    r += p.rows();
  }
  const int io = next_id(tp);
  return tp->push(std::move(v), needs, [tp, io, spans = std::move(spans)] {
    const Mat<T>& g = tp->grad(io);
    for (const auto& [id, r0] : spans)
      if (tp->needs(id)) tp->grad(id) += g.middleRows(r0, tp->value(id).rows());
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: empty input");
  Tape<T>* tp = parts.front().tape;
  Index cols = 0;
  const Index rows = parts.front().rows();
  bool needs = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || tp->needs(p.id);
  }
  Mat<T> v(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id, c);
    c += p.cols();
  }
  const int io = next_id(tp);
  return tp->push(std::move(v), needs, [tp, io, spans = std::move(spans)] {
    const Mat<T>& g = tp->grad(io);
    for (const auto& [id, c0] : spans)
      if (tp->needs(id)) tp->grad(id) += g.middleCols(c0, tp->value(id).cols());
  });
}

template <class T>
Var<T> slice_rows(Var<T> a, Index r0, Index n) {
  if (r0 < 0 || n < 0 || r0 + n > a.rows()) throw ValidationError("slice_rows: out of range");
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  return tp->push(a.value().middleRows(r0, n), tp->needs(ia),
                  [tp, ia, io, r0, n] { tp->grad(ia).middleRows(r0, n) += tp->grad(io); });
}

template <class T>
Var<T> slice_cols(Var<T> a, Index c0, Index n) {
  if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw ValidationError("slice_cols: out of range");
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  return tp->push(a.value().middleCols(c0, n), tp->needs(ia),
                  [tp, ia, io, c0, n] { tp->grad(ia).middleCols(c0, n) += tp->grad(io); });
}

// Row-major reinterpretation; element order is unchanged.
template <class T>
Var<T> reshape(Var<T> a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ValidationError("reshape: size mismatch");
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  Mat<T> v = Eigen::Map<const Mat<T>>(a.value().data(), rows, cols);
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io] {
    const Mat<T>& g = tp->grad(io);
    Mat<T>& ga = tp->grad(ia);
    Eigen::Map<Mat<T>>(ga.data(), g.rows(), g.cols()) += g;
  });
}

template <class T>
Var<T> silu(Var<T> a) {
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  Mat<T> v = a.value().unaryExpr([](T x) { return x / (T(1) + std::exp(-x)); });
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io] {
    const Mat<T> d = tp->value(ia).unaryExpr([](T x) {
      const T s = T(1) / (T(1) + std::exp(-x));
      return s * (T(1) + x * (T(1) - s));
    });
    tp->grad(ia) += tp->grad(io).cwiseProduct(d);
  });
}

// tanh approximation of GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  Mat<T> v = a.value().unaryExpr([](T x) {
    const T u = T(kC) * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
  });
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io] {
    const Mat<T> d = tp->value(ia).unaryExpr([](T x) {
      const T u = T(kC) * (x + T(0.044715) * x * x * x);
      const T th = std::tanh(u);
      const T du = T(kC) * (T(1) + T(3 * 0.044715) * x * x);
      return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
    });
    tp->grad(ia) += tp->grad(io).cwiseProduct(d);
  });
}

// Per-row normalization to zero mean and unit variance, no affine terms.
template <class T>
Var<T> layer_norm(Var<T> a, T eps = T(1e-6)) {
  Tape<T>* tp = a.tape;
  const Mat<T>& x = a.value();
  const Index n = x.cols();
  Mat<T> y(x.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  const int ia = a.id, io = next_id(tp);
  return tp->push(std::move(y), tp->needs(ia), [tp, ia, io, inv_std, n] {
    const Mat<T>& g = tp->grad(io);
    const Mat<T>& yv = tp->value(io);
    Mat<T>& ga = tp->grad(ia);
    for (Index r = 0; r < g.rows(); ++r) {
      const T gm = g.row(r).mean();
      const T gy = g.row(r).dot(yv.row(r)) / T(n);
      ga.row(r).array() += inv_std(r) * (g.row(r).array() - gm - yv.row(r).array() * gy);
    }
  });
}

// Rotary phases applied head by head. `cos`/`sin` have one row per input row
// and head_dim/2 columns; pair j of every head rotates by angle column j.
template <class T>
Var<T> rope(Var<T> a, const Mat<T>& cos, const Mat<T>& sin, int n_heads) {
  const Index d = a.cols();
  const Index dh = d / n_heads;
  const Index pairs = dh / 2;
  if (d % n_heads != 0 || dh % 2 != 0) throw ValidationError("rope: head dim must be even");
  if (cos.rows() != a.rows() || cos.cols() != pairs || sin.rows() != a.rows() || sin.cols() != pairs)
    throw ValidationError("rope: angle table shape mismatch");
  auto rotate = [=](const Mat<T>& x, const Mat<T>& c, const Mat<T>& s, T sign) {
    Mat<T> y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r)
      for (int h = 0; h < n_heads; ++h)
        for (Index j = 0; j < pairs; ++j) {
          const Index k = h * dh + 2 * j;
          const T x1 = x(r, k), x2 = x(r, k + 1);
          const T cc = c(r, j), ss = sign * s(r, j);
          y(r, k) = x1 * cc - x2 * ss;
          y(r, k + 1) = x1 * ss + x2 * cc;
        }
    return y;
  };
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  return tp->push(rotate(a.value(), cos, sin, T(1)), tp->needs(ia), [tp, ia, io, cos, sin, rotate] {
    tp->grad(ia) += rotate(tp->grad(io), cos, sin, T(-1));
  });
}

// Multi-head scaled dot-product attention for a batch of independent
// sequences stacked along rows: q has batch*nq rows, k and v batch*nk rows.
// When `probs` is given it receives the softmax weights, one nq x nk matrix
// per (batch, head) in batch-major order.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int n_heads, Index batch, std::vector<Mat<T>>* probs = nullptr) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw ValidationError("attention: width mismatch");
  if (d % n_heads != 0) throw ValidationError("attention: width not divisible by heads");
  if (batch <= 0 || q.rows() % batch != 0 || k.rows() % batch != 0 || v.rows() != k.rows())
    throw ValidationError("attention: batch layout mismatch");
  const Index nq = q.rows() / batch, nk = k.rows() / batch, dh = d / n_heads;
  const T inv = T(1) / std::sqrt(T(dh));
  const Mat<T>& Q = q.value();
  const Mat<T>& K = k.value();
  const Mat<T>& V = v.value();
  std::vector<Mat<T>> P(static_cast<std::size_t>(batch * n_heads));
  Mat<T> out(q.rows(), d);
  for (Index b = 0; b < batch; ++b)
    for (int h = 0; h < n_heads; ++h) {
      Mat<T>& p = P[static_cast<std::size_t>(b * n_heads + h)];
      p.noalias() = Q.block(b * nq, h * dh, nq, dh) * K.block(b * nk, h * dh, nk, dh).transpose();
      p *= inv;
      for (Index r = 0; r < nq; ++r) {
        const T m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
      }
      out.block(b * nq, h * dh, nq, dh).noalias() = p * V.block(b * nk, h * dh, nk, dh);
    }
  if (probs) *probs = P;
  Tape<T>* tp = q.tape;
  const int iq = q.id, ik = k.id, iv = v.id, io = next_id(tp);
  const bool needs = tp->needs(iq) || tp->needs(ik) || tp->needs(iv);
  if (!needs || !tp->recording()) return tp->push(std::move(out), false, nullptr);
  return tp->push(std::move(out), true, [tp, iq, ik, iv, io, P = std::move(P), batch, n_heads, nq, nk, dh, inv] {
    const Mat<T>& g = tp->grad(io);
    const Mat<T>& Qv = tp->value(iq);
    const Mat<T>& Kv = tp->value(ik);
    const Mat<T>& Vv = tp->value(iv);
    const bool gq = tp->needs(iq), gk = tp->needs(ik), gv = tp->needs(iv);
    Mat<T> dp, ds;
    for (Index b = 0; b < batch; ++b)
      for (int h = 0; h < n_heads; ++h) {
        const Mat<T>& p = P[static_cast<std::size_t>(b * n_heads + h)];
        const auto go = g.block(b * nq, h * dh, nq, dh);
        if (gv) tp->grad(iv).block(b * nk, h * dh, nk, dh).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        dp.noalias() = go * Vv.block(b * nk, h * dh, nk, dh).transpose();
        ds = p.cwiseProduct(dp);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
        ds -= p.cwiseProduct(rs.replicate(1, nk));
        ds *= inv;
        if (gq) tp->grad(iq).block(b * nq, h * dh, nq, dh).noalias() += ds * Kv.block(b * nk, h * dh, nk, dh);
        if (gk) tp->grad(ik).block(b * nk, h * dh, nk, dh).noalias() += ds.transpose() * Qv.block(b * nq, h * dh, nq, dh);
      }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  Mat<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io] { tp->grad(ia).array() += tp->grad(io)(0, 0); });
}

// Mean squared error against a constant target.
template <class T>
Var<T> mse(Var<T> a, const Mat<T>& target) {
  if (a.rows() != target.rows() || a.cols() != target.cols()) throw ValidationError("mse: shape mismatch");
  Tape<T>* tp = a.tape;
  const int ia = a.id, io = next_id(tp);
  const T n = T(target.size());
  Mat<T> v(1, 1);
  v(0, 0) = (a.value() - target).squaredNorm() / n;
  return tp->push(std::move(v), tp->needs(ia), [tp, ia, io, target, n] {
    tp->grad(ia) += (tp->value(ia) - target) * (T(2) * tp->grad(io)(0, 0) / n);
  });
}

}  // namespace vfx::ad
