#pragma once

// Tape-based reverse-mode differentiation over small dense tensors.
//
// A Tape records every operation applied to Vars created from it. Calling
// backward() on a scalar Var walks the recording in reverse and accumulates
// gradients into every Parameter that entered the tape through param().
// Tapes are single-use and single-threaded; build a fresh one per step.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "npl/errors.hpp"
#include "npl/tensor.hpp"

namespace npl {

/// A named trainable array with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())), trainable(train) {}

  void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value()[0]; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, p.trainable, nullptr);
    if (p.trainable) nodes_[v.id].param = &p;
    return v;
  }

  /// Records a computed value; `backward` receives (tape, own id) and must
  /// push the node's gradient into its inputs via accumulate().
  Var record(Tensor value, bool requires_grad, Backward backward) {
    return push(std::move(value), requires_grad, std::move(backward));
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adds `g` (same shape as the node value) into the node gradient.
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  /// Mutable access for ops that scatter into a gradient element by element.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  void backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: Var belongs to another tape");
    if (nodes_[root.id].value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        Tensor& pg = n.param->grad;
        if (pg.size() != n.grad.size()) pg = Tensor::zeros(n.param->value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(backward), nullptr, requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("autodiff: Vars from different tapes");
  return *a.tape;
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(what) + ": rank-2 tensor required");
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& tp = detail::same_tape(a, b);
  Tensor out = a.value() + b.value();
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(b.id),
                   [a, b](Tape& t, std::size_t self) {
                     t.accumulate(a.id, t.grad(self));
                     t.accumulate(b.id, t.grad(self));
                   });
}

inline Var sub(Var a, Var b) {
  Tape& tp = detail::same_tape(a, b);
  Tensor out = a.value() - b.value();
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(b.id),
                   [a, b](Tape& t, std::size_t self) {
                     t.accumulate(a.id, t.grad(self));
                     t.accumulate(b.id, -1.0 * t.grad(self));
                   });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& tp = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(b.id),
                   [a, b](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     if (t.requires_grad(a.id)) {
                       Tensor ga = g;
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= t.value(b.id)[i];
                       t.accumulate(a.id, ga);
                     }
                     if (t.requires_grad(b.id)) {
                       Tensor gb = g;
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= t.value(a.id)[i];
                       t.accumulate(b.id, gb);
                     }
                   });
}

inline Var scale(Var a, double s) {
  Tape& tp = *a.tape;
  return tp.record(s * a.value(), tp.requires_grad(a.id),
                   [a, s](Tape& t, std::size_t self) { t.accumulate(a.id, s * t.grad(self)); });
}

/// Multiplies every element of `a` by the single-element Var `s`.
inline Var scale(Var a, Var s) {
  Tape& tp = detail::same_tape(a, s);
  if (s.value().size() != 1) throw std::invalid_argument("scale: scalar Var required");
  const double sv = s.item();
  return tp.record(sv * a.value(), tp.requires_grad(a.id) || tp.requires_grad(s.id),
                   [a, s](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     t.accumulate(a.id, t.value(s.id)[0] * g);
                     if (t.requires_grad(s.id)) t.accumulate(s.id, Tensor::scalar(dot(g, t.value(a.id))).reshaped(t.value(s.id).shape()));
                   });
}

inline Var matmul(Var a, Var b) {
  Tape& tp = detail::same_tape(a, b);
  Tensor out = npl::matmul(a.value(), b.value());
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(b.id),
                   [a, b](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     if (t.requires_grad(a.id)) t.accumulate(a.id, npl::matmul(g, npl::transpose(t.value(b.id))));
                     if (t.requires_grad(b.id)) t.accumulate(b.id, npl::matmul(npl::transpose(t.value(a.id)), g));
                   });
}

inline Var transpose(Var a) {
  Tape& tp = *a.tape;
  return tp.record(npl::transpose(a.value()), tp.requires_grad(a.id), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, npl::transpose(t.grad(self)));
  });
}

/// a (n x m) plus v (m) added to every row.
inline Var add_rowwise(Var a, Var v) {
  Tape& tp = detail::same_tape(a, v);
  detail::require_matrix(a.value(), "add_rowwise");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (v.value().size() != m) throw std::invalid_argument("add_rowwise: vector length mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += v.value()[j];
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(v.id),
                   [a, v, n, m](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     t.accumulate(a.id, g);
                     if (t.requires_grad(v.id)) {
                       Tensor gv = Tensor::zeros(t.value(v.id).shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) gv[j] += g(i, j);
                       t.accumulate(v.id, gv);
                     }
                   });
}

/// a (n x m) times v (m) elementwise on every row, i.e. a * diag(v).
inline Var mul_rowwise(Var a, Var v) {
  Tape& tp = detail::same_tape(a, v);
  detail::require_matrix(a.value(), "mul_rowwise");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (v.value().size() != m) throw std::invalid_argument("mul_rowwise: vector length mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= v.value()[j];
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(v.id),
                   [a, v, n, m](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& av = t.value(a.id);
                     const Tensor& vv = t.value(v.id);
                     if (t.requires_grad(a.id)) {
                       Tensor ga(av.shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) ga(i, j) = g(i, j) * vv[j];
                       t.accumulate(a.id, ga);
                     }
                     if (t.requires_grad(v.id)) {
                       Tensor gv = Tensor::zeros(vv.shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) gv[j] += g(i, j) * av(i, j);
                       t.accumulate(v.id, gv);
                     }
                   });
}

/// a (n x m) plus v (n): v[i] added to every entry of row i.
inline Var add_colwise(Var a, Var v) {
  Tape& tp = detail::same_tape(a, v);
  detail::require_matrix(a.value(), "add_colwise");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (v.value().size() != n) throw std::invalid_argument("add_colwise: vector length mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += v.value()[i];
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(v.id),
                   [a, v, n, m](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     t.accumulate(a.id, g);
                     if (t.requires_grad(v.id)) {
                       Tensor gv = Tensor::zeros(t.value(v.id).shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) gv[i] += g(i, j);
                       t.accumulate(v.id, gv);
                     }
                   });
}

/// a (n x m) times v (n): row i scaled by v[i], i.e. diag(v) * a.
inline Var mul_colwise(Var a, Var v) {
  Tape& tp = detail::same_tape(a, v);
  detail::require_matrix(a.value(), "mul_colwise");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (v.value().size() != n) throw std::invalid_argument("mul_colwise: vector length mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= v.value()[i];
  return tp.record(std::move(out), tp.requires_grad(a.id) || tp.requires_grad(v.id),
                   [a, v, n, m](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& av = t.value(a.id);
                     const Tensor& vv = t.value(v.id);
                     if (t.requires_grad(a.id)) {
                       Tensor ga(av.shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) ga(i, j) = g(i, j) * vv[i];
                       t.accumulate(a.id, ga);
                     }
                     if (t.requires_grad(v.id)) {
                       Tensor gv = Tensor::zeros(vv.shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j) gv[i] += g(i, j) * av(i, j);
                       t.accumulate(v.id, gv);
                     }
                   });
}

namespace detail {

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tape& tp = *a.tape;
  Tensor out = a.value();
  for (double& x : out.data()) x = f(x);
  return tp.record(std::move(out), tp.requires_grad(a.id), [a, df](Tape& t, std::size_t self) {
    Tensor g = t.grad(self);
    const Tensor& x = t.value(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= df(x[i]);
    t.accumulate(a.id, g);
  });
}

}  // namespace detail

inline Var relu(Var a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Var gelu(Var a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x) {
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) + x * pdf;
      });
}

inline double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var softplus(Var a) { return detail::unary(a, softplus_value, sigmoid_value); }

/// Row-wise softmax of a matrix.
inline Var softmax_rows(Var a) {
  Tape& tp = *a.tape;
  detail::require_matrix(a.value(), "softmax_rows");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = out(i, 0);
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, out(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out(i, j) = std::exp(out(i, j) - mx));
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  return tp.record(std::move(out), tp.requires_grad(a.id), [a, n, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor ga(y.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < m; ++j) ga(i, j) = y(i, j) * (g(i, j) - s);
    }
    t.accumulate(a.id, ga);
  });
}

/// Splits the rows of a matrix into `groups` contiguous blocks and normalises
/// each block to zero mean and unit (biased) variance. groups == rows gives a
/// per-row layer norm.
inline Var group_norm(Var a, std::size_t groups, double eps) {
  Tape& tp = *a.tape;
  detail::require_matrix(a.value(), "group_norm");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (groups == 0 || n % groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(groups) + " groups do not divide " +
                                std::to_string(n) + " rows");
  const std::size_t per = (n / groups) * m;
  Tensor out = a.value();
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double* x = out.data().data() + gi * per;
    double mean = 0.0;
    for (std::size_t k = 0; k < per; ++k) mean += x[k];
    mean /= static_cast<double>(per);
    double var = 0.0;
    for (std::size_t k = 0; k < per; ++k) var += (x[k] - mean) * (x[k] - mean);
    var /= static_cast<double>(per);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < per; ++k) x[k] = (x[k] - mean) * inv_std[gi];
  }
  return tp.record(std::move(out), tp.requires_grad(a.id),
                   [a, groups, per, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.value(self);
                     Tensor ga(y.shape());
                     for (std::size_t gi = 0; gi < groups; ++gi) {
                       const std::size_t off = gi * per;
                       double mg = 0.0, mgy = 0.0;
                       for (std::size_t k = 0; k < per; ++k) {
                         mg += g[off + k];
                         mgy += g[off + k] * y[off + k];
                       }
                       mg /= static_cast<double>(per);
                       mgy /= static_cast<double>(per);
                       for (std::size_t k = 0; k < per; ++k)
                         ga[off + k] = inv_std[gi] * (g[off + k] - mg - y[off + k] * mgy);
                     }
                     t.accumulate(a.id, ga);
                   });
}

/// out[i] = a[index[i]] reshaped to `shape`; covers reshapes, permutations,
/// slices and row lookups. Backward scatter-adds.
inline Var gather(Var a, std::vector<std::size_t> index, Shape shape) {
  Tape& tp = *a.tape;
  if (shape_size(shape) != index.size()) throw std::invalid_argument("gather: index/shape size mismatch");
  Tensor out(std::move(shape));
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.size()) throw std::invalid_argument("gather: index out of range");
    out[i] = av[index[i]];
  }
  return tp.record(std::move(out), tp.requires_grad(a.id), [a, index = std::move(index)](Tape& t, std::size_t self) {
    if (!t.requires_grad(a.id)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
  });
}

inline Var reshape(Var a, Shape shape) {
  std::vector<std::size_t> idx(a.value().size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather(a, std::move(idx), std::move(shape));
}

/// Row `r` of a matrix as a vector.
inline Var row(Var a, std::size_t r) {
  detail::require_matrix(a.value(), "row");
  const std::size_t m = a.value().cols();
  std::vector<std::size_t> idx(m);
  for (std::size_t j = 0; j < m; ++j) idx[j] = r * m + j;
  return gather(a, std::move(idx), {m});
}

/// Columns [start, start + count) of a matrix.
inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
  detail::require_matrix(a.value(), "slice_cols");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  if (start + count > m) throw std::invalid_argument("slice_cols: out of range");
  std::vector<std::size_t> idx;
  idx.reserve(n * count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) idx.push_back(i * m + start + j);
  return gather(a, std::move(idx), {n, count});
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& tp = *parts.front().tape;
  const std::size_t n = parts.front().value().rows();
  std::size_t m = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.tape != &tp) throw std::invalid_argument("autodiff: Vars from different tapes");
    detail::require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
    m += p.value().cols();
    rg = rg || tp.requires_grad(p.id);
  }
  Tensor out({n, m});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  return tp.record(std::move(out), rg, [parts, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t o = 0;
    for (const Var& p : parts) {
      const std::size_t c = t.value(p.id).cols();
      if (t.requires_grad(p.id)) {
        Tensor gp({n, c});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gp(i, j) = g(i, o + j);
        t.accumulate(p.id, gp);
      }
      o += c;
    }
  });
}

inline Var sum(Var a) {
  Tape& tp = *a.tape;
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return tp.record(Tensor::scalar(s), tp.requires_grad(a.id), [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, Tensor(t.value(a.id).shape(), t.grad(self)[0]));
  });
}

/// Mean of squared differences over all elements.
inline Var mse(Var pred, Var target) {
  Tape& tp = detail::same_tape(pred, target);
  require_same_shape(pred.value(), target.value(), "mse");
  const double n = static_cast<double>(pred.value().size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.value().size(); ++i) {
    const double d = pred.value()[i] - target.value()[i];
    s += d * d;
  }
  return tp.record(Tensor::scalar(s / n), tp.requires_grad(pred.id) || tp.requires_grad(target.id),
                   [pred, target, n](Tape& t, std::size_t self) {
                     const double g = t.grad(self)[0];
                     Tensor diff = t.value(pred.id) - t.value(target.id);
                     Tensor gp = (2.0 * g / n) * diff;
                     t.accumulate(pred.id, gp);
                     t.accumulate(target.id, -1.0 * gp);
                   });
}

}  // namespace ad

/// Maximum over all trainable entries of
/// |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<Var(Tape&)>& loss_fn, std::span<Parameter* const> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-3]");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (loss.value().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    const double v = loss_fn(tape).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = eval();
      p->value[i] = orig - eps;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(p->grad[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace npl
