#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/error.hpp"
#include "unlearn/tensor.hpp"

// Tape-based reverse-mode differentiation over BasicTensor.
//
// Nodes are appended in evaluation order, so creation order is a
// topological order of the graph and backward() simply walks the tape from
// the loss down to index 0. A tape belongs to one thread for its lifetime.

namespace unlearn::ad {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = true) {
    require_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

  // Appends the result of an op. The node requires a gradient iff any
  // parent does; otherwise parents and the backward rule are dropped.
  Var<T> record(BasicTensor<T> value, std::vector<std::size_t> parents, BackwardFn backward,
                const char* op) {
    require_finite(value, op);
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).requires_grad;
    if (!needs) {
      parents.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(backward), needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  const BasicTensor<T>& value(const Var<T>& v) const { return node(v).value; }
  const BasicTensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var<T>& v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() loss w.r.t. `v`; zeros if `v` was not
  // reached.
  const BasicTensor<T>& grad(const Var<T>& v) { return grad_buffer(v.id()); }

  void backward(const Var<T>& loss) {
    const Node& l = node(loss);
    if (backward_done_) {
      throw StateError("backward: tape already differentiated; call zero_grad() first");
    }
    if (!l.value.is_scalar()) {
      throw DimensionError("backward: loss must be scalar, got " + shape_str(l.value.shape()));
    }
    backward_done_ = true;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  // Clears every gradient so backward() may run again.
  void zero_grad() {
    for (auto& n : nodes_) n.grad = BasicTensor<T>();
    backward_done_ = false;
  }

  // --- used by op backward rules ---

  BasicTensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

  bool parent_needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // grad[id] += delta
  void accumulate(std::size_t id, const BasicTensor<T>& delta) {
    if (!nodes_[id].requires_grad) return;
    auto& g = grad_buffer(id);
    unlearn::detail::require_same_shape(g, delta, "accumulate");
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
  }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  const Node& node(const Var<T>& v) const {
    if (v.tape_ != this) throw StateError("variable belongs to a different tape");
    return nodes_.at(v.id_);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <typename T>
Tape<T>& common_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw StateError("operands live on different tapes");
  return a.tape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable primitives.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(unlearn::matmul(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.parent_needs_grad(ia)) t.accumulate(ia, unlearn::matmul_nt(g, t.value(ib)));
                       if (t.parent_needs_grad(ib)) t.accumulate(ib, unlearn::matmul_tn(t.value(ia), g));
                     },
                     "matmul");
}

// a · bᵀ
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(unlearn::matmul_nt(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.parent_needs_grad(ia)) t.accumulate(ia, unlearn::matmul(g, t.value(ib)));
                       if (t.parent_needs_grad(ib)) t.accumulate(ib, unlearn::matmul_tn(g, t.value(ia)));
                     },
                     "matmul_nt");
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t ia = a.id();
  return a.tape().record(unlearn::transpose(a.value()), {ia},
                         [ia](Tape<T>& t, std::size_t self) {
                           t.accumulate(ia, unlearn::transpose(t.grad_buffer(self)));
                         },
                         "transpose");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(unlearn::add(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       t.accumulate(ia, g);
                       t.accumulate(ib, g);
                     },
                     "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(unlearn::sub(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       t.accumulate(ia, g);
                       t.accumulate(ib, unlearn::scale(g, T(-1)));
                     },
                     "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::common_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(unlearn::mul(a.value(), b.value()), {ia, ib},
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.parent_needs_grad(ia)) t.accumulate(ia, unlearn::mul(g, t.value(ib)));
                       if (t.parent_needs_grad(ib)) t.accumulate(ib, unlearn::mul(g, t.value(ia)));
                     },
                     "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  const std::size_t ia = a.id();
  return a.tape().record(unlearn::scale(a.value(), s), {ia},
                         [ia, s](Tape<T>& t, std::size_t self) {
                           t.accumulate(ia, unlearn::scale(t.grad_buffer(self), s));
                         },
                         "scale");
}

// x[m×n] + row[n] broadcast over rows.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row) {
  auto& tape = detail::common_tape(x, row);
  const std::size_t ix = x.id(), ir = row.id();
  return tape.record(unlearn::add_row(x.value(), row.value()), {ix, ir},
                     [ix, ir](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       t.accumulate(ix, g);
                       if (t.parent_needs_grad(ir)) {
                         t.accumulate(ir, unlearn::sum_rows(g).reshaped(t.value(ir).shape()));
                       }
                     },
                     "add_row");
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::gelu(x.value()), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad_buffer(self);
                           const auto& xv = t.value(ix);
                           BasicTensor<T> dx(xv.shape());
                           for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = g[i] * unlearn::gelu_derivative(xv[i]);
                           t.accumulate(ix, dx);
                         },
                         "gelu");
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  auto& tape = detail::common_tape(x, gain);
  detail::common_tape(x, bias);
  auto res = layer_norm_forward(x.value(), gain.value(), bias.value(), eps);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return tape.record(
      std::move(res.out), {ix, ig, ib},
      [ix, ig, ib, xn = std::move(res.normalized), rstd = std::move(res.rstd)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_buffer(self);
        const auto& gv = t.value(ig);
        const std::size_t m = g.rows(), n = g.cols();
        if (t.parent_needs_grad(ig) || t.parent_needs_grad(ib)) {
          BasicTensor<T> dg(gv.shape()), db(gv.shape());
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) {
              dg[c] += g.at(r, c) * xn.at(r, c);
              db[c] += g.at(r, c);
            }
          t.accumulate(ig, dg);
          t.accumulate(ib, db);
        }
        if (t.parent_needs_grad(ix)) {
          BasicTensor<T> dx(g.shape());
          std::vector<T> dxn(n);
          for (std::size_t r = 0; r < m; ++r) {
            T sum_d = 0, sum_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              dxn[c] = g.at(r, c) * gv[c];
              sum_d += dxn[c];
              sum_dx += dxn[c] * xn.at(r, c);
            }
            const T k = rstd[r] / static_cast<T>(n);
            for (std::size_t c = 0; c < n; ++c) {
              dx.at(r, c) = k * (static_cast<T>(n) * dxn[c] - sum_d - xn.at(r, c) * sum_dx);
            }
          }
          t.accumulate(ix, dx);
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
  const std::size_t it = table.id();
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.tape().record(unlearn::embedding(table.value(), ids), {it},
                             [it, idv = std::move(idv)](Tape<T>& t, std::size_t self) {
                               const auto& g = t.grad_buffer(self);
                               auto& gt = t.grad_buffer(it);
                               for (std::size_t r = 0; r < idv.size(); ++r) {
                                 auto dst = gt.row(static_cast<std::size_t>(idv[r]));
                                 auto src = g.row(r);
                                 for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                               }
                             },
                             "embedding");
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::slice_cols(x.value(), begin, end), {ix},
                         [ix, begin](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad_buffer(self);
                           auto& gx = t.grad_buffer(ix);
                           for (std::size_t r = 0; r < g.rows(); ++r) {
                             auto src = g.row(r);
                             auto dst = gx.row(r).subspan(begin, src.size());
                             for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                           }
                         },
                         "slice_cols");
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::slice_rows(x.value(), begin, end), {ix},
                         [ix, begin](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad_buffer(self);
                           auto& gx = t.grad_buffer(ix);
                           const std::size_t off = begin * gx.cols();
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[off + i] += g[i];
                         },
                         "slice_rows");
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  auto& tape = parts[0].tape();
  std::vector<BasicTensor<T>> values;
  std::vector<std::size_t> ids;
  values.reserve(parts.size());
  for (const auto& p : parts) {
    detail::common_tape(parts[0], p);
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  auto out = unlearn::concat_cols<T>(values);
  return tape.record(std::move(out), ids,
                     [ids](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       std::size_t off = 0;
                       for (auto id : ids) {
                         const std::size_t w = t.value(id).cols();
                         if (t.parent_needs_grad(id)) t.accumulate(id, unlearn::slice_cols(g, off, off + w));
                         off += w;
                       }
                     },
                     "concat_cols");
}

namespace detail {

// dx = y ⊙ (g − rowsum(g ⊙ y)), valid for plain and causal softmax since
// masked entries of y are zero.
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& g) {
  BasicTensor<T> dx(y.shape());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = g.row(r);
    T dot = 0;
    for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
    auto o = dx.row(r);
    for (std::size_t c = 0; c < yr.size(); ++c) o[c] = yr[c] * (gr[c] - dot);
  }
  return dx;
}

}  // namespace detail

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::softmax_rows(x.value()), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           t.accumulate(ix, detail::softmax_backward(t.value(self), t.grad_buffer(self)));
                         },
                         "softmax_rows");
}

// Row i is normalized over columns 0..i only; later columns are exactly 0.
template <typename T>
Var<T> causal_softmax_rows(const Var<T>& x) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::causal_softmax_rows(x.value()), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           t.accumulate(ix, detail::softmax_backward(t.value(self), t.grad_buffer(self)));
                         },
                         "causal_softmax_rows");
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  const std::size_t ix = x.id();
  return x.tape().record(unlearn::log_softmax_rows(x.value()), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           const auto& y = t.value(self);
                           const auto& g = t.grad_buffer(self);
                           BasicTensor<T> dx(y.shape());
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                             auto gr = g.row(r);
                             T total = 0;
                             for (T v : gr) total += v;
                             auto yr = y.row(r);
                             auto o = dx.row(r);
                             for (std::size_t c = 0; c < yr.size(); ++c) o[c] = gr[c] - std::exp(yr[c]) * total;
                           }
                           t.accumulate(ix, dx);
                         },
                         "log_softmax_rows");
}

// Scalar mean over rows of -log softmax(logits)[r, targets[r]].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
  const std::size_t il = logits.id();
  const T loss = unlearn::cross_entropy(logits.value(), targets);
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  return logits.tape().record(
      BasicTensor<T>::scalar(loss), {il},
      [il, tv = std::move(tv)](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        auto dx = unlearn::softmax_rows(t.value(il));
        const T k = g / static_cast<T>(tv.size());
        for (std::size_t r = 0; r < tv.size(); ++r) {
          auto row = dx.row(r);
          row[static_cast<std::size_t>(tv[r])] -= T(1);
          for (auto& v : row) v *= k;
        }
        t.accumulate(il, dx);
      },
      "cross_entropy");
}

// Scalar view of one matrix element.
template <typename T>
Var<T> element(const Var<T>& x, std::size_t r, std::size_t c) {
  const auto& xv = x.value();
  unlearn::detail::require_matrix(xv, "element");
  if (r >= xv.rows() || c >= xv.cols()) {
    throw DimensionError("element: index (" + std::to_string(r) + ", " + std::to_string(c) +
                         ") outside " + shape_str(xv.shape()));
  }
  const std::size_t ix = x.id();
  return x.tape().record(BasicTensor<T>::scalar(xv.at(r, c)), {ix},
                         [ix, r, c](Tape<T>& t, std::size_t self) {
                           t.grad_buffer(ix).at(r, c) += t.grad_buffer(self)[0];
                         },
                         "element");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const std::size_t ix = x.id();
  return x.tape().record(BasicTensor<T>::scalar(unlearn::sum(x.value())), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           const T g = t.grad_buffer(self)[0];
                           auto& gx = t.grad_buffer(ix);
                           for (auto& v : gx.data()) v += g;
                         },
                         "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  const std::size_t ix = x.id();
  return x.tape().record(x.value().reshaped(std::move(shape)), {ix},
                         [ix](Tape<T>& t, std::size_t self) {
                           t.accumulate(ix, t.grad_buffer(self).reshaped(t.value(ix).shape()));
                         },
                         "reshape");
}

}  // namespace unlearn::ad
