#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <vector>

#include "mulmon/tensor.hpp"

namespace mulmon {

// Reverse-mode autodiff on a linear tape. Node values are owned by the
// tape; backward closures accumulate into per-node gradient buffers.
//
// Two sweep styles:
//   backward(loss)            full sweep for training gradients
//   grads_of(loss, wrt)       partial sweep used mid-forward to obtain the
//                             stop-gradiented auxiliary inputs; buffers are
//                             zeroed afterwards so the main sweep is clean.
//
// Node ids are monotone in creation order and every node's parents have
// smaller ids, so a sweep from loss.id down to min(wrt ids) visits every
// path that can contribute.

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  struct Node {
    Tensor<S> value;
    std::function<void(Tape&, int)> backward;  // may be empty (leaf/const)
    bool needs_grad = false;
  };

  // ---- construction ----

  Var leaf(Tensor<S> value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), {}, needs_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Var constant(Tensor<S> value) { return leaf(std::move(value), false); }
  Var scalar_constant(S x) {
    Tensor<S> t(Shape{1});
    t.v[0] = x;
    return constant(std::move(t));
  }

  const Tensor<S>& val(Var v) const { return nodes_[v.id].value; }
  S scalar(Var v) const { return nodes_[v.id].value.v.at(0); }
  int size() const { return static_cast<int>(nodes_.size()); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  // Value copied out as a gradient-free constant (stop-gradient).
  Var detach(Var v) { return constant(nodes_[v.id].value); }

  void clear() {
    nodes_.clear();
    grads_.clear();
    touched_.clear();
  }

  // ---- gradients ----

  Tensor<S>& grad_buf(int id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor<S>& g = grads_[id];
    if (g.shape != nodes_[id].value.shape) {
      g = Tensor<S>(nodes_[id].value.shape);
      touched_.push_back(id);
    }
    return g;
  }

  bool has_grad(int id) const {
    return id < static_cast<int>(grads_.size()) &&
           grads_[id].shape == nodes_[id].value.shape;
  }

  // Sweep from `loss` (scalar) down to min_id. Leaves gradients in place;
  // call take_grad()/zero_grads() afterwards.
  void backward(Var loss, int min_id = 0) {
    MULMON_CHECK(nodes_[loss.id].value.numel() == 1, "backward needs a scalar loss");
    grad_buf(loss.id).v[0] = S(1);
    for (int id = loss.id; id >= min_id; --id) {
      if (!has_grad(id)) continue;
      if (nodes_[id].backward) nodes_[id].backward(*this, id);
    }
  }

  Tensor<S> take_grad(Var v) {
    MULMON_CHECK(has_grad(v.id), "no gradient accumulated for node ", v.id);
    return grads_[v.id];
  }
  Tensor<S> grad_or_zero(Var v) {
    if (has_grad(v.id)) return grads_[v.id];
    return Tensor<S>(nodes_[v.id].value.shape);
  }

  void zero_grads() {
    for (int id : touched_) grads_[id] = Tensor<S>();
    touched_.clear();
  }

  // Gradients of `loss` w.r.t. `wrt`, computed mid-forward; the tape's
  // gradient state is cleaned up before returning.
  std::vector<Tensor<S>> grads_of(Var loss, const std::vector<Var>& wrt) {
    int min_id = loss.id;
    for (Var v : wrt) min_id = std::min(min_id, v.id);
    backward(loss, min_id);
    std::vector<Tensor<S>> out;
    out.reserve(wrt.size());
    for (Var v : wrt) out.push_back(grad_or_zero(v));
    zero_grads();
    return out;
  }

  // ---- generic op plumbing ----

  Var make(Tensor<S> value, std::vector<Var> parents,
           std::function<void(Tape&, int)> backward) {
    bool ng = false;
    for (Var p : parents) ng = ng || nodes_[p.id].needs_grad;
    nodes_.push_back(Node{std::move(value), ng ? std::move(backward) : nullptr, ng});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const auto& A = val(a);
    const auto& B = val(b);
    MULMON_CHECK(A.shape == B.shape, "add shape mismatch ", A.shape.str(), " vs ",
                 B.shape.str());
    Tensor<S> out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const auto& g = t.grads_[self];
      if (t.needs_grad(a)) {
        auto& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_buf(b.id);
        for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    const auto& A = val(a);
    const auto& B = val(b);
    MULMON_CHECK(A.shape == B.shape, "sub shape mismatch");
    Tensor<S> out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const auto& g = t.grads_[self];
      if (t.needs_grad(a)) {
        auto& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_buf(b.id);
        for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const auto& A = val(a);
    const auto& B = val(b);
    MULMON_CHECK(A.shape == B.shape, "mul shape mismatch");
    Tensor<S> out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& A2 = t.val(a);
      const auto& B2 = t.val(b);
      if (t.needs_grad(a)) {
        auto& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * B2.v[i];
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_buf(b.id);
        for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * A2.v[i];
      }
    });
  }

  Var div(Var a, Var b) {
    const auto& A = val(a);
    const auto& B = val(b);
    MULMON_CHECK(A.shape == B.shape, "div shape mismatch");
    Tensor<S> out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= B.v[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& A2 = t.val(a);
      const auto& B2 = t.val(b);
      if (t.needs_grad(a)) {
        auto& ga = t.grad_buf(a.id);
        for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] / B2.v[i];
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_buf(b.id);
        for (size_t i = 0; i < g.v.size(); ++i)
          gb.v[i] -= g.v[i] * A2.v[i] / (B2.v[i] * B2.v[i]);
      }
    });
  }

  // y = c1 * x + c0
  Var affine(Var x, S c1, S c0) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = c1 * e + c0;
    return make(std::move(out), {x}, [x, c1](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += c1 * g.v[i];
    });
  }
  Var scale(Var x, S c) { return affine(x, c, S(0)); }

  Var relu(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = e > S(0) ? e : S(0);
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i)
        if (y.v[i] > S(0)) gx.v[i] += g.v[i];
    });
  }

  Var sigmoid(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = S(1) / (S(1) + std::exp(-e));
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i)
        gx.v[i] += g.v[i] * y.v[i] * (S(1) - y.v[i]);
    });
  }

  Var tanh_(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = std::tanh(e);
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i)
        gx.v[i] += g.v[i] * (S(1) - y.v[i] * y.v[i]);
    });
  }

  // softplus(x) = log(1 + e^x), computed stably
  Var softplus(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = stable_softplus(e);
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& xin = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i)
        gx.v[i] += g.v[i] / (S(1) + std::exp(-xin.v[i]));
    });
  }

  Var exp_(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = std::exp(e);
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i] * y.v[i];
    });
  }

  Var log_(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = std::log(e);
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& xin = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i] / xin.v[i];
    });
  }

  Var square(Var x) {
    Tensor<S> out = val(x);
    for (auto& e : out.v) e = e * e;
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& xin = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += S(2) * g.v[i] * xin.v[i];
    });
  }

  // ---- reductions / reshapes ----

  Var sum_all(Var x) {
    Tensor<S> out(Shape{1});
    for (S e : val(x).v) out.v[0] += e;
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      S g = t.grads_[self].v[0];
      auto& gx = t.grad_buf(x.id);
      for (auto& e : gx.v) e += g;
    });
  }

  Var mean_all(Var x) { return scale(sum_all(x), S(1) / S(val(x).numel())); }

  Var reshape(Var x, Shape s) {
    MULMON_CHECK(s.numel() == val(x).numel(), "reshape numel mismatch");
    Tensor<S> out = val(x);
    out.shape = s;
    return make(std::move(out), {x}, [x](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
    });
  }

  // Sum out axis 1 of [K, C, H, W] -> [K, H, W]
  Var sum_channels(Var x) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 4, "sum_channels wants 4-D input");
    int64_t K = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
    Tensor<S> out(Shape{K, X.shape[2], X.shape[3]});
    for (int64_t k = 0; k < K; ++k)
      for (int64_t c = 0; c < C; ++c) {
        const S* src = X.data() + (k * C + c) * HW;
        S* dst = out.data() + k * HW;
        for (int64_t p = 0; p < HW; ++p) dst[p] += src[p];
      }
    return make(std::move(out), {x}, [x, K, C, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (int64_t k = 0; k < K; ++k)
        for (int64_t c = 0; c < C; ++c) {
          S* dst = gx.data() + (k * C + c) * HW;
          const S* src = g.data() + k * HW;
          for (int64_t p = 0; p < HW; ++p) dst[p] += src[p];
        }
    });
  }

  // Concatenate along axis 0 (rows of 2-D tensors with equal column count).
  Var concat_rows(const std::vector<Var>& parts) {
    MULMON_CHECK(!parts.empty(), "concat_rows: empty");
    int64_t cols = val(parts[0]).shape[1], rows = 0;
    for (Var p : parts) {
      MULMON_CHECK(val(p).shape.ndim == 2 && val(p).shape[1] == cols,
                   "concat_rows: ragged parts");
      rows += val(p).shape[0];
    }
    Tensor<S> out(Shape{rows, cols});
    int64_t r = 0;
    for (Var p : parts) {
      const auto& P = val(p);
      std::copy(P.v.begin(), P.v.end(), out.v.begin() + r * cols);
      r += P.shape[0];
    }
    std::vector<Var> ps = parts;
    return make(std::move(out), ps, [ps, cols](Tape& t, int self) {
      const auto& g = t.grads_[self];
      int64_t r = 0;
      for (Var p : ps) {
        int64_t n = t.val(p).shape[0] * cols;
        if (t.needs_grad(p)) {
          auto& gp = t.grad_buf(p.id);
          for (int64_t i = 0; i < n; ++i) gp.v[i] += g.v[r + i];
        }
        r += n;
      }
    });
  }

  // Concatenate 2-D tensors along axis 1 (equal row count).
  Var concat_cols(const std::vector<Var>& parts) {
    MULMON_CHECK(!parts.empty(), "concat_cols: empty");
    int64_t rows = val(parts[0]).shape[0], cols = 0;
    for (Var p : parts) {
      MULMON_CHECK(val(p).shape.ndim == 2 && val(p).shape[0] == rows,
                   "concat_cols: ragged parts");
      cols += val(p).shape[1];
    }
    Tensor<S> out(Shape{rows, cols});
    int64_t off = 0;
    for (Var p : parts) {
      const auto& P = val(p);
      int64_t pc = P.shape[1];
      for (int64_t r = 0; r < rows; ++r)
        std::copy(P.v.begin() + r * pc, P.v.begin() + (r + 1) * pc,
                  out.v.begin() + r * cols + off);
      off += pc;
    }
    std::vector<Var> ps = parts;
    return make(std::move(out), ps, [ps, rows, cols](Tape& t, int self) {
      const auto& g = t.grads_[self];
      int64_t off = 0;
      for (Var p : ps) {
        int64_t pc = t.val(p).shape[1];
        if (t.needs_grad(p)) {
          auto& gp = t.grad_buf(p.id);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < pc; ++c)
              gp.v[r * pc + c] += g.v[r * cols + off + c];
        }
        off += pc;
      }
    });
  }

  // Columns [c0, c1) of a 2-D tensor.
  Var slice_cols(Var x, int64_t c0, int64_t c1) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 2 && c0 >= 0 && c1 <= X.shape[1] && c0 < c1,
                 "slice_cols out of range");
    int64_t rows = X.shape[0], cols = X.shape[1], w = c1 - c0;
    Tensor<S> out(Shape{rows, w});
    for (int64_t r = 0; r < rows; ++r)
      std::copy(X.v.begin() + r * cols + c0, X.v.begin() + r * cols + c1,
                out.v.begin() + r * w);
    return make(std::move(out), {x}, [x, c0, w, cols, rows](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < w; ++c)
          gx.v[r * cols + c0 + c] += g.v[r * w + c];
    });
  }

  // Concatenate [K,*,H,W] stacks along the channel axis.
  Var concat_channels(const std::vector<Var>& parts) {
    MULMON_CHECK(!parts.empty(), "concat_channels: empty");
    const auto& first = val(parts[0]);
    MULMON_CHECK(first.shape.ndim == 4, "concat_channels wants 4-D parts");
    int64_t K = first.shape[0], H = first.shape[2], W = first.shape[3], C = 0;
    for (Var p : parts) {
      const auto& P = val(p);
      MULMON_CHECK(P.shape.ndim == 4 && P.shape[0] == K && P.shape[2] == H &&
                       P.shape[3] == W,
                   "concat_channels: inconsistent stacks");
      C += P.shape[1];
    }
    int64_t HW = H * W;
    Tensor<S> out(Shape{K, C, H, W});
    int64_t coff = 0;
    for (Var p : parts) {
      const auto& P = val(p);
      int64_t pc = P.shape[1];
      for (int64_t k = 0; k < K; ++k)
        std::copy(P.v.begin() + k * pc * HW, P.v.begin() + (k + 1) * pc * HW,
                  out.v.begin() + (k * C + coff) * HW);
      coff += pc;
    }
    std::vector<Var> ps = parts;
    return make(std::move(out), ps, [ps, K, C, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      int64_t coff = 0;
      for (Var p : ps) {
        int64_t pc = t.val(p).shape[1];
        if (t.needs_grad(p)) {
          auto& gp = t.grad_buf(p.id);
          for (int64_t k = 0; k < K; ++k) {
            const S* src = g.data() + (k * C + coff) * HW;
            S* dst = gp.data() + k * pc * HW;
            for (int64_t i = 0; i < pc * HW; ++i) dst[i] += src[i];
          }
        }
        coff += pc;
      }
    });
  }

  // Channels [c0, c1) of a [K, C, H, W] stack.
  Var slice_channels(Var x, int64_t c0, int64_t c1) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 4 && c0 >= 0 && c1 <= X.shape[1] && c0 < c1,
                 "slice_channels out of range");
    int64_t K = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
    int64_t w = c1 - c0;
    Tensor<S> out(Shape{K, w, X.shape[2], X.shape[3]});
    for (int64_t k = 0; k < K; ++k)
      std::copy(X.v.begin() + (k * C + c0) * HW, X.v.begin() + (k * C + c1) * HW,
                out.v.begin() + k * w * HW);
    return make(std::move(out), {x}, [x, K, C, HW, c0, w](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (int64_t k = 0; k < K; ++k) {
        const S* src = g.data() + k * w * HW;
        S* dst = gx.data() + (k * C + c0) * HW;
        for (int64_t i = 0; i < w * HW; ++i) dst[i] += src[i];
      }
    });
  }

  // [H, W] -> [K, 1, H, W] (same map repeated per slot)
  Var tile_hw_to_slots(Var x, int64_t K) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 2, "tile_hw_to_slots wants [H,W]");
    int64_t HW = X.numel();
    Tensor<S> out(Shape{K, 1, X.shape[0], X.shape[1]});
    for (int64_t k = 0; k < K; ++k)
      std::copy(X.v.begin(), X.v.end(), out.v.begin() + k * HW);
    return make(std::move(out), {x}, [x, K, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (int64_t k = 0; k < K; ++k)
        for (int64_t p = 0; p < HW; ++p) gx.v[p] += g.v[k * HW + p];
    });
  }

  // Convex-combine slot images: out[c,p] = sum_k m[k,p] * rgb[k,c,p].
  Var mix_slots(Var rgb, Var m) {
    const auto& R = val(rgb);
    const auto& M = val(m);
    MULMON_CHECK(R.shape.ndim == 4 && M.shape.ndim == 3 && R.shape[0] == M.shape[0] &&
                     R.shape[2] == M.shape[1] && R.shape[3] == M.shape[2],
                 "mix_slots shape mismatch");
    int64_t K = R.shape[0], C = R.shape[1], HW = R.shape[2] * R.shape[3];
    Tensor<S> out(Shape{C, R.shape[2], R.shape[3]});
    for (int64_t k = 0; k < K; ++k)
      for (int64_t c = 0; c < C; ++c) {
        const S* rr = R.data() + (k * C + c) * HW;
        const S* mm = M.data() + k * HW;
        S* oo = out.data() + c * HW;
        for (int64_t p = 0; p < HW; ++p) oo[p] += mm[p] * rr[p];
      }
    return make(std::move(out), {rgb, m}, [rgb, m, K, C, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& R2 = t.val(rgb);
      const auto& M2 = t.val(m);
      if (t.needs_grad(rgb)) {
        auto& gr = t.grad_buf(rgb.id);
        for (int64_t k = 0; k < K; ++k)
          for (int64_t c = 0; c < C; ++c) {
            S* dst = gr.data() + (k * C + c) * HW;
            const S* mm = M2.data() + k * HW;
            const S* gg = g.data() + c * HW;
            for (int64_t p = 0; p < HW; ++p) dst[p] += mm[p] * gg[p];
          }
      }
      if (t.needs_grad(m)) {
        auto& gm = t.grad_buf(m.id);
        for (int64_t k = 0; k < K; ++k)
          for (int64_t c = 0; c < C; ++c) {
            S* dst = gm.data() + k * HW;
            const S* rr = R2.data() + (k * C + c) * HW;
            const S* gg = g.data() + c * HW;
            for (int64_t p = 0; p < HW; ++p) dst[p] += rr[p] * gg[p];
          }
      }
    });
  }

  // Per-slot gating: out[k,c,p] = rgb[k,c,p] * gate[k,p].
  Var gate_slots(Var rgb, Var gate) {
    const auto& R = val(rgb);
    const auto& G = val(gate);
    MULMON_CHECK(R.shape.ndim == 4 && G.shape.ndim == 3 && R.shape[0] == G.shape[0] &&
                     R.shape[2] == G.shape[1] && R.shape[3] == G.shape[2],
                 "gate_slots shape mismatch");
    int64_t K = R.shape[0], C = R.shape[1], HW = R.shape[2] * R.shape[3];
    Tensor<S> out = R;
    for (int64_t k = 0; k < K; ++k)
      for (int64_t c = 0; c < C; ++c) {
        S* oo = out.data() + (k * C + c) * HW;
        const S* gg = G.data() + k * HW;
        for (int64_t p = 0; p < HW; ++p) oo[p] *= gg[p];
      }
    return make(std::move(out), {rgb, gate}, [rgb, gate, K, C, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& R2 = t.val(rgb);
      const auto& G2 = t.val(gate);
      if (t.needs_grad(rgb)) {
        auto& gr = t.grad_buf(rgb.id);
        for (int64_t k = 0; k < K; ++k)
          for (int64_t c = 0; c < C; ++c) {
            S* dst = gr.data() + (k * C + c) * HW;
            const S* gg = G2.data() + k * HW;
            const S* gs = g.data() + (k * C + c) * HW;
            for (int64_t p = 0; p < HW; ++p) dst[p] += gs[p] * gg[p];
          }
      }
      if (t.needs_grad(gate)) {
        auto& gg = t.grad_buf(gate.id);
        for (int64_t k = 0; k < K; ++k)
          for (int64_t c = 0; c < C; ++c) {
            S* dst = gg.data() + k * HW;
            const S* rr = R2.data() + (k * C + c) * HW;
            const S* gs = g.data() + (k * C + c) * HW;
            for (int64_t p = 0; p < HW; ++p) dst[p] += gs[p] * rr[p];
          }
      }
    });
  }

  // ---- linear algebra ----

  // X [R, In] x W [Out, In]^T + b [Out] -> [R, Out]; weight shared across rows.
  Var linear(Var x, Var w, Var b) {
    const auto& X = val(x);
    const auto& W = val(w);
    const auto& B = val(b);
    MULMON_CHECK(X.shape.ndim == 2 && W.shape.ndim == 2 &&
                     X.shape[1] == W.shape[1] && B.shape.numel() == W.shape[0],
                 "linear shape mismatch: x", X.shape.str(), " w", W.shape.str());
    int64_t R = X.shape[0], In = X.shape[1], Out = W.shape[0];
    Tensor<S> out(Shape{R, Out});
    CMapM mx(X.data(), R, In), mw(W.data(), Out, In);
    MapM mo(out.data(), R, Out);
    mo.noalias() = mx * mw.transpose();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < Out; ++c) out.v[r * Out + c] += B.v[c];
    return make(std::move(out), {x, w, b}, [x, w, b, R, In, Out](Tape& t, int self) {
      const auto& g = t.grads_[self];
      CMapM mg(g.data(), R, Out);
      if (t.needs_grad(x)) {
        auto& gx = t.grad_buf(x.id);
        CMapM mw(t.val(w).data(), Out, In);
        MapM mgx(gx.data(), R, In);
        mgx.noalias() += mg * mw;
      }
      if (t.needs_grad(w)) {
        auto& gw = t.grad_buf(w.id);
        CMapM mx(t.val(x).data(), R, In);
        MapM mgw(gw.data(), Out, In);
        mgw.noalias() += mg.transpose() * mx;
      }
      if (t.needs_grad(b)) {
        auto& gb = t.grad_buf(b.id);
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < Out; ++c) gb.v[c] += g.v[r * Out + c];
      }
    });
  }

  // 3x3 conv, stride 1, zero padding 1 (shape-preserving), batched over the
  // slot axis: x [K, Cin, H, W], w [Cout, Cin, 3, 3], b [Cout].
  Var conv3x3(Var x, Var w, Var b) {
    const auto& X = val(x);
    const auto& W = val(w);
    MULMON_CHECK(X.shape.ndim == 4 && W.shape.ndim == 4 && W.shape[2] == 3 &&
                     W.shape[3] == 3 && X.shape[1] == W.shape[1],
                 "conv3x3 shape mismatch: x", X.shape.str(), " w", W.shape.str());
    int64_t K = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
    int64_t Cout = W.shape[0], HW = H * Wd, CK = Cin * 9;
    Tensor<S> out(Shape{K, Cout, H, Wd});
    Tensor<S> col(Shape{CK, HW});
    const auto& B = val(b);
    for (int64_t k = 0; k < K; ++k) {
      im2col(X.data() + k * Cin * HW, Cin, H, Wd, col.data());
      CMapM mw(W.data(), Cout, CK), mc(col.data(), CK, HW);
      MapM mo(out.data() + k * Cout * HW, Cout, HW);
      mo.noalias() = mw * mc;
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t p = 0; p < HW; ++p) out.v[(k * Cout + c) * HW + p] += B.v[c];
    }
    return make(std::move(out), {x, w, b},
                [x, w, b, K, Cin, H, Wd, Cout, HW, CK](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& X2 = t.val(x);
      const auto& W2 = t.val(w);
      Tensor<S> col(Shape{CK, HW});
      bool nx = t.needs_grad(x), nw = t.needs_grad(w), nb = t.needs_grad(b);
      for (int64_t k = 0; k < K; ++k) {
        CMapM mg(g.data() + k * Cout * HW, Cout, HW);
        if (nw) {
          im2col(X2.data() + k * Cin * HW, Cin, H, Wd, col.data());
          auto& gw = t.grad_buf(w.id);
          MapM mgw(gw.data(), Cout, CK);
          CMapM mc(col.data(), CK, HW);
          mgw.noalias() += mg * mc.transpose();
        }
        if (nx) {
          // dcol = W^T * dY, then scatter back with col2im
          CMapM mw(W2.data(), Cout, CK);
          MapM mdc(col.data(), CK, HW);
          mdc.noalias() = mw.transpose() * mg;
          auto& gx = t.grad_buf(x.id);
          col2im(col.data(), Cin, H, Wd, gx.data() + k * Cin * HW);
        }
        if (nb) {
          auto& gb = t.grad_buf(b.id);
          for (int64_t c = 0; c < Cout; ++c) {
            S s = 0;
            const S* row = g.data() + (k * Cout + c) * HW;
            for (int64_t p = 0; p < HW; ++p) s += row[p];
            gb.v[c] += s;
          }
        }
      }
    });
  }

  // ---- slot-axis softmax machinery ----
  // Inputs are [K, H, W] scores; the slot axis is axis 0.

  Var log_softmax_slots(Var x) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 3, "log_softmax_slots wants [K,H,W]");
    int64_t K = X.shape[0], HW = X.shape[1] * X.shape[2];
    Tensor<S> out = X;
    for (int64_t p = 0; p < HW; ++p) {
      S mx = -std::numeric_limits<S>::infinity();
      for (int64_t k = 0; k < K; ++k) mx = std::max(mx, X.v[k * HW + p]);
      S sum = 0;
      for (int64_t k = 0; k < K; ++k) sum += std::exp(X.v[k * HW + p] - mx);
      S lse = mx + std::log(sum);
      for (int64_t k = 0; k < K; ++k) out.v[k * HW + p] = X.v[k * HW + p] - lse;
    }
    return make(std::move(out), {x}, [x, K, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      auto& gx = t.grad_buf(x.id);
      for (int64_t p = 0; p < HW; ++p) {
        S gsum = 0;
        for (int64_t k = 0; k < K; ++k) gsum += g.v[k * HW + p];
        for (int64_t k = 0; k < K; ++k)
          gx.v[k * HW + p] += g.v[k * HW + p] - std::exp(y.v[k * HW + p]) * gsum;
      }
    });
  }

  // logsumexp over slots: [K,H,W] -> [H,W]
  Var logsumexp_slots(Var x) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 3, "logsumexp_slots wants [K,H,W]");
    int64_t K = X.shape[0], H = X.shape[1], W = X.shape[2], HW = H * W;
    Tensor<S> out(Shape{H, W});
    for (int64_t p = 0; p < HW; ++p) {
      S mx = -std::numeric_limits<S>::infinity();
      for (int64_t k = 0; k < K; ++k) mx = std::max(mx, X.v[k * HW + p]);
      S sum = 0;
      for (int64_t k = 0; k < K; ++k) sum += std::exp(X.v[k * HW + p] - mx);
      out.v[p] = mx + std::log(sum);
    }
    return make(std::move(out), {x}, [x, K, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      const auto& X2 = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (int64_t p = 0; p < HW; ++p)
        for (int64_t k = 0; k < K; ++k)
          gx.v[k * HW + p] += g.v[p] * std::exp(X2.v[k * HW + p] - y.v[p]);
    });
  }

  // Leave-one-out logsumexp: out[k,p] = logsumexp_{j != k} x[j,p].
  // Defined for K >= 2.
  Var logsumexp_exclude_slots(Var x) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 3 && X.shape[0] >= 2,
                 "logsumexp_exclude_slots wants [K>=2,H,W]");
    int64_t K = X.shape[0], HW = X.shape[1] * X.shape[2];
    Tensor<S> out = X;
    for (int64_t p = 0; p < HW; ++p) {
      for (int64_t k = 0; k < K; ++k) {
        S mx = -std::numeric_limits<S>::infinity();
        for (int64_t j = 0; j < K; ++j)
          if (j != k) mx = std::max(mx, X.v[j * HW + p]);
        S sum = 0;
        for (int64_t j = 0; j < K; ++j)
          if (j != k) sum += std::exp(X.v[j * HW + p] - mx);
        out.v[k * HW + p] = mx + std::log(sum);
      }
    }
    return make(std::move(out), {x}, [x, K, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& y = t.val(Var{self});
      const auto& X2 = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (int64_t p = 0; p < HW; ++p)
        for (int64_t k = 0; k < K; ++k)
          for (int64_t j = 0; j < K; ++j)
            if (j != k)
              gx.v[j * HW + p] +=
                  g.v[k * HW + p] * std::exp(X2.v[j * HW + p] - y.v[k * HW + p]);
    });
  }

  // ---- broadcast ops ----

  // [K, D] -> [K, D, H, W] (each slot vector tiled over the grid)
  Var broadcast_to_grid(Var x, int64_t H, int64_t W) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 2, "broadcast_to_grid wants [K,D]");
    int64_t K = X.shape[0], D = X.shape[1], HW = H * W;
    Tensor<S> out(Shape{K, D, H, W});
    for (int64_t k = 0; k < K; ++k)
      for (int64_t d = 0; d < D; ++d) {
        S v = X.v[k * D + d];
        S* dst = out.data() + (k * D + d) * HW;
        for (int64_t p = 0; p < HW; ++p) dst[p] = v;
      }
    return make(std::move(out), {x}, [x, K, D, HW](Tape& t, int self) {
      const auto& g = t.grads_[self];
      auto& gx = t.grad_buf(x.id);
      for (int64_t k = 0; k < K; ++k)
        for (int64_t d = 0; d < D; ++d) {
          S s = 0;
          const S* src = g.data() + (k * D + d) * HW;
          for (int64_t p = 0; p < HW; ++p) s += src[p];
          gx.v[k * D + d] += s;
        }
    });
  }

  // x [K, C, H, W] minus image [C, H, W] broadcast over slots.
  Var sub_image(Var x, Var img) {
    const auto& X = val(x);
    const auto& I = val(img);
    MULMON_CHECK(X.shape.ndim == 4 && I.shape.ndim == 3 && X.shape[1] == I.shape[0] &&
                     X.shape[2] == I.shape[1] && X.shape[3] == I.shape[2],
                 "sub_image shape mismatch");
    int64_t K = X.shape[0], n = I.numel();
    Tensor<S> out = X;
    for (int64_t k = 0; k < K; ++k)
      for (int64_t i = 0; i < n; ++i) out.v[k * n + i] -= I.v[i];
    return make(std::move(out), {x, img}, [x, img, K, n](Tape& t, int self) {
      const auto& g = t.grads_[self];
      if (t.needs_grad(x)) {
        auto& gx = t.grad_buf(x.id);
        for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
      }
      if (t.needs_grad(img)) {
        auto& gi = t.grad_buf(img.id);
        for (int64_t k = 0; k < K; ++k)
          for (int64_t i = 0; i < n; ++i) gi.v[i] -= g.v[k * n + i];
      }
    });
  }

  // Per-(slot,channel) layer normalization over the trailing spatial axes:
  // y = (x - mean) / sqrt(var + eps), no learned affine.
  Var layer_norm_spatial(Var x, S eps = S(1e-5)) {
    const auto& X = val(x);
    MULMON_CHECK(X.shape.ndim == 4, "layer_norm_spatial wants [K,C,H,W]");
    int64_t KC = X.shape[0] * X.shape[1], HW = X.shape[2] * X.shape[3];
    Tensor<S> out = X;
    for (int64_t g = 0; g < KC; ++g) {
      S* row = out.data() + g * HW;
      S mean = 0;
      for (int64_t p = 0; p < HW; ++p) mean += row[p];
      mean /= S(HW);
      S var = 0;
      for (int64_t p = 0; p < HW; ++p) var += (row[p] - mean) * (row[p] - mean);
      var /= S(HW);
      S inv = S(1) / std::sqrt(var + eps);
      for (int64_t p = 0; p < HW; ++p) row[p] = (row[p] - mean) * inv;
    }
    return make(std::move(out), {x}, [x, KC, HW, eps](Tape& t, int self) {
      const auto& g = t.grads_[self];
      const auto& X2 = t.val(x);
      auto& gx = t.grad_buf(x.id);
      for (int64_t gr = 0; gr < KC; ++gr) {
        const S* xr = X2.data() + gr * HW;
        const S* gr_ = g.data() + gr * HW;
        S* gxr = gx.data() + gr * HW;
        S mean = 0;
        for (int64_t p = 0; p < HW; ++p) mean += xr[p];
        mean /= S(HW);
        S var = 0;
        for (int64_t p = 0; p < HW; ++p) var += (xr[p] - mean) * (xr[p] - mean);
        var /= S(HW);
        S inv = S(1) / std::sqrt(var + eps);
        // dL/dx = inv * (g - mean(g) - xhat * mean(g*xhat))
        S gmean = 0, gxhat = 0;
        for (int64_t p = 0; p < HW; ++p) {
          gmean += gr_[p];
          gxhat += gr_[p] * (xr[p] - mean) * inv;
        }
        gmean /= S(HW);
        gxhat /= S(HW);
        for (int64_t p = 0; p < HW; ++p) {
          S xhat = (xr[p] - mean) * inv;
          gxr[p] += inv * (gr_[p] - gmean - xhat * gxhat);
        }
      }
    });
  }

  // ---- helpers ----

  static S stable_softplus(S x) {
    if (x > S(30)) return x;
    if (x < S(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  static void im2col(const S* x, int64_t C, int64_t H, int64_t W, S* col) {
    // col is [C*9, H*W]; kernel offsets dy,dx in {-1,0,1}
    int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          S* dst = col + ((c * 3 + (dy + 1)) * 3 + (dx + 1)) * HW;
          const S* src = x + c * HW;
          for (int64_t y = 0; y < H; ++y) {
            int64_t sy = y + dy;
            if (sy < 0 || sy >= H) {
              std::fill(dst + y * W, dst + (y + 1) * W, S(0));
              continue;
            }
            for (int64_t xx = 0; xx < W; ++xx) {
              int64_t sx = xx + dx;
              dst[y * W + xx] = (sx < 0 || sx >= W) ? S(0) : src[sy * W + sx];
            }
          }
        }
      }
    }
  }

  static void col2im(const S* col, int64_t C, int64_t H, int64_t W, S* x) {
    // transpose of im2col: accumulate into x
    int64_t HW = H * W;
    for (int64_t c = 0; c < C; ++c) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const S* src = col + ((c * 3 + (dy + 1)) * 3 + (dx + 1)) * HW;
          S* dst = x + c * HW;
          for (int64_t y = 0; y < H; ++y) {
            int64_t sy = y + dy;
            if (sy < 0 || sy >= H) continue;
            for (int64_t xx = 0; xx < W; ++xx) {
              int64_t sx = xx + dx;
              if (sx >= 0 && sx < W) dst[sy * W + sx] += src[y * W + xx];
            }
          }
        }
      }
    }
  }

  std::deque<Node> nodes_;
  std::vector<Tensor<S>> grads_;
  std::vector<int> touched_;
};

}  // namespace mulmon
