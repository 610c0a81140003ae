// Copyright (c) the perco-micro Authors.
// Licensed under the Apache License, Version 2.0.
//
// Minimal define-by-run tensor library with reverse-mode autodiff. A Tensor
// is a shared handle to a node holding contiguous data, an optional gradient
// buffer and a backward closure; ops build the tape, backward() replays it in
// reverse topological order. Real is float for training and double where
// tests need finite-difference tolerances.

#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "pcm/common.hpp"
#include "pcm/rng.hpp"

namespace pcm {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename Real>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // sized lazily
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    }
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), Real(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw DataError("tensor: data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.data()) x = static_cast<Real>(rng.normal());
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }
  std::vector<Real>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  Real item() const {
    if (numel() != 1) throw UsageError("item(): tensor is not scalar");
    return node_->data[0];
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }
  NodePtr node() const { return node_; }

  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  // Reverse-mode sweep from a scalar loss. Intermediate (non-leaf) gradients
  // are reset per call; leaf gradients accumulate until zero_grad().
  void backward() const {
    if (numel() != 1) throw UsageError("backward(): loss must be scalar");
    if (!node_->requires_grad) return;

    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx].get();
        ++idx;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
    // Reset intermediates so replaying the same graph scales leaf grads
    // linearly instead of compounding stale partials.
    for (Node* n : topo) {
      if (n->backprop) n->grad.assign(n->data.size(), Real(0));
      else n->ensure_grad();
    }
    node_->grad.assign(1, Real(1));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

 private:
  NodePtr node_;
};

namespace detail {

template <typename Real>
Tensor<Real> make_op(Shape shape, std::vector<Real> data,
                     std::vector<typename Tensor<Real>::NodePtr> parents,
                     std::function<void(typename Tensor<Real>::Node&)> backprop,
                     const char* what) {
  check_finite(data, what);
  auto n = std::make_shared<typename Tensor<Real>::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  if (grad_mode()) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<Real>(std::move(n));
}

// NumPy-style broadcast of two shapes, right-aligned.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DataError("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Per-dimension element strides of `s` when viewed under broadcast shape
// `out` (0 where the dimension is broadcast).
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t st = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    const size_t j = s.size() - 1 - i;
    const size_t oj = out.size() - 1 - i;
    strides[oj] = (s[j] == 1 && out[oj] != 1) ? 0 : st;
    st *= s[j];
  }
  return strides;
}

// Odometer walk over `out_shape`, invoking fn(out_index, a_offset, b_offset).
template <typename Fn>
void for_each_broadcast(const Shape& out_shape, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, Fn&& fn) {
  const std::int64_t n = shape_numel(out_shape);
  const size_t r = out_shape.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

// Sum `src` (shaped `from`) into `dst` (shaped `to`), reducing broadcast dims.
template <typename Real>
void reduce_to(const std::vector<Real>& src, const Shape& from, std::vector<Real>& dst,
               const Shape& to) {
  const auto st = broadcast_strides(to, from);
  const std::vector<std::int64_t> zero(from.size(), 0);
  for_each_broadcast(from, st, zero, [&](std::int64_t i, std::int64_t oj, std::int64_t) {
    dst[oj] += src[i];
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast binary ops
// ---------------------------------------------------------------------------

template <typename Real, typename FwdFn, typename BckFn>
Tensor<Real> binary_broadcast_op(const Tensor<Real>& a, const Tensor<Real>& b, FwdFn fwd,
                                 BckFn bck, const char* what) {
  using detail::broadcast_shape;
  using detail::broadcast_strides;
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<Real> out(shape_numel(out_shape));
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.size()); ++i)
      out[i] = fwd(pa[i], pb[i]);
  } else {
    detail::for_each_broadcast(out_shape, sa, sb,
                               [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                                 out[i] = fwd(pa[ia], pb[ib]);
                               });
  }
  auto an = a.node();
  auto bn = b.node();
  auto backprop = [an, bn, out_shape, sa, sb, bck](typename Tensor<Real>::Node& n) {
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    detail::for_each_broadcast(
        out_shape, sa, sb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
          const Real g = n.grad[i];
          Real da, db;
          bck(an->data[ia], bn->data[ib], g, da, db);
          if (need_a) an->grad[ia] += da;
          if (need_b) bn->grad[ib] += db;
        });
  };
  return detail::make_op<Real>(out_shape, std::move(out), {an, bn}, std::move(backprop), what);
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary_broadcast_op<Real>(
      a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = g;
      },
      "add");
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary_broadcast_op<Real>(
      a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g, Real& da, Real& db) {
        da = g;
        db = -g;
      },
      "sub");
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return binary_broadcast_op<Real>(
      a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g, Real& da, Real& db) {
        da = g * y;
        db = g * x;
      },
      "mul");
}

template <typename Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <typename Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <typename Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.data());
  for (auto& x : out) x *= c;
  auto an = a.node();
  auto backprop = [an, c](typename Tensor<Real>::Node& n) {
    an->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
  };
  return detail::make_op<Real>(a.shape(), std::move(out), {an}, std::move(backprop), "scale");
}

template <typename Real>
Tensor<Real> broadcast_to(const Tensor<Real>& a, const Shape& target) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), target);
  if (out_shape != target)
    throw DataError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " +
                    shape_str(target));
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const std::vector<std::int64_t> zero(out_shape.size(), 0);
  std::vector<Real> out(shape_numel(out_shape));
  const Real* pa = a.data().data();
  detail::for_each_broadcast(out_shape, sa, zero,
                             [&](std::int64_t i, std::int64_t ia, std::int64_t) {
                               out[i] = pa[ia];
                             });
  auto an = a.node();
  Shape from = a.shape();
  auto backprop = [an, out_shape](typename Tensor<Real>::Node& n) {
    an->ensure_grad();
    detail::reduce_to(n.grad, out_shape, an->grad, an->shape);
  };
  return detail::make_op<Real>(out_shape, std::move(out), {an}, std::move(backprop),
                               "broadcast_to");
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape target) {
  if (shape_numel(target) != a.numel())
    throw DataError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                    shape_str(target));
  std::vector<Real> out(a.data());
  auto an = a.node();
  auto backprop = [an](typename Tensor<Real>::Node& n) {
    an->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
  };
  return detail::make_op<Real>(std::move(target), std::move(out), {an}, std::move(backprop),
                               "reshape");
}

// ---------------------------------------------------------------------------
// Activations and reductions
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> silu(const Tensor<Real>& a) {
  const std::int64_t n = a.numel();
  std::vector<Real> out(n);
  const Real* p = a.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const Real s = Real(1) / (Real(1) + std::exp(-p[i]));
    out[i] = p[i] * s;
  }
  auto an = a.node();
  auto backprop = [an](typename Tensor<Real>::Node& nd) {
    an->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) {
      const Real x = an->data[i];
      const Real s = Real(1) / (Real(1) + std::exp(-x));
      an->grad[i] += nd.grad[i] * s * (Real(1) + x * (Real(1) - s));
    }
  };
  return detail::make_op<Real>(a.shape(), std::move(out), {an}, std::move(backprop), "silu");
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real acc = 0;
  for (const Real x : a.data()) acc += x;
  auto an = a.node();
  auto backprop = [an](typename Tensor<Real>::Node& nd) {
    an->ensure_grad();
    const Real g = nd.grad[0];
    for (auto& gg : an->grad) gg += g;
  };
  return detail::make_op<Real>({1}, {acc}, {an}, std::move(backprop), "sum");
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  Real acc = 0;
  for (const Real x : a.data()) acc += x;
  const Real inv = Real(1) / static_cast<Real>(a.numel());
  auto an = a.node();
  auto backprop = [an, inv](typename Tensor<Real>::Node& nd) {
    an->ensure_grad();
    const Real g = nd.grad[0] * inv;
    for (auto& gg : an->grad) gg += g;
  };
  return detail::make_op<Real>({1}, {acc * inv}, {an}, std::move(backprop), "mean");
}

// Mean squared error over all elements.
template <typename Real>
Tensor<Real> mse(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw DataError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
  const std::int64_t n = a.numel();
  Real acc = 0;
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const Real d = pa[i] - pb[i];
    acc += d * d;
  }
  const Real inv = Real(1) / static_cast<Real>(n);
  auto an = a.node();
  auto bn = b.node();
  auto backprop = [an, bn, inv](typename Tensor<Real>::Node& nd) {
    const Real g = nd.grad[0] * 2 * inv;
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    for (size_t i = 0; i < an->data.size(); ++i) {
      const Real d = (an->data[i] - bn->data[i]) * g;
      if (need_a) an->grad[i] += d;
      if (need_b) bn->grad[i] -= d;
    }
  };
  return detail::make_op<Real>({1}, {acc * inv}, {an, bn}, std::move(backprop), "mse");
}

// ---------------------------------------------------------------------------
// matmul (2-D)
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw DataError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
  const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  std::vector<Real> out(static_cast<size_t>(M) * N, Real(0));
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) {
      const Real av = pa[m * K + k];
      const Real* brow = pb + static_cast<size_t>(k) * N;
      Real* orow = out.data() + static_cast<size_t>(m) * N;
      for (int nn = 0; nn < N; ++nn) orow[nn] += av * brow[nn];
    }
  auto an = a.node();
  auto bn = b.node();
  auto backprop = [an, bn, M, K, N](typename Tensor<Real>::Node& nd) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int m = 0; m < M; ++m)
        for (int nn = 0; nn < N; ++nn) {
          const Real g = nd.grad[m * N + nn];
          for (int k = 0; k < K; ++k) an->grad[m * K + k] += g * bn->data[k * N + nn];
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
          const Real av = an->data[m * K + k];
          for (int nn = 0; nn < N; ++nn) bn->grad[k * N + nn] += av * nd.grad[m * N + nn];
        }
    }
  };
  return detail::make_op<Real>({M, N}, std::move(out), {an, bn}, std::move(backprop), "matmul");
}

// ---------------------------------------------------------------------------
// group_norm
// ---------------------------------------------------------------------------

// x: [N,C,H,W]; gamma/beta: [C]. Standard GroupNorm with biased variance.
template <typename Real>
Tensor<Real> group_norm(const Tensor<Real>& x, int groups, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5)) {
  if (x.shape().size() != 4) throw DataError("group_norm: expected NCHW input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (C % groups != 0) throw DataError("group_norm: channels not divisible by groups");
  const int cpg = C / groups;
  const std::int64_t gsz = static_cast<std::int64_t>(cpg) * H * W;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  std::vector<Real> out(x.numel());
  std::vector<Real> means(static_cast<size_t>(N) * groups);
  std::vector<Real> invs(static_cast<size_t>(N) * groups);
  const Real* px = x.data().data();
  const Real* pg = gamma.data().data();
  const Real* pbt = beta.data().data();
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
      Real m = 0;
      for (std::int64_t i = 0; i < gsz; ++i) m += px[base + i];
      m /= static_cast<Real>(gsz);
      Real v = 0;
      for (std::int64_t i = 0; i < gsz; ++i) {
        const Real d = px[base + i] - m;
        v += d * d;
      }
      v /= static_cast<Real>(gsz);
      const Real inv = Real(1) / std::sqrt(v + eps);
      means[n * groups + g] = m;
      invs[n * groups + g] = inv;
      for (int c = 0; c < cpg; ++c) {
        const int ch = g * cpg + c;
        for (std::int64_t i = 0; i < plane; ++i) {
          const std::int64_t off = base + c * plane + i;
          out[off] = (px[off] - m) * inv * pg[ch] + pbt[ch];
        }
      }
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto btn = beta.node();
  auto backprop = [xn, gn, btn, N, C, H, W, groups, cpg, gsz, plane, means,
                   invs](typename Tensor<Real>::Node& nd) {
    const bool need_x = xn->requires_grad;
    const bool need_g = gn->requires_grad;
    const bool need_b = btn->requires_grad;
    if (need_x) xn->ensure_grad();
    if (need_g) gn->ensure_grad();
    if (need_b) btn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < groups; ++g) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * plane;
        const Real m = means[n * groups + g];
        const Real inv = invs[n * groups + g];
        // y = (x - m) * inv; dy = dout * gamma.
        Real sum_dy = 0, sum_dy_y = 0;
        for (int c = 0; c < cpg; ++c) {
          const int ch = g * cpg + c;
          for (std::int64_t i = 0; i < plane; ++i) {
            const std::int64_t off = base + c * plane + i;
            const Real y = (xn->data[off] - m) * inv;
            const Real go = nd.grad[off];
            if (need_g) gn->grad[ch] += go * y;
            if (need_b) btn->grad[ch] += go;
            const Real dy = go * gn->data[ch];
            sum_dy += dy;
            sum_dy_y += dy * y;
          }
        }
        if (!need_x) continue;
        const Real im = Real(1) / static_cast<Real>(gsz);
        for (int c = 0; c < cpg; ++c) {
          const int ch = g * cpg + c;
          for (std::int64_t i = 0; i < plane; ++i) {
            const std::int64_t off = base + c * plane + i;
            const Real y = (xn->data[off] - m) * inv;
            const Real dy = nd.grad[off] * gn->data[ch];
            xn->grad[off] += inv * (dy - sum_dy * im - y * sum_dy_y * im);
          }
        }
      }
  };
  return detail::make_op<Real>(x.shape(), std::move(out), {xn, gn, btn}, std::move(backprop),
                               "group_norm");
}

// ---------------------------------------------------------------------------
// Gather / layout / resampling ops
// ---------------------------------------------------------------------------

// rows = table[indices]; table: [V,d], out: [n,d]. Grad scatter-adds into the
// selected rows.
template <typename Real>
Tensor<Real> index_select(const Tensor<Real>& table, const std::vector<int>& indices) {
  if (table.shape().size() != 2) throw DataError("index_select: table must be 2-D");
  const int V = table.shape()[0], d = table.shape()[1];
  std::vector<Real> out(indices.size() * static_cast<size_t>(d));
  const Real* pt = table.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= V) throw DataError("index_select: row " + std::to_string(r) + " out of range");
    std::copy(pt + static_cast<size_t>(r) * d, pt + static_cast<size_t>(r + 1) * d,
              out.begin() + i * d);
  }
  auto tn = table.node();
  auto idx = indices;
  auto backprop = [tn, idx, d](typename Tensor<Real>::Node& nd) {
    tn->ensure_grad();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) tn->grad[static_cast<size_t>(idx[i]) * d + j] += nd.grad[i * d + j];
  };
  return detail::make_op<Real>({static_cast<int>(indices.size()), d}, std::move(out), {tn},
                               std::move(backprop), "index_select");
}

// Concatenate along the channel axis of NCHW tensors.
template <typename Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw DataError("concat_channels: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<Real> out(static_cast<size_t>(N) * (Ca + Cb) * plane);
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (int n = 0; n < N; ++n) {
    std::copy(pa + static_cast<std::int64_t>(n) * Ca * plane,
              pa + static_cast<std::int64_t>(n + 1) * Ca * plane,
              out.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane);
    std::copy(pb + static_cast<std::int64_t>(n) * Cb * plane,
              pb + static_cast<std::int64_t>(n + 1) * Cb * plane,
              out.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane + Ca * plane);
  }
  auto an = a.node();
  auto bn = b.node();
  auto backprop = [an, bn, N, Ca, Cb, plane](typename Tensor<Real>::Node& nd) {
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) an->ensure_grad();
    if (need_b) bn->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const std::int64_t ob = static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
      if (need_a)
        for (std::int64_t i = 0; i < Ca * plane; ++i)
          an->grad[static_cast<std::int64_t>(n) * Ca * plane + i] += nd.grad[ob + i];
      if (need_b)
        for (std::int64_t i = 0; i < Cb * plane; ++i)
          bn->grad[static_cast<std::int64_t>(n) * Cb * plane + i] += nd.grad[ob + Ca * plane + i];
    }
  };
  return detail::make_op<Real>({N, Ca + Cb, H, W}, std::move(out), {an, bn}, std::move(backprop),
                               "concat_channels");
}

// [N,C,H,W] -> [N*H*W, C] rows (position-major), for per-position quantization.
template <typename Real>
Tensor<Real> chw_to_rows(const Tensor<Real>& x) {
  if (x.shape().size() != 4) throw DataError("chw_to_rows: expected NCHW input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<Real> out(x.numel());
  const Real* px = x.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::int64_t p = 0; p < plane; ++p)
        out[(n * plane + p) * C + c] = px[(static_cast<std::int64_t>(n) * C + c) * plane + p];
  auto xn = x.node();
  auto backprop = [xn, N, C, plane](typename Tensor<Real>::Node& nd) {
    xn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < plane; ++p)
          xn->grad[(static_cast<std::int64_t>(n) * C + c) * plane + p] +=
              nd.grad[(n * plane + p) * C + c];
  };
  return detail::make_op<Real>({static_cast<int>(N * plane), C}, std::move(out), {xn},
                               std::move(backprop), "chw_to_rows");
}

// Inverse of chw_to_rows.
template <typename Real>
Tensor<Real> rows_to_chw(const Tensor<Real>& rows, int N, int H, int W) {
  if (rows.shape().size() != 2 || rows.shape()[0] != N * H * W)
    throw DataError("rows_to_chw: row count mismatch");
  const int C = rows.shape()[1];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<Real> out(rows.numel());
  const Real* pr = rows.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::int64_t p = 0; p < plane; ++p)
        out[(static_cast<std::int64_t>(n) * C + c) * plane + p] = pr[(n * plane + p) * C + c];
  auto rn = rows.node();
  auto backprop = [rn, N, C, plane](typename Tensor<Real>::Node& nd) {
    rn->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < plane; ++p)
          rn->grad[(n * plane + p) * C + c] +=
              nd.grad[(static_cast<std::int64_t>(n) * C + c) * plane + p];
  };
  return detail::make_op<Real>({N, C, H, W}, std::move(out), {rn}, std::move(backprop),
                               "rows_to_chw");
}

template <typename Real>
Tensor<Real> upsample_nearest2x(const Tensor<Real>& x) {
  if (x.shape().size() != 4) throw DataError("upsample_nearest2x: expected NCHW input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int H2 = H * 2, W2 = W * 2;
  std::vector<Real> out(static_cast<size_t>(N) * C * H2 * W2);
  const Real* px = x.data().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const Real* src = px + static_cast<std::int64_t>(nc) * H * W;
    Real* dst = out.data() + static_cast<std::int64_t>(nc) * H2 * W2;
    for (int y = 0; y < H2; ++y)
      for (int x2 = 0; x2 < W2; ++x2) dst[y * W2 + x2] = src[(y / 2) * W + (x2 / 2)];
  }
  auto xn = x.node();
  auto backprop = [xn, N, C, H, W, H2, W2](typename Tensor<Real>::Node& nd) {
    xn->ensure_grad();
    for (int nc = 0; nc < N * C; ++nc) {
      Real* gsrc = xn->grad.data() + static_cast<std::int64_t>(nc) * H * W;
      const Real* gdst = nd.grad.data() + static_cast<std::int64_t>(nc) * H2 * W2;
      for (int y = 0; y < H2; ++y)
        for (int x2 = 0; x2 < W2; ++x2) gsrc[(y / 2) * W + (x2 / 2)] += gdst[y * W2 + x2];
    }
  };
  return detail::make_op<Real>({N, C, H2, W2}, std::move(out), {xn}, std::move(backprop),
                               "upsample_nearest2x");
}

// Bilinear resize of NCHW to (H,W), align_corners=false.
template <typename Real>
Tensor<Real> upsample_bilinear(const Tensor<Real>& x, int H, int W) {
  if (x.shape().size() != 4) throw DataError("upsample_bilinear: expected NCHW input");
  const int N = x.shape()[0], C = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h > H || w > W) throw DataError("upsample_bilinear: target smaller than source");

  struct Tap {
    int i0, i1;
    Real f;  // weight of i1
  };
  auto make_taps = [](int src, int dst) {
    std::vector<Tap> taps(dst);
    for (int o = 0; o < dst; ++o) {
      double s = (o + 0.5) * static_cast<double>(src) / dst - 0.5;
      if (s < 0) s = 0;
      if (s > src - 1) s = src - 1;
      const int i0 = static_cast<int>(s);
      taps[o] = {i0, std::min(i0 + 1, src - 1), static_cast<Real>(s - i0)};
    }
    return taps;
  };
  const auto ty = make_taps(h, H);
  const auto tx = make_taps(w, W);

  std::vector<Real> out(static_cast<size_t>(N) * C * H * W);
  const Real* px = x.data().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const Real* src = px + static_cast<std::int64_t>(nc) * h * w;
    Real* dst = out.data() + static_cast<std::int64_t>(nc) * H * W;
    for (int y = 0; y < H; ++y) {
      const Tap& ay = ty[y];
      for (int xx = 0; xx < W; ++xx) {
        const Tap& ax = tx[xx];
        const Real v00 = src[ay.i0 * w + ax.i0];
        const Real v01 = src[ay.i0 * w + ax.i1];
        const Real v10 = src[ay.i1 * w + ax.i0];
        const Real v11 = src[ay.i1 * w + ax.i1];
        const Real top = v00 + (v01 - v00) * ax.f;
        const Real bot = v10 + (v11 - v10) * ax.f;
        dst[y * W + xx] = top + (bot - top) * ay.f;
      }
    }
  }
  auto xn = x.node();
  auto backprop = [xn, N, C, h, w, H, W, ty, tx](typename Tensor<Real>::Node& nd) {
    xn->ensure_grad();
    for (int nc = 0; nc < N * C; ++nc) {
      Real* gsrc = xn->grad.data() + static_cast<std::int64_t>(nc) * h * w;
      const Real* gdst = nd.grad.data() + static_cast<std::int64_t>(nc) * H * W;
      for (int y = 0; y < H; ++y) {
        const Tap& ay = ty[y];
        for (int xx = 0; xx < W; ++xx) {
          const Tap& ax = tx[xx];
          const Real g = gdst[y * W + xx];
          gsrc[ay.i0 * w + ax.i0] += g * (1 - ay.f) * (1 - ax.f);
          gsrc[ay.i0 * w + ax.i1] += g * (1 - ay.f) * ax.f;
          gsrc[ay.i1 * w + ax.i0] += g * ay.f * (1 - ax.f);
          gsrc[ay.i1 * w + ax.i1] += g * ay.f * ax.f;
        }
      }
    }
  };
  return detail::make_op<Real>({N, C, H, W}, std::move(out), {xn}, std::move(backprop),
                               "upsample_bilinear");
}

}  // namespace pcm
