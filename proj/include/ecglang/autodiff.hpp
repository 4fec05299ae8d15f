#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ecglang/rng.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::ad {

using ecglang::Tensor;

// Reverse-mode tape. Ops append nodes in topological order, so walking the
// node list backwards is a valid reverse sweep. Values are never mutated
// after creation; gradients are allocated lazily.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool ng = false;  // does anything trainable feed this node
    std::function<void()> back;
  };

  bool training = false;
  Rng rng{0};

  int add_node(Tensor<T> val, bool ng) {
    nodes_.push_back(Node{std::move(val), Tensor<T>(), ng, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int leaf(Tensor<T> val, bool needs_grad) {
    return add_node(std::move(val), needs_grad);
  }
  int constant(Tensor<T> val) { return add_node(std::move(val), false); }

  Node& node(int i) { return nodes_[i]; }
  const Tensor<T>& val(int i) const { return nodes_[i].val; }
  bool ng(int i) const { return nodes_[i].ng; }

  // Gradient accumulator; allocates zeros on first touch.
  Tensor<T>& g(int i) {
    Node& n = nodes_[i];
    if (!n.grad.defined()) n.grad = Tensor<T>::zeros(n.val.shape());
    return n.grad;
  }
  const Tensor<T>& grad(int i) const { return nodes_[i].grad; }

  void backward(int root) {
    if (val(root).numel() != 1)
      throw std::invalid_argument("backward expects a scalar root");
    g(root)[0] = T(1);
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.defined()) n.back();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
inline void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
int add(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.shape() == y.shape(), "add: shape mismatch");
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    }
    if (tp.ng(b)) {
      auto& gb = tp.g(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
    }
  };
  return id;
}

template <typename T>
int sub(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.shape() == y.shape(), "sub: shape mismatch");
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    }
    if (tp.ng(b)) {
      auto& gb = tp.g(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
    }
  };
  return id;
}

template <typename T>
int mul(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.shape() == y.shape(), "mul: shape mismatch");
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b] {
    const auto& go = tp.grad(id);
    const auto& x = tp.val(a);
    const auto& y = tp.val(b);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i];
    }
    if (tp.ng(b)) {
      auto& gb = tp.g(b);
      for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * x[i];
    }
  };
  return id;
}

template <typename T>
int scale(Tape<T>& tp, int a, T c) {
  const auto& x = tp.val(a);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, c] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * c;
  };
  return id;
}

template <typename T>
int relu(Tape<T>& tp, int a) {
  const auto& x = tp.val(a);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    const auto& x = tp.val(a);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < go.numel(); ++i)
      if (x[i] > T(0)) ga[i] += go[i];
  };
  return id;
}

template <typename T>
int gelu(Tape<T>& tp, int a) {
  const auto& x = tp.val(a);
  Tensor<T> out(x.shape());
  constexpr double inv_sqrt2 = 0.7071067811865476;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double v = static_cast<double>(x[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    const auto& x = tp.val(a);
    auto& ga = tp.g(a);
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (int64_t i = 0; i < go.numel(); ++i) {
      double v = static_cast<double>(x[i]);
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      ga[i] += go[i] * static_cast<T>(cdf + v * pdf);
    }
  };
  return id;
}

// (x + eps)^(-1/2), used by the normalization layers.
template <typename T>
int rsqrt_eps(Tape<T>& tp, int a, T eps) {
  const auto& x = tp.val(a);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = T(1) / std::sqrt(x[i] + eps);
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    const auto& y = tp.val(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < go.numel(); ++i)
      ga[i] += go[i] * T(-0.5) * y[i] * y[i] * y[i];
  };
  return id;
}

// Scalar probe used by tests and simple reductions: sum_i w[i] * x[i].
template <typename T>
int weighted_sum(Tape<T>& tp, int a, Tensor<T> w) {
  const auto& x = tp.val(a);
  detail::check(w.numel() == x.numel(), "weighted_sum: size mismatch");
  double acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i)
    acc += static_cast<double>(x[i]) * static_cast<double>(w[i]);
  int id = tp.add_node(Tensor<T>::scalar(static_cast<T>(acc)), tp.ng(a));
  tp.node(id).back = [&tp, id, a, w = std::move(w)] {
    if (!tp.ng(a)) return;
    T go = tp.grad(id)[0];
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go * w[i];
  };
  return id;
}

template <typename T>
int mean_all(Tape<T>& tp, int a) {
  int64_t n = tp.val(a).numel();
  return weighted_sum(tp, a, Tensor<T>::full({n}, T(1) / static_cast<T>(n)));
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

template <typename T>
int reshape(Tape<T>& tp, int a, Shape shape) {
  int id = tp.add_node(tp.val(a).reshaped(shape), tp.ng(a));
  tp.node(id).back = [&tp, id, a] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
  };
  return id;
}

namespace detail {
template <typename T>
Tensor<T> permute_copy(const Tensor<T>& x, const std::vector<int>& perm) {
  int nd = x.ndim();
  Shape in_shape = x.shape(), out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];
  Tensor<T> out(out_shape);
  std::vector<int64_t> in_strides(nd, 1), out_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) {
    in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  }
  std::vector<int64_t> idx(nd, 0);
  const T* src = x.data();
  T* dst = out.data();
  int64_t n = x.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t src_off = 0;
    for (int i = 0; i < nd; ++i) src_off += idx[i] * in_strides[perm[i]];
    dst[flat] = src[src_off];
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
int permute(Tape<T>& tp, int a, std::vector<int> perm) {
  detail::check(static_cast<int>(perm.size()) == tp.val(a).ndim(),
                "permute: rank mismatch");
  int id = tp.add_node(detail::permute_copy(tp.val(a), perm), tp.ng(a));
  tp.node(id).back = [&tp, id, a, perm] {
    if (!tp.ng(a)) return;
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    Tensor<T> gt = detail::permute_copy(tp.grad(id), inv);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < gt.numel(); ++i) ga[i] += gt[i];
  };
  return id;
}

template <typename T>
int concat_cols(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.ndim() == 2 && y.ndim() == 2 && x.dim(0) == y.dim(0),
                "concat_cols: need matching 2-d rows");
  int64_t r = x.dim(0), ca = x.dim(1), cb = y.dim(1);
  Tensor<T> out({r, ca + cb});
  for (int64_t i = 0; i < r; ++i) {
    std::copy(x.data() + i * ca, x.data() + (i + 1) * ca,
              out.data() + i * (ca + cb));
    std::copy(y.data() + i * cb, y.data() + (i + 1) * cb,
              out.data() + i * (ca + cb) + ca);
  }
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b, r, ca, cb] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < ca; ++j)
          ga[i * ca + j] += go[i * (ca + cb) + j];
    }
    if (tp.ng(b)) {
      auto& gb = tp.g(b);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < cb; ++j)
          gb[i * cb + j] += go[i * (ca + cb) + ca + j];
    }
  };
  return id;
}

// x[:, :, :len] for (B, C, L) tensors.
template <typename T>
int crop_time(Tape<T>& tp, int a, int64_t len) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3 && len <= x.dim(2), "crop_time: bad length");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor<T> out({b, c, len});
  for (int64_t i = 0; i < b * c; ++i)
    std::copy(x.data() + i * l, x.data() + i * l + len, out.data() + i * len);
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, b, c, l, len] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < b * c; ++i)
      for (int64_t j = 0; j < len; ++j) ga[i * l + j] += go[i * len + j];
  };
  return id;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
int matmul(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.ndim() == 2 && y.ndim() == 2 && x.dim(1) == y.dim(0),
                "matmul: shape mismatch");
  int64_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor<T> out({m, n});
  gemm_ptr(x.data(), m, k, false, y.data(), k, n, false, out.data(), false);
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b, m, k, n] {
    const auto& go = tp.grad(id);
    const auto& x = tp.val(a);
    const auto& y = tp.val(b);
    if (tp.ng(a))
      gemm_ptr(go.data(), m, n, false, y.data(), k, n, true, tp.g(a).data(), true);
    if (tp.ng(b))
      gemm_ptr(x.data(), m, k, true, go.data(), m, n, false, tp.g(b).data(), true);
  };
  return id;
}

// y = x * W^T (+ bias). W is (out, in) so rows are output features.
template <typename T>
int linear(Tape<T>& tp, int x, int w, int bias = -1) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  detail::check(xv.ndim() == 2 && wv.ndim() == 2 && xv.dim(1) == wv.dim(1),
                "linear: shape mismatch");
  int64_t r = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  Tensor<T> out({r, out_dim});
  gemm_ptr(xv.data(), r, in, false, wv.data(), out_dim, in, true, out.data(),
           false);
  if (bias >= 0) {
    const auto& bv = tp.val(bias);
    detail::check(bv.numel() == out_dim, "linear: bias size");
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bv[j];
  }
  bool ng = tp.ng(x) || tp.ng(w) || (bias >= 0 && tp.ng(bias));
  int id = tp.add_node(std::move(out), ng);
  tp.node(id).back = [&tp, id, x, w, bias, r, in, out_dim] {
    const auto& go = tp.grad(id);
    if (tp.ng(x))
      gemm_ptr(go.data(), r, out_dim, false, tp.val(w).data(), out_dim, in,
               false, tp.g(x).data(), true);
    if (tp.ng(w))
      gemm_ptr(go.data(), r, out_dim, true, tp.val(x).data(), r, in, false,
               tp.g(w).data(), true);
    if (bias >= 0 && tp.ng(bias)) {
      auto& gb = tp.g(bias);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < out_dim; ++j) gb[j] += go[i * out_dim + j];
    }
  };
  return id;
}

namespace detail {
template <typename T>
void bmm_impl(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out, bool ta,
              bool tb, bool accumulate) {
  int64_t n_batch = a.dim(0);
  int64_t am = a.dim(1), an = a.dim(2), bm = b.dim(1), bn = b.dim(2);
  for (int64_t i = 0; i < n_batch; ++i)
    gemm_ptr(a.data() + i * am * an, am, an, ta, b.data() + i * bm * bn, bm,
             bn, tb, out.data() + i * out.dim(1) * out.dim(2), accumulate);
}
}  // namespace detail

// (N, M, K) x (N, K, P) -> (N, M, P)
template <typename T>
int bmm(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.ndim() == 3 && y.ndim() == 3 && x.dim(0) == y.dim(0) &&
                    x.dim(2) == y.dim(1),
                "bmm: shape mismatch");
  Tensor<T> out({x.dim(0), x.dim(1), y.dim(2)});
  detail::bmm_impl(x, y, out, false, false, false);
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) detail::bmm_impl(go, tp.val(b), tp.g(a), false, true, true);
    if (tp.ng(b)) detail::bmm_impl(tp.val(a), go, tp.g(b), true, false, true);
  };
  return id;
}

// (N, M, K) x (N, P, K) -> (N, M, P), i.e. a * b^T per batch.
template <typename T>
int bmm_nt(Tape<T>& tp, int a, int b) {
  const auto& x = tp.val(a);
  const auto& y = tp.val(b);
  detail::check(x.ndim() == 3 && y.ndim() == 3 && x.dim(0) == y.dim(0) &&
                    x.dim(2) == y.dim(2),
                "bmm_nt: shape mismatch");
  Tensor<T> out({x.dim(0), x.dim(1), y.dim(1)});
  detail::bmm_impl(x, y, out, false, true, false);
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(b));
  tp.node(id).back = [&tp, id, a, b] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) detail::bmm_impl(go, tp.val(b), tp.g(a), false, false, true);
    if (tp.ng(b)) detail::bmm_impl(go, tp.val(a), tp.g(b), true, false, true);
  };
  return id;
}

// ---------------------------------------------------------------------------
// gather / scatter
// ---------------------------------------------------------------------------

template <typename T>
int embedding(Tape<T>& tp, int table, std::vector<int32_t> ids) {
  const auto& tab = tp.val(table);
  detail::check(tab.ndim() == 2, "embedding: table must be 2-d");
  int64_t v = tab.dim(0), d = tab.dim(1);
  int64_t n = static_cast<int64_t>(ids.size());
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    detail::check(ids[i] >= 0 && ids[i] < v, "embedding: id out of range");
    std::copy(tab.data() + ids[i] * d, tab.data() + (ids[i] + 1) * d,
              out.data() + i * d);
  }
  int id = tp.add_node(std::move(out), tp.ng(table));
  tp.node(id).back = [&tp, id, table, ids = std::move(ids), d] {
    if (!tp.ng(table)) return;
    const auto& go = tp.grad(id);
    auto& gt = tp.g(table);
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        gt[ids[i] * d + j] += go[static_cast<int64_t>(i) * d + j];
  };
  return id;
}

// Rows of src placed at row_idx in an (n_rows, D) zero tensor. Indices must
// be unique.
template <typename T>
int scatter_rows(Tape<T>& tp, int src, std::vector<int64_t> row_idx,
                 int64_t n_rows) {
  const auto& s = tp.val(src);
  detail::check(s.ndim() == 2 &&
                    s.dim(0) == static_cast<int64_t>(row_idx.size()),
                "scatter_rows: shape mismatch");
  int64_t d = s.dim(1);
  Tensor<T> out({n_rows, d});
  for (size_t i = 0; i < row_idx.size(); ++i) {
    detail::check(row_idx[i] >= 0 && row_idx[i] < n_rows,
                  "scatter_rows: index out of range");
    std::copy(s.data() + i * d, s.data() + (i + 1) * d,
              out.data() + row_idx[i] * d);
  }
  int id = tp.add_node(std::move(out), tp.ng(src));
  tp.node(id).back = [&tp, id, src, row_idx = std::move(row_idx), d] {
    if (!tp.ng(src)) return;
    const auto& go = tp.grad(id);
    auto& gs = tp.g(src);
    for (size_t i = 0; i < row_idx.size(); ++i)
      for (int64_t j = 0; j < d; ++j)
        gs[static_cast<int64_t>(i) * d + j] += go[row_idx[i] * d + j];
  };
  return id;
}

// ---------------------------------------------------------------------------
// (B, C, L) channel helpers — masks are plain tensors, never differentiated
// ---------------------------------------------------------------------------

// Mean over batch and time of positions where mask (B, L) is 1 -> (C).
template <typename T>
int masked_channel_mean(Tape<T>& tp, int a, Tensor<T> mask) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3, "masked_channel_mean: need (B,C,L)");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  detail::check(mask.numel() == b * l, "masked_channel_mean: mask shape");
  double cnt = 0;
  for (int64_t i = 0; i < b * l; ++i) cnt += static_cast<double>(mask[i]);
  detail::check(cnt > 0, "masked_channel_mean: empty mask");
  Tensor<T> out({c});
  for (int64_t ci = 0; ci < c; ++ci) {
    double acc = 0;
    for (int64_t bi = 0; bi < b; ++bi) {
      const T* row = x.data() + (bi * c + ci) * l;
      const T* m = mask.data() + bi * l;
      for (int64_t t = 0; t < l; ++t) acc += static_cast<double>(row[t]) * m[t];
    }
    out[ci] = static_cast<T>(acc / cnt);
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, mask = std::move(mask), b, c, l, cnt] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    T inv = static_cast<T>(1.0 / cnt);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci) {
        T* row = ga.data() + (bi * c + ci) * l;
        const T* m = mask.data() + bi * l;
        T gc = go[ci] * inv;
        for (int64_t t = 0; t < l; ++t) row[t] += gc * m[t];
      }
  };
  return id;
}

namespace detail {
enum class ChanOp { Sub, Mul, Add };
}

template <typename T>
int channel_binary(Tape<T>& tp, int a, int v, detail::ChanOp op) {
  const auto& x = tp.val(a);
  const auto& vec = tp.val(v);
  detail::check(x.ndim() == 3 && vec.numel() == x.dim(1),
                "channel op: shape mismatch");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor<T> out(x.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* src = x.data() + (bi * c + ci) * l;
      T* dst = out.data() + (bi * c + ci) * l;
      T s = vec[ci];
      switch (op) {
        case detail::ChanOp::Sub:
          for (int64_t t = 0; t < l; ++t) dst[t] = src[t] - s;
          break;
        case detail::ChanOp::Mul:
          for (int64_t t = 0; t < l; ++t) dst[t] = src[t] * s;
          break;
        case detail::ChanOp::Add:
          for (int64_t t = 0; t < l; ++t) dst[t] = src[t] + s;
          break;
      }
    }
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(v));
  tp.node(id).back = [&tp, id, a, v, op, b, c, l] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      if (op == detail::ChanOp::Mul) {
        const auto& vec = tp.val(v);
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t ci = 0; ci < c; ++ci) {
            T* dst = ga.data() + (bi * c + ci) * l;
            const T* src = go.data() + (bi * c + ci) * l;
            for (int64_t t = 0; t < l; ++t) dst[t] += src[t] * vec[ci];
          }
      } else {
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      }
    }
    if (tp.ng(v)) {
      auto& gv = tp.g(v);
      const auto& x = tp.val(a);
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          const T* src = go.data() + (bi * c + ci) * l;
          double acc = 0;
          if (op == detail::ChanOp::Mul) {
            const T* xv = x.data() + (bi * c + ci) * l;
            for (int64_t t = 0; t < l; ++t)
              acc += static_cast<double>(src[t]) * xv[t];
          } else {
            for (int64_t t = 0; t < l; ++t) acc += src[t];
          }
          gv[ci] += static_cast<T>(op == detail::ChanOp::Sub ? -acc : acc);
        }
    }
  };
  return id;
}

template <typename T>
int sub_channel(Tape<T>& tp, int a, int v) {
  return channel_binary(tp, a, v, detail::ChanOp::Sub);
}
template <typename T>
int mul_channel(Tape<T>& tp, int a, int v) {
  return channel_binary(tp, a, v, detail::ChanOp::Mul);
}
template <typename T>
int add_channel(Tape<T>& tp, int a, int v) {
  return channel_binary(tp, a, v, detail::ChanOp::Add);
}

// x (B, C, L) * mask (B, L); zeroes out padding so it cannot leak forward.
template <typename T>
int mul_time_mask(Tape<T>& tp, int a, Tensor<T> mask) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3 && mask.numel() == x.dim(0) * x.dim(2),
                "mul_time_mask: shape mismatch");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor<T> out(x.shape());
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* src = x.data() + (bi * c + ci) * l;
      const T* m = mask.data() + bi * l;
      T* dst = out.data() + (bi * c + ci) * l;
      for (int64_t t = 0; t < l; ++t) dst[t] = src[t] * m[t];
    }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, mask = std::move(mask), b, c, l] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci) {
        const T* src = go.data() + (bi * c + ci) * l;
        const T* m = mask.data() + bi * l;
        T* dst = ga.data() + (bi * c + ci) * l;
        for (int64_t t = 0; t < l; ++t) dst[t] += src[t] * m[t];
      }
  };
  return id;
}

// Max over valid time steps -> (B, C). lens[b] >= 1.
template <typename T>
int masked_max_time(Tape<T>& tp, int a, std::vector<int64_t> lens) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3 &&
                    static_cast<int64_t>(lens.size()) == x.dim(0),
                "masked_max_time: shape mismatch");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor<T> out({b, c});
  auto argmax = std::make_shared<std::vector<int64_t>>(b * c);
  for (int64_t bi = 0; bi < b; ++bi) {
    int64_t valid = std::min(lens[bi], l);
    detail::check(valid >= 1, "masked_max_time: empty row");
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* row = x.data() + (bi * c + ci) * l;
      int64_t best = 0;
      for (int64_t t = 1; t < valid; ++t)
        if (row[t] > row[best]) best = t;
      out[bi * c + ci] = row[best];
      (*argmax)[bi * c + ci] = best;
    }
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, argmax, b, c, l] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < b * c; ++i)
      ga[i * l + (*argmax)[i]] += go[i];
  };
  return id;
}

// Mean over valid time steps -> (B, C).
template <typename T>
int masked_avg_time(Tape<T>& tp, int a, std::vector<int64_t> lens) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3 &&
                    static_cast<int64_t>(lens.size()) == x.dim(0),
                "masked_avg_time: shape mismatch");
  int64_t b = x.dim(0), c = x.dim(1), l = x.dim(2);
  Tensor<T> out({b, c});
  for (int64_t bi = 0; bi < b; ++bi) {
    int64_t valid = std::min(lens[bi], l);
    detail::check(valid >= 1, "masked_avg_time: empty row");
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* row = x.data() + (bi * c + ci) * l;
      double acc = 0;
      for (int64_t t = 0; t < valid; ++t) acc += row[t];
      out[bi * c + ci] = static_cast<T>(acc / valid);
    }
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, lens = std::move(lens), b, c, l] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t bi = 0; bi < b; ++bi) {
      int64_t valid = std::min(lens[bi], l);
      T inv = T(1) / static_cast<T>(valid);
      for (int64_t ci = 0; ci < c; ++ci) {
        T* row = ga.data() + (bi * c + ci) * l;
        T gv = go[bi * c + ci] * inv;
        for (int64_t t = 0; t < valid; ++t) row[t] += gv;
      }
    }
  };
  return id;
}

// ---------------------------------------------------------------------------
// (R, C) row helpers for layer norm
// ---------------------------------------------------------------------------

template <typename T>
int row_mean(Tape<T>& tp, int a) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 2, "row_mean: need 2-d");
  int64_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out({r});
  for (int64_t i = 0; i < r; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < c; ++j) acc += x[i * c + j];
    out[i] = static_cast<T>(acc / c);
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, r, c] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    T inv = T(1) / static_cast<T>(c);
    for (int64_t i = 0; i < r; ++i) {
      T gv = go[i] * inv;
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += gv;
    }
  };
  return id;
}

namespace detail {
enum class RowOp { Sub, Mul };
}

template <typename T>
int rowvec_binary(Tape<T>& tp, int a, int v, detail::RowOp op) {
  const auto& x = tp.val(a);
  const auto& vec = tp.val(v);
  detail::check(x.ndim() == 2 && vec.numel() == x.dim(0),
                "rowvec op: shape mismatch");
  int64_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < r; ++i) {
    T s = vec[i];
    const T* src = x.data() + i * c;
    T* dst = out.data() + i * c;
    if (op == detail::RowOp::Sub)
      for (int64_t j = 0; j < c; ++j) dst[j] = src[j] - s;
    else
      for (int64_t j = 0; j < c; ++j) dst[j] = src[j] * s;
  }
  int id = tp.add_node(std::move(out), tp.ng(a) || tp.ng(v));
  tp.node(id).back = [&tp, id, a, v, op, r, c] {
    const auto& go = tp.grad(id);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      if (op == detail::RowOp::Mul) {
        const auto& vec = tp.val(v);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            ga[i * c + j] += go[i * c + j] * vec[i];
      } else {
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
      }
    }
    if (tp.ng(v)) {
      auto& gv = tp.g(v);
      const auto& x = tp.val(a);
      for (int64_t i = 0; i < r; ++i) {
        double acc = 0;
        if (op == detail::RowOp::Mul) {
          for (int64_t j = 0; j < c; ++j)
            acc += static_cast<double>(go[i * c + j]) * x[i * c + j];
        } else {
          for (int64_t j = 0; j < c; ++j) acc += go[i * c + j];
        }
        gv[i] += static_cast<T>(op == detail::RowOp::Sub ? -acc : acc);
      }
    }
  };
  return id;
}

template <typename T>
int sub_rowvec(Tape<T>& tp, int a, int v) {
  return rowvec_binary(tp, a, v, detail::RowOp::Sub);
}
template <typename T>
int mul_rowvec(Tape<T>& tp, int a, int v) {
  return rowvec_binary(tp, a, v, detail::RowOp::Mul);
}

// y = x * gamma[c] + beta[c] over columns.
template <typename T>
int affine_cols(Tape<T>& tp, int a, int gamma, int beta) {
  const auto& x = tp.val(a);
  const auto& gv = tp.val(gamma);
  const auto& bv = tp.val(beta);
  detail::check(x.ndim() == 2 && gv.numel() == x.dim(1) &&
                    bv.numel() == x.dim(1),
                "affine_cols: shape mismatch");
  int64_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out[i * c + j] = x[i * c + j] * gv[j] + bv[j];
  int id = tp.add_node(std::move(out),
                       tp.ng(a) || tp.ng(gamma) || tp.ng(beta));
  tp.node(id).back = [&tp, id, a, gamma, beta, r, c] {
    const auto& go = tp.grad(id);
    const auto& x = tp.val(a);
    const auto& gv = tp.val(gamma);
    if (tp.ng(a)) {
      auto& ga = tp.g(a);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          ga[i * c + j] += go[i * c + j] * gv[j];
    }
    if (tp.ng(gamma)) {
      auto& gg = tp.g(gamma);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          gg[j] += go[i * c + j] * x[i * c + j];
    }
    if (tp.ng(beta)) {
      auto& gb = tp.g(beta);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
    }
  };
  return id;
}

// Mean over valid sequence positions of x (B, L, D) -> (B, D).
template <typename T>
int masked_mean_seq(Tape<T>& tp, int a, Tensor<T> mask) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3 && mask.numel() == x.dim(0) * x.dim(1),
                "masked_mean_seq: shape mismatch");
  int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  auto cnt = std::make_shared<std::vector<double>>(b, 0.0);
  for (int64_t bi = 0; bi < b; ++bi) {
    double acc = 0;
    for (int64_t t = 0; t < l; ++t) acc += mask[bi * l + t];
    (*cnt)[bi] = acc;
    detail::check(acc > 0, "masked_mean_seq: all positions masked");
  }
  Tensor<T> out({b, d});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < l; ++t) {
      T m = mask[bi * l + t];
      if (m == T(0)) continue;
      const T* row = x.data() + (bi * l + t) * d;
      T* dst = out.data() + bi * d;
      T w = m / static_cast<T>((*cnt)[bi]);
      for (int64_t j = 0; j < d; ++j) dst[j] += row[j] * w;
    }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, mask = std::move(mask), cnt, b, l, d] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t t = 0; t < l; ++t) {
        T m = mask[bi * l + t];
        if (m == T(0)) continue;
        T w = m / static_cast<T>((*cnt)[bi]);
        const T* src = go.data() + bi * d;
        T* dst = ga.data() + (bi * l + t) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j] * w;
      }
  };
  return id;
}

// ---------------------------------------------------------------------------
// softmax and losses
// ---------------------------------------------------------------------------

// scores (B*H, Lq, Lk) with key mask (B, Lk). Masked keys get probability 0;
// rows with no valid key come out all-zero.
template <typename T>
int masked_softmax(Tape<T>& tp, int a, Tensor<T> key_mask, int64_t n_heads) {
  const auto& x = tp.val(a);
  detail::check(x.ndim() == 3, "masked_softmax: need (BH, Lq, Lk)");
  int64_t bh = x.dim(0), lq = x.dim(1), lk = x.dim(2);
  detail::check(bh % n_heads == 0 && key_mask.numel() == (bh / n_heads) * lk,
                "masked_softmax: mask shape");
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < bh; ++i) {
    const T* m = key_mask.data() + (i / n_heads) * lk;
    for (int64_t q = 0; q < lq; ++q) {
      const T* row = x.data() + (i * lq + q) * lk;
      T* dst = out.data() + (i * lq + q) * lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < lk; ++k)
        if (m[k] != T(0)) mx = std::max(mx, static_cast<double>(row[k]));
      if (!std::isfinite(mx)) continue;  // fully masked row stays zero
      double denom = 0;
      for (int64_t k = 0; k < lk; ++k)
        if (m[k] != T(0)) denom += std::exp(static_cast<double>(row[k]) - mx);
      for (int64_t k = 0; k < lk; ++k)
        dst[k] = m[k] != T(0)
                     ? static_cast<T>(
                           std::exp(static_cast<double>(row[k]) - mx) / denom)
                     : T(0);
    }
  }
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, bh, lq, lk] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    const auto& y = tp.val(id);
    auto& ga = tp.g(a);
    for (int64_t r = 0; r < bh * lq; ++r) {
      const T* yr = y.data() + r * lk;
      const T* gr = go.data() + r * lk;
      T* dst = ga.data() + r * lk;
      double dot = 0;
      for (int64_t k = 0; k < lk; ++k)
        dot += static_cast<double>(gr[k]) * yr[k];
      for (int64_t k = 0; k < lk; ++k)
        dst[k] += yr[k] * (gr[k] - static_cast<T>(dot));
    }
  };
  return id;
}

// Mean cross entropy over rows whose label != ignore_index.
template <typename T>
int softmax_ce(Tape<T>& tp, int logits, std::vector<int32_t> labels,
               int32_t ignore_index = -1) {
  const auto& x = tp.val(logits);
  detail::check(x.ndim() == 2 &&
                    static_cast<int64_t>(labels.size()) == x.dim(0),
                "softmax_ce: shape mismatch");
  int64_t n = x.dim(0), v = x.dim(1);
  int64_t n_labeled = 0;
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] == ignore_index) continue;
    detail::check(labels[i] >= 0 && labels[i] < v, "softmax_ce: bad label");
    ++n_labeled;
    const T* row = x.data() + i * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    loss += mx + std::log(denom) - static_cast<double>(row[labels[i]]);
  }
  detail::check(n_labeled > 0, "softmax_ce: no labeled rows");
  loss /= static_cast<double>(n_labeled);
  int id = tp.add_node(Tensor<T>::scalar(static_cast<T>(loss)), tp.ng(logits));
  tp.node(id).back = [&tp, id, logits, labels = std::move(labels),
                      ignore_index, n, v, n_labeled] {
    if (!tp.ng(logits)) return;
    T go = tp.grad(id)[0];
    const auto& x = tp.val(logits);
    auto& gx = tp.g(logits);
    T w = go / static_cast<T>(n_labeled);
    for (int64_t i = 0; i < n; ++i) {
      if (labels[i] == ignore_index) continue;
      const T* row = x.data() + i * v;
      T* dst = gx.data() + i * v;
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double denom = 0;
      for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      for (int64_t j = 0; j < v; ++j) {
        T p = static_cast<T>(std::exp(row[j] - mx) / denom);
        dst[j] += w * (p - (j == labels[i] ? T(1) : T(0)));
      }
    }
  };
  return id;
}

// Mean binary cross entropy with logits over every element.
template <typename T>
int bce_with_logits(Tape<T>& tp, int logits, Tensor<T> targets) {
  const auto& x = tp.val(logits);
  detail::check(targets.numel() == x.numel(), "bce_with_logits: size mismatch");
  int64_t n = x.numel();
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double v = x[i], t = targets[i];
    loss += std::max(v, 0.0) - v * t + std::log1p(std::exp(-std::abs(v)));
  }
  loss /= static_cast<double>(n);
  int id = tp.add_node(Tensor<T>::scalar(static_cast<T>(loss)), tp.ng(logits));
  tp.node(id).back = [&tp, id, logits, targets = std::move(targets), n] {
    if (!tp.ng(logits)) return;
    T go = tp.grad(id)[0];
    const auto& x = tp.val(logits);
    auto& gx = tp.g(logits);
    T w = go / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
      double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
      gx[i] += w * static_cast<T>(sig - targets[i]);
    }
  };
  return id;
}

// Per-row masked mean of the Huber penalty, then mean over rows with any
// valid position. pred/target are (B, L); mask selects valid samples.
template <typename T>
int huber_loss_masked(Tape<T>& tp, int pred, Tensor<T> target, Tensor<T> mask,
                      T beta) {
  const auto& x = tp.val(pred);
  detail::check(x.numel() == target.numel() && x.numel() == mask.numel() &&
                    x.ndim() == 2,
                "huber_loss_masked: shape mismatch");
  detail::check(beta > T(0), "huber_loss_masked: beta must be positive");
  int64_t b = x.dim(0), l = x.dim(1);
  auto cnt = std::make_shared<std::vector<double>>(b, 0.0);
  int64_t rows = 0;
  double loss = 0;
  for (int64_t i = 0; i < b; ++i) {
    double row_loss = 0, c = 0;
    for (int64_t j = 0; j < l; ++j) {
      if (mask[i * l + j] == T(0)) continue;
      double r = static_cast<double>(x[i * l + j]) - target[i * l + j];
      double a = std::abs(r);
      row_loss += a <= beta ? 0.5 * r * r : beta * (a - 0.5 * beta);
      c += 1;
    }
    (*cnt)[i] = c;
    if (c > 0) {
      loss += row_loss / c;
      ++rows;
    }
  }
  detail::check(rows > 0, "huber_loss_masked: empty batch");
  loss /= static_cast<double>(rows);
  int id = tp.add_node(Tensor<T>::scalar(static_cast<T>(loss)), tp.ng(pred));
  tp.node(id).back = [&tp, id, pred, target = std::move(target),
                      mask = std::move(mask), cnt, beta, b, l, rows] {
    if (!tp.ng(pred)) return;
    T go = tp.grad(id)[0];
    const auto& x = tp.val(pred);
    auto& gx = tp.g(pred);
    for (int64_t i = 0; i < b; ++i) {
      if ((*cnt)[i] == 0) continue;
      T w = go / static_cast<T>((*cnt)[i] * rows);
      for (int64_t j = 0; j < l; ++j) {
        if (mask[i * l + j] == T(0)) continue;
        T r = x[i * l + j] - target[i * l + j];
        T d = std::abs(r) <= beta ? r : (r > T(0) ? beta : -beta);
        gx[i * l + j] += w * d;
      }
    }
  };
  return id;
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

template <typename T>
int dropout(Tape<T>& tp, int a, T p) {
  if (!tp.training || p <= T(0)) return a;
  detail::check(p < T(1), "dropout: p must be < 1");
  const auto& x = tp.val(a);
  Tensor<T> keep(x.shape());
  T inv = T(1) / (T(1) - p);
  for (int64_t i = 0; i < x.numel(); ++i)
    keep[i] = tp.rng.uniform() < static_cast<double>(p) ? T(0) : inv;
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * keep[i];
  int id = tp.add_node(std::move(out), tp.ng(a));
  tp.node(id).back = [&tp, id, a, keep = std::move(keep)] {
    if (!tp.ng(a)) return;
    const auto& go = tp.grad(id);
    auto& ga = tp.g(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * keep[i];
  };
  return id;
}

// ---------------------------------------------------------------------------
// convolutions (zero padding, stride >= 1)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void im2col(const T* x, int64_t cin, int64_t l, int64_t k, int64_t stride,
            int64_t pad, int64_t lout, T* cols) {
  for (int64_t ci = 0; ci < cin; ++ci)
    for (int64_t kk = 0; kk < k; ++kk) {
      T* dst = cols + (ci * k + kk) * lout;
      const T* src = x + ci * l;
      for (int64_t j = 0; j < lout; ++j) {
        int64_t t = j * stride - pad + kk;
        dst[j] = (t >= 0 && t < l) ? src[t] : T(0);
      }
    }
}

template <typename T>
void col2im_add(const T* cols, int64_t cin, int64_t l, int64_t k,
                int64_t stride, int64_t pad, int64_t lout, T* x) {
  for (int64_t ci = 0; ci < cin; ++ci)
    for (int64_t kk = 0; kk < k; ++kk) {
      const T* src = cols + (ci * k + kk) * lout;
      T* dst = x + ci * l;
      for (int64_t j = 0; j < lout; ++j) {
        int64_t t = j * stride - pad + kk;
        if (t >= 0 && t < l) dst[t] += src[j];
      }
    }
}
}  // namespace detail

// x (B, Cin, L), w (Cout, Cin, K) -> (B, Cout, Lout)
template <typename T>
int conv1d(Tape<T>& tp, int x, int w, int64_t stride, int64_t pad) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  detail::check(xv.ndim() == 3 && wv.ndim() == 3 && xv.dim(1) == wv.dim(1),
                "conv1d: shape mismatch");
  int64_t b = xv.dim(0), cin = xv.dim(1), l = xv.dim(2);
  int64_t cout = wv.dim(0), k = wv.dim(2);
  int64_t lout = (l + 2 * pad - k) / stride + 1;
  detail::check(lout >= 1, "conv1d: output is empty");
  Tensor<T> out({b, cout, lout});
  Tensor<T> cols({cin * k, lout});
  for (int64_t bi = 0; bi < b; ++bi) {
    detail::im2col(xv.data() + bi * cin * l, cin, l, k, stride, pad, lout,
                   cols.data());
    gemm_ptr(wv.data(), cout, cin * k, false, cols.data(), cin * k, lout,
             false, out.data() + bi * cout * lout, false);
  }
  int id = tp.add_node(std::move(out), tp.ng(x) || tp.ng(w));
  tp.node(id).back = [&tp, id, x, w, stride, pad, b, cin, l, cout, k, lout] {
    const auto& go = tp.grad(id);
    const auto& xv = tp.val(x);
    const auto& wv = tp.val(w);
    Tensor<T> cols({cin * k, lout});
    for (int64_t bi = 0; bi < b; ++bi) {
      const T* gb = go.data() + bi * cout * lout;
      if (tp.ng(w)) {
        detail::im2col(xv.data() + bi * cin * l, cin, l, k, stride, pad, lout,
                       cols.data());
        gemm_ptr(gb, cout, lout, false, cols.data(), cin * k, lout, true,
                 tp.g(w).data(), true);
      }
      if (tp.ng(x)) {
        gemm_ptr(wv.data(), cout, cin * k, true, gb, cout, lout, false,
                 cols.data(), false);
        detail::col2im_add(cols.data(), cin, l, k, stride, pad, lout,
                           tp.g(x).data() + bi * cin * l);
      }
    }
  };
  return id;
}

// x (B, Cin, L), w (Cin, Cout, K) -> (B, Cout, Lout),
// Lout = (L-1)*stride - 2*pad + K + out_pad.
template <typename T>
int conv_transpose1d(Tape<T>& tp, int x, int w, int64_t stride, int64_t pad,
                     int64_t out_pad) {
  const auto& xv = tp.val(x);
  const auto& wv = tp.val(w);
  detail::check(xv.ndim() == 3 && wv.ndim() == 3 && xv.dim(1) == wv.dim(0),
                "conv_transpose1d: shape mismatch");
  detail::check(out_pad < stride, "conv_transpose1d: out_pad must be < stride");
  int64_t b = xv.dim(0), cin = xv.dim(1), l = xv.dim(2);
  int64_t cout = wv.dim(1), k = wv.dim(2);
  int64_t lout = (l - 1) * stride - 2 * pad + k + out_pad;
  detail::check(lout >= 1, "conv_transpose1d: output is empty");
  Tensor<T> out({b, cout, lout});
  Tensor<T> cols({cout * k, l});
  for (int64_t bi = 0; bi < b; ++bi) {
    // cols = W^T (CoutK, Cin) * x_b (Cin, L)
    gemm_ptr(wv.data(), cin, cout * k, true, xv.data() + bi * cin * l, cin, l,
             false, cols.data(), false);
    detail::col2im_add(cols.data(), cout, lout, k, stride, pad, l,
                       out.data() + bi * cout * lout);
  }
  int id = tp.add_node(std::move(out), tp.ng(x) || tp.ng(w));
  tp.node(id).back = [&tp, id, x, w, stride, pad, b, cin, l, cout, k, lout] {
    const auto& go = tp.grad(id);
    const auto& xv = tp.val(x);
    const auto& wv = tp.val(w);
    Tensor<T> gcols({cout * k, l});
    for (int64_t bi = 0; bi < b; ++bi) {
      detail::im2col(go.data() + bi * cout * lout, cout, lout, k, stride, pad,
                     l, gcols.data());
      if (tp.ng(x))
        gemm_ptr(wv.data(), cin, cout * k, false, gcols.data(), cout * k, l,
                 false, tp.g(x).data() + bi * cin * l, true);
      if (tp.ng(w))
        gemm_ptr(xv.data() + bi * cin * l, cin, l, false, gcols.data(),
                 cout * k, l, true, tp.g(w).data(), true);
    }
  };
  return id;
}

// Per-channel bias over (B, C, L); shares the math with add_channel but kept
// for call-site clarity.
template <typename T>
int add_channel_bias(Tape<T>& tp, int x, int bias) {
  return add_channel(tp, x, bias);
}

}  // namespace ecglang::ad
