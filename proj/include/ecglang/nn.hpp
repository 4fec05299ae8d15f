#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ecglang/autodiff.hpp"
#include "ecglang/common.hpp"
#include "ecglang/rng.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::nn {

using ecglang::Tensor;

// Named parameter container with stable insertion order. Non-trainable
// entries hold state like batch norm running statistics.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> value,
                 bool trainable = true) {
    if (index_.count(name))
      throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(value), trainable});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// One forward/backward pass: a tape plus lazily created leaves for the
// parameters it touches. Parameters from any number of stores may join.
template <typename T>
class Graph {
 public:
  ad::Tape<T> tape;

  explicit Graph(bool training = false, uint64_t dropout_seed = 0) {
    tape.training = training;
    tape.rng = Rng(dropout_seed);
  }

  int p(ParamStore<T>& store, const std::string& name) {
    auto key = std::pair<void*, std::string>(&store, name);
    auto it = pids_.find(key);
    if (it != pids_.end()) return it->second;
    auto& e = store.entry(name);
    int id = tape.leaf(e.value, e.trainable);
    pids_[key] = id;
    return id;
  }

  int c(Tensor<T> t) { return tape.constant(std::move(t)); }

  const Tensor<T>& val(int id) const { return tape.val(id); }

  void backward(int root) { tape.backward(root); }

  // Gradient of a parameter after backward; null when the parameter never
  // entered the graph or received no gradient.
  const Tensor<T>* grad_of(ParamStore<T>& store, const std::string& name) {
    return grad_mut(store, name);
  }

  Tensor<T>* grad_mut(ParamStore<T>& store, const std::string& name) {
    auto it = pids_.find(std::pair<void*, std::string>(&store, name));
    if (it == pids_.end()) return nullptr;
    auto& n = tape.node(it->second);
    return n.grad.defined() ? &n.grad : nullptr;
  }

 private:
  struct KeyHash {
    size_t operator()(const std::pair<void*, std::string>& k) const {
      return std::hash<void*>()(k.first) ^
             (std::hash<std::string>()(k.second) << 1);
    }
  };
  std::unordered_map<std::pair<void*, std::string>, int, KeyHash> pids_;
};

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> uniform_init(const Shape& shape, T lo, T hi, Rng& rng) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Tensor<T> normal_init(const Shape& shape, T mean, T std, Rng& rng) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal(mean, std));
  return t;
}

// bound = 1/sqrt(fan_in); the usual default for linear and conv weights.
template <typename T>
Tensor<T> fan_in_init(const Shape& shape, int64_t fan_in, Rng& rng) {
  T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
  return uniform_init<T>(shape, -bound, bound, rng);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  ParamStore<T>* store = nullptr;
  std::string w_name, b_name;
  int64_t in = 0, out = 0;
  bool bias = true;

  Linear() = default;
  Linear(ParamStore<T>& s, const std::string& prefix, int64_t in_dim,
         int64_t out_dim, bool with_bias, Rng& rng)
      : store(&s),
        w_name(prefix + ".weight"),
        b_name(prefix + ".bias"),
        in(in_dim),
        out(out_dim),
        bias(with_bias) {
    s.add(w_name, fan_in_init<T>({out_dim, in_dim}, in_dim, rng));
    if (with_bias) s.add(b_name, fan_in_init<T>({out_dim}, in_dim, rng));
  }

  int forward(Graph<T>& g, int x) const {
    int w = g.p(*store, w_name);
    int b = bias ? g.p(*store, b_name) : -1;
    return ad::linear(g.tape, x, w, b);
  }
};

template <typename T>
struct Conv1d {
  ParamStore<T>* store = nullptr;
  std::string w_name, b_name;
  int64_t cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  bool bias = true;

  Conv1d() = default;
  Conv1d(ParamStore<T>& s, const std::string& prefix, int64_t cin_, int64_t cout_,
         int64_t k_, int64_t stride_, int64_t pad_, bool with_bias, Rng& rng)
      : store(&s),
        w_name(prefix + ".weight"),
        b_name(prefix + ".bias"),
        cin(cin_),
        cout(cout_),
        k(k_),
        stride(stride_),
        pad(pad_),
        bias(with_bias) {
    s.add(w_name, fan_in_init<T>({cout_, cin_, k_}, cin_ * k_, rng));
    if (with_bias) s.add(b_name, fan_in_init<T>({cout_}, cin_ * k_, rng));
  }

  int forward(Graph<T>& g, int x) const {
    int y = ad::conv1d(g.tape, x, g.p(*store, w_name), stride, pad);
    if (bias) y = ad::add_channel(g.tape, y, g.p(*store, b_name));
    return y;
  }

  int64_t out_len(int64_t l) const { return (l + 2 * pad - k) / stride + 1; }
};

template <typename T>
struct ConvT1d {
  ParamStore<T>* store = nullptr;
  std::string w_name, b_name;
  int64_t cin = 0, cout = 0, k = 1, stride = 1, pad = 0, out_pad = 0;
  bool bias = true;

  ConvT1d() = default;
  ConvT1d(ParamStore<T>& s, const std::string& prefix, int64_t cin_,
          int64_t cout_, int64_t k_, int64_t stride_, int64_t pad_,
          int64_t out_pad_, bool with_bias, Rng& rng)
      : store(&s),
        w_name(prefix + ".weight"),
        b_name(prefix + ".bias"),
        cin(cin_),
        cout(cout_),
        k(k_),
        stride(stride_),
        pad(pad_),
        out_pad(out_pad_),
        bias(with_bias) {
    s.add(w_name, fan_in_init<T>({cin_, cout_, k_}, cin_ * k_, rng));
    if (with_bias) s.add(b_name, fan_in_init<T>({cout_}, cin_ * k_, rng));
  }

  int forward(Graph<T>& g, int x) const {
    int y = ad::conv_transpose1d(g.tape, x, g.p(*store, w_name), stride, pad,
                                 out_pad);
    if (bias) y = ad::add_channel(g.tape, y, g.p(*store, b_name));
    return y;
  }

  int64_t out_len(int64_t l) const {
    return (l - 1) * stride - 2 * pad + k + out_pad;
  }
};

// Batch norm over (B, C, L) with statistics restricted to valid positions,
// so right padding never contaminates the batch moments. Running stats are
// non-trainable store entries updated in place during training.
template <typename T>
struct BatchNorm1d {
  ParamStore<T>* store = nullptr;
  std::string prefix;
  int64_t c = 0;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);

  BatchNorm1d() = default;
  BatchNorm1d(ParamStore<T>& s, const std::string& prefix_, int64_t c_)
      : store(&s), prefix(prefix_), c(c_) {
    s.add(prefix + ".weight", Tensor<T>::full({c_}, T(1)));
    s.add(prefix + ".bias", Tensor<T>::zeros({c_}));
    s.add(prefix + ".running_mean", Tensor<T>::zeros({c_}), false);
    s.add(prefix + ".running_var", Tensor<T>::full({c_}, T(1)), false);
  }

  // mask is (B, L) with 1 at valid positions; pass an all-ones mask for
  // fixed-length input.
  int forward(Graph<T>& g, int x, const Tensor<T>& mask) const {
    int gamma = g.p(*store, prefix + ".weight");
    int beta = g.p(*store, prefix + ".bias");
    if (g.tape.training) {
      int mean = ad::masked_channel_mean(g.tape, x, mask);
      int xc = ad::sub_channel(g.tape, x, mean);
      int sq = ad::mul(g.tape, xc, xc);
      int var = ad::masked_channel_mean(g.tape, sq, mask);
      int inv = ad::rsqrt_eps(g.tape, var, eps);
      int xn = ad::mul_channel(g.tape, xc, inv);
      update_running(g.val(mean), g.val(var), mask);
      int y = ad::mul_channel(g.tape, xn, gamma);
      return ad::add_channel(g.tape, y, beta);
    }
    const Tensor<T>& rm = store->at(prefix + ".running_mean");
    const Tensor<T>& rv = store->at(prefix + ".running_var");
    Tensor<T> inv({c});
    for (int64_t i = 0; i < c; ++i)
      inv[i] = T(1) / std::sqrt(rv[i] + eps);
    int xc = ad::sub_channel(g.tape, x, g.c(rm.clone()));
    int xn = ad::mul_channel(g.tape, xc, g.c(std::move(inv)));
    int y = ad::mul_channel(g.tape, xn, gamma);
    return ad::add_channel(g.tape, y, beta);
  }

 private:
  void update_running(const Tensor<T>& mean, const Tensor<T>& var,
                      const Tensor<T>& mask) const {
    double cnt = 0;
    for (int64_t i = 0; i < mask.numel(); ++i) cnt += mask[i];
    double bessel = cnt > 1 ? cnt / (cnt - 1) : 1.0;
    Tensor<T>& rm = store->at(prefix + ".running_mean");
    Tensor<T>& rv = store->at(prefix + ".running_var");
    for (int64_t i = 0; i < c; ++i) {
      rm[i] = (T(1) - momentum) * rm[i] + momentum * mean[i];
      rv[i] = (T(1) - momentum) * rv[i] +
              momentum * static_cast<T>(var[i] * bessel);
    }
  }
};

// Layer norm over the last dimension of (R, D) input.
template <typename T>
struct LayerNorm {
  ParamStore<T>* store = nullptr;
  std::string prefix;
  int64_t d = 0;
  T eps = static_cast<T>(1e-5);

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& s, const std::string& prefix_, int64_t d_)
      : store(&s), prefix(prefix_), d(d_) {
    s.add(prefix + ".weight", Tensor<T>::full({d_}, T(1)));
    s.add(prefix + ".bias", Tensor<T>::zeros({d_}));
  }

  int forward(Graph<T>& g, int x) const {
    int mean = ad::row_mean(g.tape, x);
    int xc = ad::sub_rowvec(g.tape, x, mean);
    int sq = ad::mul(g.tape, xc, xc);
    int var = ad::row_mean(g.tape, sq);
    int inv = ad::rsqrt_eps(g.tape, var, eps);
    int xn = ad::mul_rowvec(g.tape, xc, inv);
    return ad::affine_cols(g.tape, xn, g.p(*store, prefix + ".weight"),
                           g.p(*store, prefix + ".bias"));
  }
};

template <typename T>
struct Embedding {
  ParamStore<T>* store = nullptr;
  std::string w_name;
  int64_t v = 0, d = 0;

  Embedding() = default;
  Embedding(ParamStore<T>& s, const std::string& prefix, int64_t v_, int64_t d_,
            Rng& rng)
      : store(&s), w_name(prefix + ".weight"), v(v_), d(d_) {
    s.add(w_name, normal_init<T>({v_, d_}, T(0), static_cast<T>(0.02), rng));
  }

  int forward(Graph<T>& g, std::vector<int32_t> ids) const {
    return ad::embedding(g.tape, g.p(*store, w_name), std::move(ids));
  }
};

}  // namespace ecglang::nn
