#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "ecglang/common.hpp"
#include "ecglang/nn.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::optim {

using ecglang::Tensor;
using nn::Graph;
using nn::ParamStore;

// Trainable parameters of one or more stores paired with their gradients
// from a finished backward pass. Parameters absent from the graph are
// skipped, so partial models (frozen towers, adapters) just work.
template <typename T>
struct GradSet {
  std::vector<std::pair<typename ParamStore<T>::Entry*, Tensor<T>*>> items;

  static GradSet collect(Graph<T>& g, std::vector<ParamStore<T>*> stores) {
    GradSet gs;
    for (ParamStore<T>* s : stores)
      for (auto& e : s->entries()) {
        if (!e.trainable) continue;
        Tensor<T>* grad = g.grad_mut(*s, e.name);
        if (grad) gs.items.push_back({&e, grad});
      }
    return gs;
  }

  bool all_finite() const {
    for (const auto& [e, grad] : items)
      if (!grad->all_finite()) return false;
    return true;
  }

  double global_norm() const {
    double acc = 0;
    for (const auto& [e, grad] : items)
      for (int64_t i = 0; i < grad->numel(); ++i) {
        double v = static_cast<double>((*grad)[i]);
        acc += v * v;
      }
    return std::sqrt(acc);
  }

  // Scales every gradient so the global L2 norm is at most max_norm.
  // Returns the pre-clip norm.
  double clip_global_norm(double max_norm) {
    double norm = global_norm();
    if (norm > max_norm && norm > 0) {
      T scale = static_cast<T>(max_norm / norm);
      for (auto& [e, grad] : items)
        for (int64_t i = 0; i < grad->numel(); ++i) (*grad)[i] *= scale;
    }
    return norm;
  }
};

// AdamW with decoupled weight decay:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps);  p <- p - lr * wd * p
template <typename T>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Hyper h) : h_(h) {}

  void step(double lr, GradSet<T>& gs) {
    ++t_;
    double bc1 = 1.0 - std::pow(h_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(h_.beta2, static_cast<double>(t_));
    for (auto& [e, grad] : gs.items) {
      State& st = state_[e->name];
      if (!st.m.defined()) {
        st.m = Tensor<T>::zeros(e->value.shape());
        st.v = Tensor<T>::zeros(e->value.shape());
      }
      Tensor<T>& p = e->value;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double g = static_cast<double>((*grad)[i]);
        double m = h_.beta1 * st.m[i] + (1.0 - h_.beta1) * g;
        double v = h_.beta2 * st.v[i] + (1.0 - h_.beta2) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        double update = lr * (m / bc1) / (std::sqrt(v / bc2) + h_.eps);
        double pv = static_cast<double>(p[i]) - update;
        pv -= lr * h_.weight_decay * pv;
        p[i] = static_cast<T>(pv);
      }
    }
  }

  int64_t steps() const { return t_; }
  const Hyper& hyper() const { return h_; }

 private:
  struct State {
    Tensor<T> m, v;
  };
  Hyper h_;
  int64_t t_ = 0;
  std::unordered_map<std::string, State> state_;
};

// Linear warmup to peak over warmup_fraction of the run, then cosine decay
// to zero. step counts from 0; step == total gives 0.
inline double cosine_warmup_lr(int64_t step, int64_t total_steps, double peak,
                               double warmup_fraction) {
  if (total_steps <= 0) throw ConfigError("schedule: total_steps must be > 0");
  if (warmup_fraction < 0 || warmup_fraction > 1)
    throw ConfigError("schedule: warmup_fraction must be in [0, 1]");
  double w = warmup_fraction * static_cast<double>(total_steps);
  double s = static_cast<double>(step);
  if (s < w) return peak * s / w;
  double rest = static_cast<double>(total_steps) - w;
  if (rest <= 0) return peak;
  double progress = (s - w) / rest;
  progress = std::min(1.0, std::max(0.0, progress));
  return peak * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// Stop once the monitored value fails to improve for `patience` checks.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience, double min_delta = 0.0)
      : patience_(patience), min_delta_(min_delta) {}

  // Returns true when training should stop after this check.
  bool update(double value) {
    if (value < best_ - min_delta_) {
      best_ = value;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_;
  }

  double best() const { return best_; }
  int bad_checks() const { return bad_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// Shared hyperparameters for the three training loops. Stage presets differ
// only in max_epochs and weight_decay.
struct TrainHyper {
  int max_epochs = 100;
  int batch_size = 64;
  double peak_lr = 1e-4;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  int patience = 10;
  double clip_norm = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("hyper: max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("hyper: batch_size must be >= 1");
    if (peak_lr < 0) throw ConfigError("hyper: peak_lr must be >= 0");
    if (weight_decay < 0)
      throw ConfigError("hyper: weight_decay must be >= 0");
    if (warmup_fraction < 0 || warmup_fraction >= 1)
      throw ConfigError("hyper: warmup_fraction must be in [0, 1)");
    if (patience < 1) throw ConfigError("hyper: patience must be >= 1");
    if (clip_norm <= 0) throw ConfigError("hyper: clip_norm must be > 0");
  }
};

inline TrainHyper ae_hyper() {
  TrainHyper h;
  h.max_epochs = 30;
  h.weight_decay = 1e-4;
  return h;
}

inline TrainHyper mlm_hyper() {
  TrainHyper h;
  h.max_epochs = 100;
  h.weight_decay = 3e-4;
  return h;
}

inline TrainHyper finetune_hyper() {
  TrainHyper h;
  h.max_epochs = 100;
  h.weight_decay = 1e-4;
  return h;
}

// One row of training history, serialized to CSV as
// epoch,train_loss,val_metric,lr.
struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_metric = 0;
  double lr = 0;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,val_metric,lr\n";
  for (const auto& e : history)
    out += str_format("%d,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss,
                      e.val_metric, e.lr);
  return out;
}

// Deep copy of parameter values, for best-epoch snapshots.
template <typename T>
inline std::vector<Tensor<T>> snapshot_params(const ParamStore<T>& store) {
  std::vector<Tensor<T>> out;
  out.reserve(store.size());
  for (const auto& e : store.entries()) out.push_back(e.value.clone());
  return out;
}

template <typename T>
inline void restore_params(ParamStore<T>& store,
                           const std::vector<Tensor<T>>& snap) {
  if (snap.size() != store.size())
    throw ConfigError("restore_params: snapshot size mismatch");
  size_t i = 0;
  for (auto& e : store.entries()) {
    Tensor<T>& dst = e.value;
    const Tensor<T>& src = snap[i++];
    for (int64_t j = 0; j < dst.numel(); ++j) dst[j] = src[j];
  }
}

}  // namespace ecglang::optim
