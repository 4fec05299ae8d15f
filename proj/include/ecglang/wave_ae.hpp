#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecglang/autodiff.hpp"
#include "ecglang/checkpoint.hpp"
#include "ecglang/common.hpp"
#include "ecglang/nn.hpp"
#include "ecglang/optim.hpp"
#include "ecglang/record.hpp"
#include "ecglang/rng.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::wave_ae {

struct AeConfig {
  WaveType wave_type = WaveType::P;
  int64_t latent_dim = 12;
  std::array<int64_t, 4> channels{32, 64, 128, 256};
  int64_t kernel = 7;
  int64_t stride = 2;
  int64_t pad = 3;
  int64_t max_segment_len = 100;
  double huber_beta = 1.0;

  int64_t conv_out_len(int64_t l) const {
    return (l + 2 * pad - kernel) / stride + 1;
  }
  // temporal length entering the decoder stack; 2^4 total downsampling
  int64_t seed_len() const {
    int64_t l = max_segment_len;
    for (int b = 0; b < 4; ++b) l = conv_out_len(l);
    return l;
  }
  int64_t decoded_len() const { return seed_len() * 16; }

  void validate() const {
    if (latent_dim < 1) throw ConfigError("ae: latent_dim must be >= 1");
    for (int64_t c : channels)
      if (c < 1) throw ConfigError("ae: channels must be >= 1");
    if (kernel < 1 || stride != 2 || pad < 0 || pad >= kernel)
      throw ConfigError("ae: need kernel >= 1, stride 2, 0 <= pad < kernel");
    if (max_segment_len < 16)
      throw ConfigError("ae: max_segment_len must be >= 16");
    if (huber_beta <= 0) throw ConfigError("ae: huber_beta must be > 0");
    if (decoded_len() < max_segment_len)
      throw ConfigError("ae: decoder cannot cover max_segment_len");
  }

  nlohmann::json to_json() const {
    return {{"wave_type", wave_name(wave_type)},
            {"latent_dim", latent_dim},
            {"channels", channels},
            {"kernel", kernel},
            {"stride", stride},
            {"pad", pad},
            {"max_segment_len", max_segment_len},
            {"huber_beta", huber_beta}};
  }
  static AeConfig from_json(const nlohmann::json& j) {
    AeConfig c;
    try {
      c.wave_type = wave_from_name(j.at("wave_type").get<std::string>());
      c.latent_dim = j.at("latent_dim").get<int64_t>();
      auto ch = j.at("channels").get<std::vector<int64_t>>();
      if (ch.size() != 4) throw DataError("ae config: need 4 channel counts");
      std::copy(ch.begin(), ch.end(), c.channels.begin());
      c.kernel = j.at("kernel").get<int64_t>();
      c.stride = j.at("stride").get<int64_t>();
      c.pad = j.at("pad").get<int64_t>();
      c.max_segment_len = j.at("max_segment_len").get<int64_t>();
      c.huber_beta = j.at("huber_beta").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed ae config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// P and T waves use 12 latent dims, QRS 24; segment caps are 200 ms for
// P/QRS and 400 ms for T at the record's sampling rate.
inline AeConfig default_ae_config(WaveType t, double fs) {
  AeConfig c;
  c.wave_type = t;
  c.latent_dim = t == WaveType::QRS ? 24 : 12;
  double max_s = t == WaveType::T ? 0.4 : 0.2;
  c.max_segment_len = std::llround(max_s * fs);
  c.validate();
  return c;
}

// Pointwise Huber (Smooth L1): r^2/2 inside beta, linear outside.
inline double huber(double r, double beta) {
  double a = std::abs(r);
  return a <= beta ? 0.5 * r * r : beta * (a - 0.5 * beta);
}

// Mean Huber loss over one segment.
inline double huber_loss(const std::vector<float>& x,
                         const std::vector<float>& x_hat, double beta) {
  if (x.size() != x_hat.size())
    throw DataError("huber_loss: length mismatch");
  if (x.empty()) throw DataError("huber_loss: empty input");
  if (beta <= 0) throw ConfigError("huber_loss: beta must be > 0");
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i)
    acc += huber(double(x[i]) - double(x_hat[i]), beta);
  return acc / static_cast<double>(x.size());
}

template <typename T = float>
struct WaveAe {
  AeConfig cfg;
  nn::ParamStore<T> params;
  std::array<nn::Conv1d<T>, 4> enc_conv;
  std::array<nn::BatchNorm1d<T>, 4> enc_bn;
  nn::Linear<T> enc_fc;
  nn::Linear<T> dec_fc;
  std::array<nn::ConvT1d<T>, 4> dec_tconv;
  std::array<nn::BatchNorm1d<T>, 4> dec_bn;
  nn::Conv1d<T> dec_out;

  WaveAe(AeConfig config, uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    int64_t cin = 1;
    for (int b = 0; b < 4; ++b) {
      enc_conv[b] =
          nn::Conv1d<T>(params, str_format("enc.conv%d", b), cin,
                        cfg.channels[b], cfg.kernel, cfg.stride, cfg.pad,
                        false, rng);
      enc_bn[b] =
          nn::BatchNorm1d<T>(params, str_format("enc.bn%d", b), cfg.channels[b]);
      cin = cfg.channels[b];
    }
    enc_fc = nn::Linear<T>(params, "enc.fc", 2 * cfg.channels[3],
                           cfg.latent_dim, true, rng);
    dec_fc = nn::Linear<T>(params, "dec.fc", cfg.latent_dim,
                           cfg.channels[3] * cfg.seed_len(), true, rng);
    const std::array<int64_t, 4> dch{cfg.channels[2], cfg.channels[1],
                                     cfg.channels[0], cfg.channels[0]};
    cin = cfg.channels[3];
    for (int b = 0; b < 4; ++b) {
      dec_tconv[b] =
          nn::ConvT1d<T>(params, str_format("dec.tconv%d", b), cin, dch[b],
                         cfg.kernel, cfg.stride, cfg.pad, 1, false, rng);
      dec_bn[b] = nn::BatchNorm1d<T>(params, str_format("dec.bn%d", b), dch[b]);
      cin = dch[b];
    }
    dec_out = nn::Conv1d<T>(params, "dec.out", cfg.channels[0], 1, 1, 1, 0,
                            true, rng);
  }

  explicit WaveAe(const ckpt::Checkpoint& c)
      : WaveAe(AeConfig::from_json(c.config), 0) {
    ckpt::load_into(c, params);
  }

  // layer objects point into `params`; the model must stay where it was built
  WaveAe(const WaveAe&) = delete;
  WaveAe& operator=(const WaveAe&) = delete;

  static Tensor<T> time_mask(const std::vector<int64_t>& lens, int64_t l) {
    Tensor<T> m = Tensor<T>::zeros({static_cast<int64_t>(lens.size()), l});
    for (size_t i = 0; i < lens.size(); ++i)
      for (int64_t t = 0; t < std::min(lens[i], l); ++t)
        m[static_cast<int64_t>(i) * l + t] = T(1);
    return m;
  }

  // x: (B, 1, L) right-padded; lens: valid samples per row. Returns the
  // (B, latent_dim) node. Padded positions are re-zeroed after every block
  // so batch composition never changes a row's latent.
  int encode_graph(nn::Graph<T>& g, int x, std::vector<int64_t> lens,
                   int64_t l) const {
    int h = x;
    for (int b = 0; b < 4; ++b) {
      h = enc_conv[b].forward(g, h);
      l = cfg.conv_out_len(l);
      for (auto& v : lens) v = cfg.conv_out_len(v);
      Tensor<T> mask = time_mask(lens, l);
      h = ad::mul_time_mask(g.tape, h, mask.clone());
      h = enc_bn[b].forward(g, h, mask);
      h = ad::gelu(g.tape, h);
      h = ad::mul_time_mask(g.tape, h, std::move(mask));
    }
    int avg = ad::masked_avg_time(g.tape, h, lens);
    int mx = ad::masked_max_time(g.tape, h, std::move(lens));
    int pooled = ad::concat_cols(g.tape, avg, mx);
    return enc_fc.forward(g, pooled);
  }

  // z: (B, latent_dim) node. Returns (B, 1, out_len).
  int decode_graph(nn::Graph<T>& g, int z, int64_t out_len) const {
    if (out_len < 1 || out_len > cfg.max_segment_len)
      throw DataError(str_format(
          "decode: target length %lld exceeds max segment length %lld",
          static_cast<long long>(out_len),
          static_cast<long long>(cfg.max_segment_len)));
    int64_t b = g.val(z).dim(0);
    int h = dec_fc.forward(g, z);
    int64_t l = cfg.seed_len();
    h = ad::reshape(g.tape, h, {b, cfg.channels[3], l});
    for (int blk = 0; blk < 4; ++blk) {
      h = dec_tconv[blk].forward(g, h);
      l = dec_tconv[blk].out_len(l);
      h = dec_bn[blk].forward(g, h, Tensor<T>::full({b, l}, T(1)));
      h = ad::gelu(g.tape, h);
    }
    h = dec_out.forward(g, h);
    return ad::crop_time(g.tape, h, out_len);
  }

  // Batch reconstruction loss: per-segment masked Huber mean, averaged over
  // segments.
  int loss_graph(nn::Graph<T>& g, const std::vector<const WaveSegment*>& batch)
      const {
    int64_t b = static_cast<int64_t>(batch.size());
    int64_t l = 0;
    std::vector<int64_t> lens(b);
    for (int64_t i = 0; i < b; ++i) {
      lens[i] = static_cast<int64_t>(batch[i]->samples.size());
      l = std::max(l, lens[i]);
    }
    Tensor<T> x = Tensor<T>::zeros({b, 1, l});
    Tensor<T> target = Tensor<T>::zeros({b, l});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t t = 0; t < lens[i]; ++t) {
        x[i * l + t] = static_cast<T>(batch[i]->samples[t]);
        target[i * l + t] = static_cast<T>(batch[i]->samples[t]);
      }
    int xin = g.c(std::move(x));
    int z = encode_graph(g, xin, lens, l);
    int y = decode_graph(g, z, l);
    int y2 = ad::reshape(g.tape, y, {b, l});
    return ad::huber_loss_masked(g.tape, y2, std::move(target),
                                 time_mask(lens, l),
                                 static_cast<T>(cfg.huber_beta));
  }

  void check_segment(const WaveSegment& seg) const {
    if (seg.wave_type != cfg.wave_type)
      throw DataError(str_format("segment wave type %s does not match %s",
                                 wave_name(seg.wave_type),
                                 wave_name(cfg.wave_type)));
    if (seg.samples.empty()) throw DataError("empty segment");
    if (static_cast<int64_t>(seg.samples.size()) > cfg.max_segment_len)
      throw DataError(str_format(
          "segment of %zu samples exceeds max segment length %lld",
          seg.samples.size(), static_cast<long long>(cfg.max_segment_len)));
  }
};

// Deterministic batch encoding in eval mode: batch norm uses running stats,
// so results are independent of batch composition. Rows follow input order.
template <typename T>
inline Tensor<float> encode_segments(const WaveAe<T>& model,
                                     const std::vector<WaveSegment>& segments,
                                     int64_t batch_size = 64) {
  for (const auto& s : segments) model.check_segment(s);
  int64_t n = static_cast<int64_t>(segments.size());
  Tensor<float> out({n, model.cfg.latent_dim});
  int64_t n_batches = (n + batch_size - 1) / batch_size;
  parallel_for(n_batches, [&](int64_t bi) {
    int64_t lo = bi * batch_size, hi = std::min(n, lo + batch_size);
    int64_t b = hi - lo, l = 0;
    std::vector<int64_t> lens(b);
    for (int64_t i = 0; i < b; ++i) {
      lens[i] = static_cast<int64_t>(segments[lo + i].samples.size());
      l = std::max(l, lens[i]);
    }
    Tensor<T> x = Tensor<T>::zeros({b, 1, l});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t t = 0; t < lens[i]; ++t)
        x[i * l + t] = static_cast<T>(segments[lo + i].samples[t]);
    nn::Graph<T> g(false);
    int z = model.encode_graph(g, g.c(std::move(x)), lens, l);
    const Tensor<T>& zv = g.val(z);
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < model.cfg.latent_dim; ++j)
        out.data()[(lo + i) * model.cfg.latent_dim + j] =
            static_cast<float>(zv[i * model.cfg.latent_dim + j]);
  });
  if (!out.all_finite()) throw NumericError("encode: non-finite latent");
  return out;
}

template <typename T>
inline std::vector<float> decode_latent(const WaveAe<T>& model,
                                        const std::vector<float>& z,
                                        int64_t target_len) {
  if (static_cast<int64_t>(z.size()) != model.cfg.latent_dim)
    throw DataError("decode: latent length mismatch");
  nn::Graph<T> g(false);
  Tensor<T> zt({1, model.cfg.latent_dim});
  for (int64_t i = 0; i < model.cfg.latent_dim; ++i)
    zt[i] = static_cast<T>(z[i]);
  int y = model.decode_graph(g, g.c(std::move(zt)), target_len);
  const Tensor<T>& yv = g.val(y);
  std::vector<float> out(target_len);
  for (int64_t t = 0; t < target_len; ++t)
    out[t] = static_cast<float>(yv[t]);
  return out;
}

struct AeTrainResult {
  std::vector<optim::EpochStats> history;
  int64_t n_train = 0;
  int64_t n_val = 0;
};

// Trains in place with constant learning rate, early stopping on validation
// Huber loss, and best-epoch restoration. Validation is a 10% held-out
// shuffle split (min 1 segment); a single-segment corpus validates on the
// training segment itself.
template <typename T>
inline AeTrainResult train_ae(WaveAe<T>& model,
                              const std::vector<WaveSegment>& segments,
                              const optim::TrainHyper& hyper) {
  hyper.validate();
  if (segments.empty()) throw DataError("train_ae: no segments");
  for (const auto& s : segments) model.check_segment(s);

  Rng rng(hyper.seed);
  std::vector<int64_t> order(segments.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
  rng.shuffle(order);
  int64_t n_val = segments.size() >= 2
                      ? std::max<int64_t>(1, int64_t(segments.size()) / 10)
                      : 0;
  std::vector<int64_t> val_idx(order.begin(), order.begin() + n_val);
  std::vector<int64_t> train_idx(order.begin() + n_val, order.end());
  if (val_idx.empty()) val_idx = train_idx;

  auto epoch_loss = [&](const std::vector<int64_t>& idx, bool training,
                        optim::AdamW<T>* opt, double lr) {
    double total = 0;
    int64_t rows = 0;
    for (int64_t lo = 0; lo < int64_t(idx.size()); lo += hyper.batch_size) {
      int64_t hi = std::min<int64_t>(idx.size(), lo + hyper.batch_size);
      std::vector<const WaveSegment*> batch;
      for (int64_t i = lo; i < hi; ++i) batch.push_back(&segments[idx[i]]);
      nn::Graph<T> g(training, rng.next_u64());
      int loss = model.loss_graph(g, batch);
      double lv = static_cast<double>(g.val(loss)[0]);
      if (!std::isfinite(lv))
        throw NumericError("train_ae: loss diverged to non-finite");
      total += lv * double(hi - lo);
      rows += hi - lo;
      if (training) {
        g.backward(loss);
        auto gs = optim::GradSet<T>::collect(g, {&model.params});
        if (!gs.all_finite())
          throw NumericError("train_ae: non-finite gradient");
        gs.clip_global_norm(hyper.clip_norm);
        opt->step(lr, gs);
      }
    }
    return total / double(rows);
  };

  optim::AdamW<T> opt(typename optim::AdamW<T>::Hyper{
      0.9, 0.999, 1e-8, hyper.weight_decay});
  optim::EarlyStopper stopper(hyper.patience);
  AeTrainResult result;
  result.n_train = int64_t(train_idx.size());
  result.n_val = int64_t(val_idx.size());

  auto best = optim::snapshot_params(model.params);
  double best_val = std::numeric_limits<double>::infinity();
  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    std::vector<int64_t> shuffled = train_idx;
    rng.shuffle(shuffled);
    double train_loss = epoch_loss(shuffled, true, &opt, hyper.peak_lr);
    double val_loss = epoch_loss(val_idx, false, nullptr, 0);
    result.history.push_back(
        {epoch, train_loss, val_loss, hyper.peak_lr});
    if (val_loss < best_val) {
      best_val = val_loss;
      best = optim::snapshot_params(model.params);
    }
    if (stopper.update(val_loss)) break;
  }
  optim::restore_params(model.params, best);
  return result;
}

// CSV with one row per segment: source reference then latent components.
template <typename T>
inline std::string latents_csv(const WaveAe<T>& model,
                               const std::vector<WaveSegment>& segments) {
  Tensor<float> z = encode_segments(model, segments);
  std::string out = "record_id,beat_idx,wave_type";
  for (int64_t j = 0; j < model.cfg.latent_dim; ++j)
    out += str_format(",z%lld", static_cast<long long>(j));
  out += "\n";
  for (size_t i = 0; i < segments.size(); ++i) {
    out += segments[i].record_id;
    out += str_format(",%lld,%s", static_cast<long long>(segments[i].beat_idx),
                      wave_name(segments[i].wave_type));
    for (int64_t j = 0; j < model.cfg.latent_dim; ++j)
      out += str_format(",%.9g",
                        double(z.data()[int64_t(i) * model.cfg.latent_dim + j]));
    out += "\n";
  }
  return out;
}

template <typename T>
inline ckpt::Checkpoint to_checkpoint(const WaveAe<T>& model,
                                      const nlohmann::json& extra = {}) {
  return ckpt::make_checkpoint("wave_ae", model.cfg.to_json(), model.params,
                               extra);
}

template <typename T = float>
inline WaveAe<T> from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.kind != "wave_ae")
    throw DataError("checkpoint kind is not wave_ae: " + c.kind);
  return WaveAe<T>(c);
}

}  // namespace ecglang::wave_ae
