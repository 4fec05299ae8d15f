#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglang/autodiff.hpp"
#include "ecglang/checkpoint.hpp"
#include "ecglang/common.hpp"
#include "ecglang/nn.hpp"
#include "ecglang/record.hpp"
#include "ecglang/rng.hpp"
#include "ecglang/sentence.hpp"
#include "ecglang/tensor.hpp"
#include "ecglang/vocab.hpp"

namespace ecglang::encoder {

using json = nlohmann::json;

struct ModelConfig {
  int64_t d_model = 192;
  int64_t n_layers = 8;
  int64_t n_heads = 12;
  int64_t ffn_dim = 0;  // 0 derives 4 * d_model
  int64_t vocab_size = 0;
  int64_t max_len = 256;
  double dropout = 0.1;
  int64_t morph_feature_dim = 512;
  int64_t morph_blocks = 4;
  int64_t morph_kernel = 7;
  int64_t n_labels = 0;  // 0 builds no classifier head

  int64_t ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }
  int64_t head_dim() const { return d_model / n_heads; }
  // channels double per block and end at morph_feature_dim
  int64_t morph_base_channels() const {
    return morph_feature_dim >> (morph_blocks - 1);
  }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1)
      throw ConfigError("model: dims must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError(str_format(
          "model: d_model %lld not divisible by n_heads %lld",
          static_cast<long long>(d_model), static_cast<long long>(n_heads)));
    if (ffn() < 1) throw ConfigError("model: ffn_dim must be >= 1");
    if (vocab_size <= vocab::kFirstWaveToken)
      throw ConfigError("model: vocab_size leaves no room for wave tokens");
    if (max_len < 4) throw ConfigError("model: max_len must be >= 4");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw ConfigError("model: dropout must be in [0, 1)");
    if (morph_blocks < 1)
      throw ConfigError("model: morph_blocks must be >= 1");
    if (morph_feature_dim < 1 ||
        morph_feature_dim % (int64_t(1) << (morph_blocks - 1)) != 0)
      throw ConfigError(
          "model: morph_feature_dim must divide by 2^(morph_blocks-1)");
    if (morph_kernel < 1 || morph_kernel % 2 == 0)
      throw ConfigError("model: morph_kernel must be odd");
    if (n_labels < 0) throw ConfigError("model: n_labels must be >= 0");
  }

  json to_json() const {
    return json{{"d_model", d_model},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"ffn_dim", ffn_dim},
                {"vocab_size", vocab_size},
                {"max_len", max_len},
                {"dropout", dropout},
                {"morph_feature_dim", morph_feature_dim},
                {"morph_blocks", morph_blocks},
                {"morph_kernel", morph_kernel},
                {"n_labels", n_labels}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    try {
      c.d_model = j.at("d_model").get<int64_t>();
      c.n_layers = j.at("n_layers").get<int64_t>();
      c.n_heads = j.at("n_heads").get<int64_t>();
      c.ffn_dim = j.at("ffn_dim").get<int64_t>();
      c.vocab_size = j.at("vocab_size").get<int64_t>();
      c.max_len = j.at("max_len").get<int64_t>();
      c.dropout = j.at("dropout").get<double>();
      c.morph_feature_dim = j.at("morph_feature_dim").get<int64_t>();
      c.morph_blocks = j.at("morph_blocks").get<int64_t>();
      c.morph_kernel = j.at("morph_kernel").get<int64_t>();
      c.n_labels = j.at("n_labels").get<int64_t>();
    } catch (const json::exception& e) {
      throw DataError(str_format("model config: %s", e.what()));
    }
    c.validate();
    return c;
  }
};

struct LoraConfig {
  int64_t rank = 8;
  double alpha = 16.0;
  bool adapt_q = true;
  bool adapt_v = true;

  double scale() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank < 1) throw ConfigError("lora: rank must be >= 1");
    if (!(alpha > 0)) throw ConfigError("lora: alpha must be positive");
    if (!adapt_q && !adapt_v)
      throw ConfigError("lora: nothing selected to adapt");
  }
};

// Low-rank deltas for a set of base weights, kept in their own store so the
// base model's parameters stay untouched. "<name>.lora_a" is (r, in) and
// "<name>.lora_b" is (out, r); B starts at zero so a fresh adapter is a
// no-op.
template <typename T = float>
struct LoraAdapters {
  LoraConfig cfg;
  nn::ParamStore<T> params;
  std::vector<std::string> adapted;

  bool adapts(const std::string& w_name) const {
    return std::find(adapted.begin(), adapted.end(), w_name) != adapted.end();
  }
};

// W (out, in), A (r, in), B (out, r): the effective fine-tuned weight.
template <typename T>
Tensor<T> lora_merged(const Tensor<T>& w, const Tensor<T>& a,
                      const Tensor<T>& b, double scale) {
  if (w.ndim() != 2 || a.ndim() != 2 || b.ndim() != 2 ||
      a.dim(1) != w.dim(1) || b.dim(0) != w.dim(0) || b.dim(1) != a.dim(0))
    throw DataError("lora_merged: shape mismatch");
  int64_t out = w.dim(0), in = w.dim(1), r = a.dim(0);
  Tensor<T> m = w.clone();
  for (int64_t i = 0; i < out; ++i)
    for (int64_t j = 0; j < in; ++j) {
      double acc = 0;
      for (int64_t q = 0; q < r; ++q)
        acc += static_cast<double>(b[i * r + q]) *
               static_cast<double>(a[q * in + j]);
      m[i * in + j] += static_cast<T>(scale * acc);
    }
  return m;
}

namespace detail {

template <typename T>
Tensor<T> time_mask(const std::vector<int64_t>& lens, int64_t l) {
  Tensor<T> m(Shape{static_cast<int64_t>(lens.size()), l});
  for (size_t i = 0; i < lens.size(); ++i)
    for (int64_t t = 0; t < lens[i]; ++t) m[static_cast<int64_t>(i) * l + t] =
        T(1);
  return m;
}

}  // namespace detail

// Residual block: conv k7 (stride s) -> BN -> ReLU -> conv k7 -> BN, plus a
// projected skip when channels or stride change, summed and re-activated.
// Every stage is re-masked so right padding stays at zero.
template <typename T>
struct MorphBlock {
  nn::Conv1d<T> conv1, conv2, skip_conv;
  nn::BatchNorm1d<T> bn1, bn2, bn_skip;
  bool projected = false;

  MorphBlock() = default;
  MorphBlock(nn::ParamStore<T>& s, const std::string& prefix, int64_t cin,
             int64_t cout, int64_t k, int64_t stride, Rng& rng) {
    conv1 = nn::Conv1d<T>(s, prefix + ".conv1", cin, cout, k, stride, k / 2,
                          false, rng);
    bn1 = nn::BatchNorm1d<T>(s, prefix + ".bn1", cout);
    conv2 = nn::Conv1d<T>(s, prefix + ".conv2", cout, cout, k, 1, k / 2,
                          false, rng);
    bn2 = nn::BatchNorm1d<T>(s, prefix + ".bn2", cout);
    projected = cin != cout || stride != 1;
    if (projected) {
      skip_conv = nn::Conv1d<T>(s, prefix + ".skip", cin, cout, 1, stride, 0,
                                false, rng);
      bn_skip = nn::BatchNorm1d<T>(s, prefix + ".bn_skip", cout);
    }
  }

  // x is (B, Cin, L) masked to zero beyond each row's length
  int forward(nn::Graph<T>& g, int x, std::vector<int64_t>& lens,
              int64_t& l) const {
    int64_t l_out = conv1.out_len(l);
    std::vector<int64_t> lens_out(lens.size());
    for (size_t i = 0; i < lens.size(); ++i)
      lens_out[i] = conv1.out_len(lens[i]);
    Tensor<T> mask = detail::time_mask<T>(lens_out, l_out);

    int h = conv1.forward(g, x);
    h = ad::mul_time_mask(g.tape, h, mask.clone());
    h = bn1.forward(g, h, mask);
    h = ad::relu(g.tape, h);
    h = ad::mul_time_mask(g.tape, h, mask.clone());
    h = conv2.forward(g, h);
    h = ad::mul_time_mask(g.tape, h, mask.clone());
    h = bn2.forward(g, h, mask);
    h = ad::mul_time_mask(g.tape, h, mask.clone());

    int s = x;
    if (projected) {
      s = skip_conv.forward(g, s);
      s = ad::mul_time_mask(g.tape, s, mask.clone());
      s = bn_skip.forward(g, s, mask);
      s = ad::mul_time_mask(g.tape, s, mask.clone());
    }
    h = ad::relu(g.tape, ad::add(g.tape, h, s));
    h = ad::mul_time_mask(g.tape, h, std::move(mask));
    lens = std::move(lens_out);
    l = l_out;
    return h;
  }
};

template <typename T>
struct EncoderLayer {
  nn::Linear<T> wq, wk, wv, wo, ffn1, ffn2;
  nn::LayerNorm<T> ln1, ln2;

  EncoderLayer() = default;
  EncoderLayer(nn::ParamStore<T>& s, const std::string& prefix,
               const ModelConfig& cfg, Rng& rng) {
    wq = nn::Linear<T>(s, prefix + ".wq", cfg.d_model, cfg.d_model, true, rng);
    wk = nn::Linear<T>(s, prefix + ".wk", cfg.d_model, cfg.d_model, true, rng);
    wv = nn::Linear<T>(s, prefix + ".wv", cfg.d_model, cfg.d_model, true, rng);
    wo = nn::Linear<T>(s, prefix + ".wo", cfg.d_model, cfg.d_model, true, rng);
    ln1 = nn::LayerNorm<T>(s, prefix + ".ln1", cfg.d_model);
    ffn1 = nn::Linear<T>(s, prefix + ".ffn1", cfg.d_model, cfg.ffn(), true,
                         rng);
    ffn2 = nn::Linear<T>(s, prefix + ".ffn2", cfg.ffn(), cfg.d_model, true,
                         rng);
    ln2 = nn::LayerNorm<T>(s, prefix + ".ln2", cfg.d_model);
  }
};

// Token + position + morphology embedding, post-norm transformer stack,
// weight-tied MLM head, and a pooled multi-label classifier.
template <typename T = float>
class Encoder {
 public:
  ModelConfig cfg;
  nn::ParamStore<T> params;

  Encoder(ModelConfig config, uint64_t seed) : cfg(std::move(config)) {
    cfg.validate();
    Rng rng(seed);
    tok_emb_ = nn::Embedding<T>(params, "tok_emb", cfg.vocab_size,
                                cfg.d_model, rng);
    pos_emb_ = nn::Embedding<T>(params, "pos_emb", cfg.max_len, cfg.d_model,
                                rng);
    int64_t cin = 1;
    int64_t cout = cfg.morph_base_channels();
    for (int64_t b = 0; b < cfg.morph_blocks; ++b) {
      morph_blocks_.emplace_back(
          params, str_format("morph.block%lld", static_cast<long long>(b)),
          cin, cout, cfg.morph_kernel, b == 0 ? 1 : 2, rng);
      cin = cout;
      if (b + 1 < cfg.morph_blocks) cout *= 2;
    }
    morph_proj_ = nn::Linear<T>(params, "morph.proj", cfg.morph_feature_dim,
                                cfg.d_model, true, rng);
    for (int64_t i = 0; i < cfg.n_layers; ++i)
      layers_.emplace_back(params,
                           str_format("layer%lld", static_cast<long long>(i)),
                           cfg, rng);
    params.add("mlm.bias", Tensor<T>::zeros({cfg.vocab_size}));
    if (cfg.n_labels > 0)
      cls_ = nn::Linear<T>(params, "cls", cfg.d_model, cfg.n_labels, true,
                           rng);
  }

  explicit Encoder(const ckpt::Checkpoint& c)
      : Encoder(ModelConfig::from_json(c.config), 0) {
    ckpt::load_into(c, params);
  }

  // layer objects point into `params`; the model must stay where it was built
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  // Residual conv stack over raw segments, masked GAP to one feature row
  // per segment. Rows of the result align with `segs`.
  int morph_features(nn::Graph<T>& g,
                     const std::vector<const std::vector<float>*>& segs)
      const {
    if (segs.empty()) throw DataError("morph_features: no segments");
    int64_t max_len = 0;
    std::vector<int64_t> lens(segs.size());
    for (size_t i = 0; i < segs.size(); ++i) {
      if (segs[i]->empty())
        throw DataError("morph_features: empty segment");
      lens[i] = static_cast<int64_t>(segs[i]->size());
      max_len = std::max(max_len, lens[i]);
    }
    Tensor<T> x(Shape{static_cast<int64_t>(segs.size()), 1, max_len});
    for (size_t i = 0; i < segs.size(); ++i)
      for (int64_t t = 0; t < lens[i]; ++t)
        x[static_cast<int64_t>(i) * max_len + t] =
            static_cast<T>((*segs[i])[t]);

    int h = g.c(std::move(x));
    int64_t l = max_len;
    for (const auto& block : morph_blocks_) h = block.forward(g, h, lens, l);
    return ad::masked_avg_time(g.tape, h, lens);
  }

  // Token + position sum with morphology projected in at positions that
  // hold a wave token and carry no MLM label; masked positions must not see
  // the wave they are asked to predict. Returns (B*L, d_model).
  int embed(nn::Graph<T>& g, const Tensor<int32_t>& input_ids,
            const std::vector<sentence::MorphSlot>& slots,
            const std::vector<WaveSegment>& pool,
            const Tensor<int32_t>* mlm_labels = nullptr) const {
    if (input_ids.ndim() != 2)
      throw DataError("embed: input_ids must be (B, L)");
    int64_t b = input_ids.dim(0), l = input_ids.dim(1);
    if (l > cfg.max_len)
      throw DataError(str_format("embed: length %lld exceeds max_len %lld",
                                 static_cast<long long>(l),
                                 static_cast<long long>(cfg.max_len)));
    if (slots.size() != pool.size())
      throw DataError("embed: slots and segment pool disagree");

    std::vector<int32_t> flat_ids(input_ids.data(),
                                  input_ids.data() + b * l);
    for (int32_t id : flat_ids)
      if (id < 0 || id >= cfg.vocab_size)
        throw DataError(str_format("embed: token id %d out of range", id));
    std::vector<int32_t> pos_ids(b * l);
    for (int64_t i = 0; i < b * l; ++i)
      pos_ids[i] = static_cast<int32_t>(i % l);

    int h = ad::add(g.tape, tok_emb_.forward(g, std::move(flat_ids)),
                    pos_emb_.forward(g, std::move(pos_ids)));

    std::vector<int64_t> fuse_pos;
    std::vector<const std::vector<float>*> fuse_segs;
    for (size_t i = 0; i < slots.size(); ++i) {
      int64_t flat = slots[i].row * l + slots[i].col;
      if (slots[i].row >= b || slots[i].col >= l || slots[i].row < 0 ||
          slots[i].col < 0)
        throw DataError("embed: morphology slot out of range");
      if (mlm_labels && (*mlm_labels)[flat] >= 0) continue;
      if (input_ids[flat] < vocab::kFirstWaveToken) continue;
      fuse_pos.push_back(flat);
      fuse_segs.push_back(&pool[i].samples);
    }
    if (!fuse_pos.empty()) {
      int feats = morph_features(g, fuse_segs);
      int proj = morph_proj_.forward(g, feats);
      int grid = ad::scatter_rows(g.tape, proj, std::move(fuse_pos), b * l);
      h = ad::add(g.tape, h, grid);
    }
    return ad::dropout(g.tape, h, static_cast<T>(cfg.dropout));
  }

  // Full encode: embedding fusion plus the post-norm transformer stack,
  // (B, L) token grid to a (B*L, d_model) hidden matrix.
  int encode(nn::Graph<T>& g, const Tensor<int32_t>& input_ids,
             const Tensor<T>& attention_mask,
             const std::vector<sentence::MorphSlot>& slots,
             const std::vector<WaveSegment>& pool,
             const Tensor<int32_t>* mlm_labels = nullptr,
             LoraAdapters<T>* lora = nullptr) const {
    if (input_ids.ndim() != 2)
      throw DataError("encode: input_ids must be (B, L)");
    int64_t b = input_ids.dim(0), l = input_ids.dim(1);
    if (attention_mask.numel() != b * l)
      throw DataError("encode: attention mask shape mismatch");
    int h = embed(g, input_ids, slots, pool, mlm_labels);

    int64_t hd = cfg.head_dim();
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (const auto& layer : layers_) {
      auto heads = [&](int m) {
        int r = ad::reshape(g.tape, m, Shape{b, l, cfg.n_heads, hd});
        r = ad::permute(g.tape, r, {0, 2, 1, 3});
        return ad::reshape(g.tape, r, Shape{b * cfg.n_heads, l, hd});
      };
      int q = heads(lora_linear(g, h, layer.wq, lora));
      int k = heads(layer.wk.forward(g, h));
      int v = heads(lora_linear(g, h, layer.wv, lora));
      int scores = ad::scale(g.tape, ad::bmm_nt(g.tape, q, k), inv_sqrt);
      int probs = ad::masked_softmax(g.tape, scores, attention_mask.clone(),
                                     cfg.n_heads);
      probs = ad::dropout(g.tape, probs, static_cast<T>(cfg.dropout));
      int ctx = ad::bmm(g.tape, probs, v);
      ctx = ad::reshape(g.tape, ctx, Shape{b, cfg.n_heads, l, hd});
      ctx = ad::permute(g.tape, ctx, {0, 2, 1, 3});
      ctx = ad::reshape(g.tape, ctx, Shape{b * l, cfg.d_model});
      int attn_out = layer.wo.forward(g, ctx);
      attn_out = ad::dropout(g.tape, attn_out, static_cast<T>(cfg.dropout));
      h = layer.ln1.forward(g, ad::add(g.tape, h, attn_out));

      int f = ad::relu(g.tape, layer.ffn1.forward(g, h));
      f = layer.ffn2.forward(g, f);
      f = ad::dropout(g.tape, f, static_cast<T>(cfg.dropout));
      h = layer.ln2.forward(g, ad::add(g.tape, h, f));
    }
    return h;
  }

  // Weight-tied head: logits = hidden x tok_emb^T + bias, (B*L, V).
  int mlm_logits(nn::Graph<T>& g, int hidden) const {
    return ad::linear(g.tape, hidden, g.p(const_cast<nn::ParamStore<T>&>(
                                              params), "tok_emb.weight"),
                      g.p(const_cast<nn::ParamStore<T>&>(params),
                          "mlm.bias"));
  }

  // Mean masked cross entropy over labeled positions of a (B, L) label grid.
  int mlm_loss(nn::Graph<T>& g, int hidden,
               const Tensor<int32_t>& mlm_labels) const {
    std::vector<int32_t> labels(mlm_labels.data(),
                                mlm_labels.data() + mlm_labels.numel());
    return ad::softmax_ce(g.tape, mlm_logits(g, hidden), std::move(labels));
  }

  // Masked mean-pool over non-pad positions, then the label head: (B, n).
  int classify(nn::Graph<T>& g, int hidden, const Tensor<T>& attention_mask,
               int64_t b, int64_t l) const {
    if (cfg.n_labels == 0)
      throw ConfigError("classify: model built without a label head");
    for (int64_t r = 0; r < b; ++r) {
      double cnt = 0;
      for (int64_t p = 0; p < l; ++p) cnt += attention_mask[r * l + p];
      if (cnt == 0)
        throw DataError("classify: sequence with no valid positions");
    }
    int grid = ad::reshape(g.tape, hidden, Shape{b, l, cfg.d_model});
    int pooled = ad::masked_mean_seq(g.tape, grid, attention_mask.clone());
    return cls_.forward(g, pooled);
  }

  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }

 private:
  nn::Embedding<T> tok_emb_, pos_emb_;
  std::vector<MorphBlock<T>> morph_blocks_;
  nn::Linear<T> morph_proj_;
  std::vector<EncoderLayer<T>> layers_;
  nn::Linear<T> cls_;

  int lora_linear(nn::Graph<T>& g, int x, const nn::Linear<T>& lin,
                  LoraAdapters<T>* lora) const {
    int y = lin.forward(g, x);
    if (!lora || !lora->adapts(lin.w_name)) return y;
    int a = g.p(lora->params, lin.w_name + ".lora_a");
    int bm = g.p(lora->params, lin.w_name + ".lora_b");
    int ax = ad::linear(g.tape, x, a);
    int bax = ad::linear(g.tape, ax, bm);
    return ad::add(g.tape, y,
                   ad::scale(g.tape, bax, static_cast<T>(lora->cfg.scale())));
  }
};

// One (A, B) pair per adapted attention projection. A gets the usual fan-in
// init; B is zero so the adapter starts as the identity.
template <typename T>
LoraAdapters<T> make_lora_adapters(const Encoder<T>& model, LoraConfig cfg,
                                   uint64_t seed) {
  cfg.validate();
  LoraAdapters<T> out;
  out.cfg = cfg;
  Rng rng(seed);
  for (int64_t i = 0; i < model.cfg.n_layers; ++i) {
    std::vector<std::string> names;
    if (cfg.adapt_q)
      names.push_back(str_format("layer%lld.wq.weight",
                                 static_cast<long long>(i)));
    if (cfg.adapt_v)
      names.push_back(str_format("layer%lld.wv.weight",
                                 static_cast<long long>(i)));
    for (const auto& name : names) {
      int64_t d = model.cfg.d_model;
      out.params.add(name + ".lora_a",
                     nn::fan_in_init<T>({cfg.rank, d}, d, rng));
      out.params.add(name + ".lora_b", Tensor<T>::zeros({d, cfg.rank}));
      out.adapted.push_back(name);
    }
  }
  return out;
}

// Folds every adapter into its base weight; the adapters' B tensors are
// zeroed afterwards so applying the merged model with the same adapters
// stays a no-op.
template <typename T>
void merge_lora(Encoder<T>& model, LoraAdapters<T>& adapters) {
  for (const auto& name : adapters.adapted) {
    Tensor<T>& w = model.params.at(name);
    const Tensor<T>& a = adapters.params.at(name + ".lora_a");
    Tensor<T>& bt = adapters.params.at(name + ".lora_b");
    w = lora_merged(w, a, bt, adapters.cfg.scale());
    for (int64_t i = 0; i < bt.numel(); ++i) bt[i] = T(0);
  }
}

template <typename T>
ckpt::Checkpoint to_checkpoint(const Encoder<T>& model) {
  return ckpt::make_checkpoint("encoder", model.cfg.to_json(), model.params);
}

template <typename T = float>
Encoder<T> from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.kind != "encoder")
    throw DataError("checkpoint kind is not 'encoder': " + c.kind);
  return Encoder<T>(c);
}

// Adapter checkpoints carry the LoRA tensors plus any model entries trained
// alongside them (the label head, optionally the morphology projection),
// and pin the base checkpoint by content hash.
template <typename T>
ckpt::Checkpoint adapters_to_checkpoint(
    const LoraAdapters<T>& adapters, const Encoder<T>& model,
    const std::vector<std::string>& model_entries,
    const std::string& base_sha256) {
  json config{{"rank", adapters.cfg.rank},
              {"alpha", adapters.cfg.alpha},
              {"adapted", adapters.adapted},
              {"model_entries", model_entries}};
  ckpt::Checkpoint c = ckpt::make_checkpoint("lora_adapter", config,
                                             adapters.params);
  c.extra = json{{"base_sha256", base_sha256}};
  for (const auto& name : model_entries) {
    const Tensor<T>& t = model.params.at(name);
    c.tensors.emplace_back(name, t.template cast<float>());
  }
  return c;
}

// Restores adapters and bundled head entries onto a freshly loaded base
// model. Returns the base hash recorded at save time; callers decide how
// strictly to enforce it.
template <typename T>
std::string load_adapters(const ckpt::Checkpoint& c, Encoder<T>& model,
                          LoraAdapters<T>& adapters) {
  if (c.kind != "lora_adapter")
    throw DataError("checkpoint kind is not 'lora_adapter': " + c.kind);
  LoraConfig cfg;
  std::vector<std::string> model_entries;
  try {
    cfg.rank = c.config.at("rank").get<int64_t>();
    cfg.alpha = c.config.at("alpha").get<double>();
    adapters.adapted = c.config.at("adapted").get<std::vector<std::string>>();
    model_entries =
        c.config.at("model_entries").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(str_format("adapter checkpoint: %s", e.what()));
  }
  cfg.validate();
  adapters.cfg = cfg;
  adapters.params = nn::ParamStore<T>();
  for (const auto& name : adapters.adapted) {
    const Tensor<float>& a = c.tensor(name + ".lora_a");
    const Tensor<float>& b = c.tensor(name + ".lora_b");
    adapters.params.add(name + ".lora_a", a.template cast<T>());
    adapters.params.add(name + ".lora_b", b.template cast<T>());
  }
  for (const auto& name : model_entries) {
    const Tensor<float>& src = c.tensor(name);
    Tensor<T>& dst = model.params.at(name);
    if (src.shape() != dst.shape())
      throw DataError("adapter checkpoint tensor " + name +
                      ": shape mismatch");
    for (int64_t i = 0; i < src.numel(); ++i)
      dst.data()[i] = static_cast<T>(src.data()[i]);
  }
  return c.extra.value("base_sha256", std::string());
}

}  // namespace ecglang::encoder
