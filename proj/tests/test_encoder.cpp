#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "ecglang/encoder.hpp"

namespace fs = std::filesystem;
using namespace ecglang;
using namespace ecglang::encoder;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.d_model = 12;
  c.n_layers = 2;
  c.n_heads = 2;
  c.vocab_size = 10;
  c.max_len = 8;
  c.dropout = 0.0;
  c.morph_feature_dim = 8;
  c.morph_blocks = 2;
  c.n_labels = 2;
  c.validate();
  return c;
}

WaveSegment rand_seg(Rng& rng, int len) {
  WaveSegment s;
  s.wave_type = WaveType::P;
  s.samples.resize(len);
  for (auto& v : s.samples) v = static_cast<float>(rng.normal(0.0, 1.0));
  return s;
}

// Synthetic batch in the encoder's input layout; frames are not enforced
// here, only the token-range and slot contracts.
template <typename T>
struct Built {
  Tensor<int32_t> ids{Shape{0, 0}};
  Tensor<T> attn{Shape{0, 0}};
  Tensor<int32_t> labels{Shape{0, 0}};
  std::vector<sentence::MorphSlot> slots;
  std::vector<WaveSegment> pool;
};

template <typename T>
Built<T> random_batch(Rng& rng, const ModelConfig& cfg, int64_t b, int64_t l,
                      const std::vector<int64_t>& lens, double p_mask) {
  Built<T> out;
  out.ids = Tensor<int32_t>::full(Shape{b, l}, vocab::kPadToken);
  out.attn = Tensor<T>::zeros(Shape{b, l});
  out.labels = Tensor<int32_t>::full(Shape{b, l}, -1);
  int32_t n_wave = static_cast<int32_t>(cfg.vocab_size) -
                   vocab::kFirstWaveToken;
  for (int64_t r = 0; r < b; ++r)
    for (int64_t p = 0; p < lens[r]; ++p) {
      int64_t flat = r * l + p;
      out.attn[flat] = T(1);
      if (rng.uniform() < 0.75) {
        int32_t id = vocab::kFirstWaveToken +
                     static_cast<int32_t>(rng.uniform_index(n_wave));
        out.ids[flat] = id;
        out.slots.push_back({r, p});
        out.pool.push_back(rand_seg(rng, 6 + int(rng.uniform_index(10))));
        if (rng.uniform() < p_mask) {
          out.labels[flat] = id;
          out.ids[flat] = vocab::kMaskToken;
        }
      } else {
        out.ids[flat] = rng.uniform() < 0.5 ? vocab::kSepToken
                                            : vocab::kMissToken;
      }
    }
  return out;
}

}  // namespace

TEST(ModelConfig, RejectsInvalidCombinations) {
  ModelConfig c;
  c.vocab_size = 39;
  c.validate();  // the 192/12 default splits evenly

  c.d_model = 196;  // not divisible by 12 heads
  EXPECT_THROW(c.validate(), ConfigError);
  c.d_model = 192;

  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.dropout = 0.1;

  c.morph_feature_dim = 500;  // not divisible by 2^3
  EXPECT_THROW(c.validate(), ConfigError);
  c.morph_feature_dim = 512;

  c.morph_kernel = 6;
  EXPECT_THROW(c.validate(), ConfigError);
  c.morph_kernel = 7;

  c.vocab_size = vocab::kFirstWaveToken;  // no wave tokens possible
  EXPECT_THROW(c.validate(), ConfigError);
  c.vocab_size = 39;

  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = tiny_cfg();
  c.ffn_dim = 30;
  ModelConfig d = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(d.d_model, c.d_model);
  EXPECT_EQ(d.n_layers, c.n_layers);
  EXPECT_EQ(d.n_heads, c.n_heads);
  EXPECT_EQ(d.ffn_dim, c.ffn_dim);
  EXPECT_EQ(d.vocab_size, c.vocab_size);
  EXPECT_EQ(d.max_len, c.max_len);
  EXPECT_EQ(d.dropout, c.dropout);
  EXPECT_EQ(d.morph_feature_dim, c.morph_feature_dim);
  EXPECT_EQ(d.morph_blocks, c.morph_blocks);
  EXPECT_EQ(d.n_labels, c.n_labels);
  EXPECT_THROW(ModelConfig::from_json(json{{"d_model", 8}}), DataError);
}

TEST(Embed, TokenAndPositionComponentsAreAdditive) {
  Encoder<float> model(tiny_cfg(), 5);
  Tensor<int32_t> base = Tensor<int32_t>::full(Shape{1, 8}, 6);
  nn::Graph<float> g;
  const auto& e_base = g.val(model.embed(g, base, {}, {}));
  ASSERT_EQ(e_base.shape(), (Shape{8, 12}));

  // swapping in token 7 at two different positions shifts the embedding by
  // the same token-only delta at both
  auto ids2 = base.clone();
  ids2[2] = 7;
  ids2[5] = 7;
  const auto& e_swap = g.val(model.embed(g, ids2, {}, {}));
  for (int64_t j = 0; j < 12; ++j) {
    float d2 = e_swap[2 * 12 + j] - e_base[2 * 12 + j];
    float d5 = e_swap[5 * 12 + j] - e_base[5 * 12 + j];
    EXPECT_NEAR(d2, d5, 1e-6);  // same token delta, different rounding
    EXPECT_EQ(e_swap[3 * 12 + j], e_base[3 * 12 + j]);
  }
}

TEST(Embed, ZeroMorphProjectionReducesToTokenPlusPosition) {
  Encoder<float> model(tiny_cfg(), 5);
  auto& w = model.params.at("morph.proj.weight");
  auto& b = model.params.at("morph.proj.bias");
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = 0.0f;
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = 0.0f;

  Rng rng(7);
  auto built = random_batch<float>(rng, model.cfg, 2, 8, {8, 8}, 0.0);
  nn::Graph<float> g;
  const auto& with = g.val(model.embed(g, built.ids, built.slots, built.pool));
  const auto& without = g.val(model.embed(g, built.ids, {}, {}));
  ASSERT_EQ(with.numel(), without.numel());
  for (int64_t i = 0; i < with.numel(); ++i)
    EXPECT_EQ(with[i], without[i]);
}

TEST(Embed, RejectsBadInput) {
  Encoder<float> model(tiny_cfg(), 5);
  nn::Graph<float> g;

  Tensor<int32_t> bad_id = Tensor<int32_t>::full(Shape{1, 4}, 10);
  EXPECT_THROW(model.embed(g, bad_id, {}, {}), DataError);
  bad_id[0] = -1;
  bad_id[1] = 5;
  bad_id[2] = 5;
  bad_id[3] = 5;
  EXPECT_THROW(model.embed(g, bad_id, {}, {}), DataError);

  Tensor<int32_t> too_long = Tensor<int32_t>::full(Shape{1, 12}, 5);
  EXPECT_THROW(model.embed(g, too_long, {}, {}), DataError);

  Tensor<int32_t> ok = Tensor<int32_t>::full(Shape{1, 4}, 5);
  WaveSegment seg;
  seg.samples = {0.1f, 0.2f};
  EXPECT_THROW(model.embed(g, ok, {{0, 9}}, {seg}), DataError);
  EXPECT_THROW(model.embed(g, ok, {{0, 1}, {0, 2}}, {seg}), DataError);
}

TEST(Morph, FeatureWidthTracksConfigAndDefaultIs512) {
  EXPECT_EQ(ModelConfig{}.morph_feature_dim, 512);

  Encoder<float> model(tiny_cfg(), 5);
  Rng rng(11);
  WaveSegment a = rand_seg(rng, 20), b = rand_seg(rng, 7);
  nn::Graph<float> g;
  const auto& f =
      g.val(model.morph_features(g, {&a.samples, &b.samples, &a.samples}));
  ASSERT_EQ(f.shape(), (Shape{3, 8}));
  ASSERT_TRUE(f.all_finite());
  // identical segments produce identical feature rows
  for (int64_t j = 0; j < 8; ++j) EXPECT_EQ(f[j], f[2 * 8 + j]);

  std::vector<float> empty;
  EXPECT_THROW(model.morph_features(g, {&empty}), DataError);
}

TEST(Encoder, PadPositionsCannotInfluenceNonPadOutputs) {
  Encoder<float> model(tiny_cfg(), 5);
  Rng rng(13);
  auto built = random_batch<float>(rng, model.cfg, 2, 8, {8, 5}, 0.0);

  nn::Graph<float> g1;
  const auto& h1 = g1.val(model.encode(g1, built.ids, built.attn, built.slots,
                                       built.pool));

  // rewrite the pad tail: different tokens and a morphology slot there
  auto ids2 = built.ids.clone();
  auto slots2 = built.slots;
  auto pool2 = built.pool;
  for (int64_t p = 5; p < 8; ++p) ids2[8 + p] = 5 + int32_t(p % 3);
  slots2.push_back({1, 6});
  pool2.push_back(rand_seg(rng, 9));

  nn::Graph<float> g2;
  const auto& h2 = g2.val(model.encode(g2, ids2, built.attn, slots2, pool2));
  for (int64_t p = 0; p < 8; ++p)
    for (int64_t j = 0; j < 12; ++j)
      ASSERT_EQ(h1[p * 12 + j], h2[p * 12 + j]) << "row 0 pos " << p;
  for (int64_t p = 0; p < 5; ++p)
    for (int64_t j = 0; j < 12; ++j)
      ASSERT_EQ(h1[(8 + p) * 12 + j], h2[(8 + p) * 12 + j])
          << "row 1 pos " << p;
}

TEST(Encoder, DeterministicForSeedAndInput) {
  Rng rng(17);
  auto cfg = tiny_cfg();
  Encoder<float> m1(cfg, 99), m2(cfg, 99);
  auto built = random_batch<float>(rng, cfg, 2, 8, {8, 6}, 0.3);

  nn::Graph<float> g1, g2, g3;
  int h1 = m1.encode(g1, built.ids, built.attn, built.slots, built.pool,
                     &built.labels);
  int h2 = m2.encode(g2, built.ids, built.attn, built.slots, built.pool,
                     &built.labels);
  int h3 = m1.encode(g3, built.ids, built.attn, built.slots, built.pool,
                     &built.labels);
  const auto& v1 = g1.val(m1.mlm_logits(g1, h1));
  const auto& v2 = g2.val(m2.mlm_logits(g2, h2));
  const auto& v3 = g3.val(m1.mlm_logits(g3, h3));
  for (int64_t i = 0; i < v1.numel(); ++i) {
    ASSERT_EQ(v1[i], v2[i]);
    ASSERT_EQ(v1[i], v3[i]);
  }
}

TEST(Encoder, LabeledPositionsReceiveNoMorphology) {
  // simulate the keep arm of BERT corruption: the wave token stays visible
  // but carries a label, so its segment must stay out of the fusion
  Encoder<float> model(tiny_cfg(), 5);
  Rng rng(19);
  auto built = random_batch<float>(rng, model.cfg, 1, 8, {8}, 0.0);
  ASSERT_GE(built.slots.size(), 2u);

  auto labels = Tensor<int32_t>::full(Shape{1, 8}, -1);
  int64_t kept_col = built.slots[0].col;
  labels[kept_col] = built.ids[kept_col];

  auto slots_removed = built.slots;
  auto pool_removed = built.pool;
  slots_removed.erase(slots_removed.begin());
  pool_removed.erase(pool_removed.begin());

  nn::Graph<float> g1, g2;
  const auto& with_label = g1.val(model.encode(
      g1, built.ids, built.attn, built.slots, built.pool, &labels));
  const auto& removed = g2.val(model.encode(
      g2, built.ids, built.attn, slots_removed, pool_removed));
  for (int64_t i = 0; i < with_label.numel(); ++i)
    ASSERT_EQ(with_label[i], removed[i]);
}

TEST(Mlm, UntrainedCrossEntropyIsNearChanceLevel) {
  ModelConfig cfg = tiny_cfg();
  cfg.d_model = 24;
  cfg.n_heads = 4;
  cfg.vocab_size = 39;
  cfg.max_len = 32;
  Encoder<float> model(cfg, 21);

  Rng rng(23);
  double total = 0;
  int n_batches = 8;
  for (int i = 0; i < n_batches; ++i) {
    auto built = random_batch<float>(rng, cfg, 4, 32, {32, 32, 32, 32}, 0.2);
    nn::Graph<float> g;
    int h = model.encode(g, built.ids, built.attn, built.slots, built.pool,
                         &built.labels);
    ASSERT_EQ(g.val(model.mlm_logits(g, h)).shape(), (Shape{128, 39}));
    total += g.val(model.mlm_loss(g, h, built.labels))[0];
  }
  double mean_ce = total / n_batches;
  double ln_v = std::log(39.0);
  EXPECT_GT(mean_ce, 0.85 * ln_v);
  EXPECT_LT(mean_ce, 1.15 * ln_v);
}

TEST(GradCheck, TinyModelMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_cfg();
  Encoder<double> model(cfg, 31);
  auto adapters = make_lora_adapters(model, LoraConfig{2, 4.0}, 33);
  Rng brng(35);
  for (auto& e : adapters.params.entries())  // nonzero B so A gets gradient
    for (int64_t i = 0; i < e.value.numel(); ++i)
      if (e.name.ends_with(".lora_b")) e.value[i] = brng.normal(0.0, 0.05);

  Rng rng(37);
  auto built = random_batch<double>(rng, cfg, 2, 8, {8, 6}, 0.3);
  Tensor<double> targets(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});

  auto loss_graph = [&](nn::Graph<double>& g) {
    int h = model.encode(g, built.ids, built.attn, built.slots, built.pool,
                         &built.labels, &adapters);
    int mlm = model.mlm_loss(g, h, built.labels);
    int cls = ad::bce_with_logits(g.tape, model.classify(g, h, built.attn,
                                                         2, 8),
                                  targets.clone());
    return ad::add(g.tape, mlm, cls);
  };
  auto eval_loss = [&]() {
    nn::Graph<double> g(true, 55);
    return g.val(loss_graph(g))[0];
  };

  nn::Graph<double> g(true, 55);
  int loss = loss_graph(g);
  g.backward(loss);

  const double h = 1e-5;
  int checked = 0;
  auto check_store = [&](nn::ParamStore<double>& store) {
    for (auto& e : store.entries()) {
      if (!e.trainable) continue;
      const Tensor<double>* grad = g.grad_of(store, e.name);
      ASSERT_NE(grad, nullptr) << e.name;
      for (int64_t i = 0; i < e.value.numel(); ++i) {
        double saved = e.value[i];
        e.value[i] = saved + h;
        double up = eval_loss();
        e.value[i] = saved - h;
        double down = eval_loss();
        e.value[i] = saved;
        double fd = (up - down) / (2 * h);
        double an = (*grad)[i];
        double rel = std::abs(fd - an) /
                     std::max({1.0, std::abs(fd), std::abs(an)});
        ASSERT_LT(rel, 1e-4) << e.name << "[" << i << "] fd=" << fd
                             << " an=" << an;
        ++checked;
      }
    }
  };
  check_store(model.params);
  check_store(adapters.params);
  EXPECT_GT(checked, 3000);
}

TEST(Lora, FreshAdapterLeavesOutputsBitIdentical) {
  Encoder<float> model(tiny_cfg(), 41);
  auto adapters = make_lora_adapters(model, {}, 43);
  EXPECT_EQ(adapters.adapted.size(), 4u);  // q and v in each of 2 layers

  Rng rng(45);
  auto built = random_batch<float>(rng, model.cfg, 2, 8, {8, 7}, 0.0);
  nn::Graph<float> g1, g2;
  const auto& base = g1.val(model.encode(g1, built.ids, built.attn,
                                         built.slots, built.pool));
  const auto& with = g2.val(model.encode(g2, built.ids, built.attn,
                                         built.slots, built.pool, nullptr,
                                         &adapters));
  for (int64_t i = 0; i < base.numel(); ++i) ASSERT_EQ(base[i], with[i]);
}

TEST(Lora, MergedWeightMatchesHandOracle) {
  Tensor<float> w(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<float> a(Shape{1, 2}, {1, 0});
  Tensor<float> b(Shape{2, 1}, {0, 2});
  auto m = lora_merged(w, a, b, 1.0);
  EXPECT_EQ(m[0], 1.0f);
  EXPECT_EQ(m[1], 0.0f);
  EXPECT_EQ(m[2], 2.0f);
  EXPECT_EQ(m[3], 1.0f);

  Tensor<float> bad(Shape{3, 1}, {0, 1, 2});
  EXPECT_THROW(lora_merged(w, a, bad, 1.0), DataError);
  Tensor<float> bad_a(Shape{1, 3}, {0, 1, 2});
  EXPECT_THROW(lora_merged(w, bad_a, b, 1.0), DataError);
}

TEST(Lora, ApplyFormMatchesMergedForm) {
  auto cfg = tiny_cfg();
  Encoder<float> model(cfg, 47), merged(cfg, 47);
  auto adapters = make_lora_adapters(model, {}, 49);
  auto for_merge = make_lora_adapters(merged, {}, 49);  // independent twin
  auto randomize_b = [](LoraAdapters<float>& ad, uint64_t seed) {
    Rng rng(seed);
    for (auto& e : ad.params.entries())
      if (e.name.ends_with(".lora_b"))
        for (int64_t i = 0; i < e.value.numel(); ++i)
          e.value[i] = static_cast<float>(rng.normal(0.0, 0.1));
  };
  randomize_b(adapters, 51);
  randomize_b(for_merge, 51);
  merge_lora(merged, for_merge);
  for (const auto& name : for_merge.adapted) {
    const auto& bt = for_merge.params.at(name + ".lora_b");
    for (int64_t i = 0; i < bt.numel(); ++i) ASSERT_EQ(bt[i], 0.0f);
  }

  Rng rng(53);
  auto built = random_batch<float>(rng, cfg, 2, 8, {8, 6}, 0.0);
  nn::Graph<float> g1, g2, g3;
  const auto& applied = g1.val(model.encode(g1, built.ids, built.attn,
                                            built.slots, built.pool, nullptr,
                                            &adapters));
  const auto& folded = g2.val(merged.encode(g2, built.ids, built.attn,
                                            built.slots, built.pool));
  const auto& folded_plus = g3.val(merged.encode(g3, built.ids, built.attn,
                                                 built.slots, built.pool,
                                                 nullptr, &for_merge));
  for (int64_t i = 0; i < applied.numel(); ++i) {
    EXPECT_NEAR(applied[i], folded[i], 1e-5);
    ASSERT_EQ(folded[i], folded_plus[i]);  // zeroed B is a no-op again
  }
}

TEST(Classify, PooledHeadBehavesPerRow) {
  Encoder<float> model(tiny_cfg(), 53);
  Rng rng(55);
  auto one = random_batch<float>(rng, model.cfg, 1, 8, {6}, 0.0);

  // duplicate the row; logits must repeat exactly
  Tensor<int32_t> ids(Shape{2, 8});
  Tensor<float> attn(Shape{2, 8});
  for (int64_t p = 0; p < 8; ++p) {
    ids[p] = ids[8 + p] = one.ids[p];
    attn[p] = attn[8 + p] = one.attn[p];
  }
  auto slots = one.slots;
  auto pool = one.pool;
  size_t n0 = slots.size();
  for (size_t i = 0; i < n0; ++i) {
    slots.push_back({1, slots[i].col});
    pool.push_back(pool[i]);
  }

  nn::Graph<float> g;
  int h = model.encode(g, ids, attn, slots, pool);
  const auto& logits = g.val(model.classify(g, h, attn, 2, 8));
  ASSERT_EQ(logits.shape(), (Shape{2, 2}));
  EXPECT_EQ(logits[0], logits[2]);
  EXPECT_EQ(logits[1], logits[3]);

  Tensor<float> all_pad = Tensor<float>::zeros(Shape{2, 8});
  EXPECT_THROW(model.classify(g, h, all_pad, 2, 8), DataError);

  ModelConfig no_head = tiny_cfg();
  no_head.n_labels = 0;
  Encoder<float> headless(no_head, 53);
  nn::Graph<float> g2;
  int h2 = headless.encode(g2, ids, attn, slots, pool);
  EXPECT_THROW(headless.classify(g2, h2, attn, 2, 8), ConfigError);
}

TEST(Checkpoint, RoundTripReproducesLogitsBitExactly) {
  Encoder<float> model(tiny_cfg(), 57);
  fs::path path = fs::temp_directory_path() / "ecglang_encoder_ckpt.bin";
  ckpt::save_checkpoint(to_checkpoint(model), path);
  auto loaded = from_checkpoint<float>(ckpt::load_checkpoint(path));
  fs::remove(path);

  Rng rng(59);
  auto built = random_batch<float>(rng, model.cfg, 2, 8, {8, 5}, 0.2);
  nn::Graph<float> g1, g2;
  int h1 = model.encode(g1, built.ids, built.attn, built.slots, built.pool,
                        &built.labels);
  int h2 = loaded.encode(g2, built.ids, built.attn, built.slots, built.pool,
                         &built.labels);
  const auto& v1 = g1.val(model.mlm_logits(g1, h1));
  const auto& v2 = g2.val(loaded.mlm_logits(g2, h2));
  for (int64_t i = 0; i < v1.numel(); ++i) ASSERT_EQ(v1[i], v2[i]);

  auto wrong = to_checkpoint(model);
  wrong.kind = "wave_ae";
  EXPECT_THROW(from_checkpoint<float>(wrong), DataError);
}

TEST(Checkpoint, AdapterRoundTripRestoresApplyOutputs) {
  auto cfg = tiny_cfg();
  Encoder<float> model(cfg, 61);
  auto adapters = make_lora_adapters(model, {}, 63);
  Rng rng(65);
  for (auto& e : adapters.params.entries())
    for (int64_t i = 0; i < e.value.numel(); ++i)
      e.value[i] = static_cast<float>(rng.normal(0.0, 0.1));
  auto& cls_w = model.params.at("cls.weight");
  for (int64_t i = 0; i < cls_w.numel(); ++i)
    cls_w[i] = static_cast<float>(rng.normal(0.0, 0.3));

  auto c = adapters_to_checkpoint(adapters, model,
                                  {"cls.weight", "cls.bias"}, "basehash123");
  fs::path path = fs::temp_directory_path() / "ecglang_adapter_ckpt.bin";
  ckpt::save_checkpoint(c, path);
  auto c2 = ckpt::load_checkpoint(path);
  fs::remove(path);
  EXPECT_EQ(c2.kind, "lora_adapter");

  Encoder<float> fresh(cfg, 61);
  LoraAdapters<float> restored;
  std::string base_sha = load_adapters(c2, fresh, restored);
  EXPECT_EQ(base_sha, "basehash123");
  EXPECT_EQ(restored.cfg.rank, adapters.cfg.rank);

  auto built = random_batch<float>(rng, cfg, 2, 8, {8, 6}, 0.0);
  nn::Graph<float> g1, g2;
  int h1 = model.encode(g1, built.ids, built.attn, built.slots, built.pool,
                        nullptr, &adapters);
  int h2 = fresh.encode(g2, built.ids, built.attn, built.slots, built.pool,
                        nullptr, &restored);
  const auto& v1 = g1.val(model.classify(g1, h1, built.attn, 2, 8));
  const auto& v2 = g2.val(fresh.classify(g2, h2, built.attn, 2, 8));
  for (int64_t i = 0; i < v1.numel(); ++i) ASSERT_EQ(v1[i], v2[i]);
}
