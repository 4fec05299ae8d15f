#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "ecglang/rng.hpp"
#include "ecglang/vocab.hpp"

using namespace ecglang;
using namespace ecglang::vocab;

namespace {

Tensor<float> matrix(std::initializer_list<std::initializer_list<float>> rows) {
  int64_t n = rows.size(), d = rows.begin()->size();
  Tensor<float> t({n, d});
  int64_t i = 0;
  for (const auto& row : rows)
    for (float v : row) t.data()[i++] = v;
  return t;
}

Tensor<float> gaussian_clusters(const std::vector<std::vector<float>>& centers,
                                int64_t per_cluster, float sigma,
                                uint64_t seed) {
  int64_t d = centers[0].size();
  int64_t n = per_cluster * static_cast<int64_t>(centers.size());
  Tensor<float> t({n, d});
  Rng rng(seed);
  int64_t i = 0;
  for (const auto& c : centers)
    for (int64_t p = 0; p < per_cluster; ++p, ++i)
      for (int64_t j = 0; j < d; ++j)
        t.data()[i * d + j] = c[j] + float(rng.normal(0.0, sigma));
  return t;
}

const Tensor<float> kTwoClouds = matrix(
    {{0, 0}, {1, 0}, {0, 1}, {10, 10}, {11, 10}, {10, 11}});

}  // namespace

TEST(Kmeans, TwoCloudOracle) {
  auto res = kmeans_restarts(kTwoClouds, 2, 42);
  EXPECT_NEAR(res.wcss, 8.0 / 3.0, 1e-9);
  std::set<int32_t> lo(res.assignments.begin(), res.assignments.begin() + 3);
  std::set<int32_t> hi(res.assignments.begin() + 3, res.assignments.end());
  ASSERT_EQ(lo.size(), 1u);
  ASSERT_EQ(hi.size(), 1u);
  EXPECT_NE(*lo.begin(), *hi.begin());
  const float* c_lo = res.centroids.data() + *lo.begin() * 2;
  const float* c_hi = res.centroids.data() + *hi.begin() * 2;
  EXPECT_NEAR(c_lo[0], 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(c_lo[1], 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(c_hi[0], 31.0 / 3.0, 1e-6);
  EXPECT_NEAR(c_hi[1], 31.0 / 3.0, 1e-6);
}

TEST(Kmeans, KOneGivesGlobalMean) {
  auto res = kmeans(kTwoClouds, 1, 7);
  EXPECT_NEAR(res.centroids.data()[0], 32.0 / 6.0, 1e-6);
  EXPECT_NEAR(res.centroids.data()[1], 32.0 / 6.0, 1e-6);
  for (int32_t a : res.assignments) EXPECT_EQ(a, 0);
}

TEST(Kmeans, KEqualsNDistinctPointsGivesZeroWcss) {
  Tensor<float> pts({6, 1});
  for (int i = 0; i < 6; ++i) pts.data()[i] = float(i * i);
  auto res = kmeans(pts, 6, 3);
  EXPECT_EQ(res.wcss, 0.0);
  std::set<int32_t> uniq(res.assignments.begin(), res.assignments.end());
  EXPECT_EQ(uniq.size(), 6u);
}

TEST(Kmeans, DuplicatePointsGiveZeroWcssForAnyK) {
  Tensor<float> pts = Tensor<float>::full({8, 3}, 2.5f);
  for (int k : {1, 2, 4, 8}) {
    auto res = kmeans(pts, k, 11);
    EXPECT_EQ(res.wcss, 0.0) << "k=" << k;
  }
}

TEST(Kmeans, RejectsBadInput) {
  EXPECT_THROW(kmeans(kTwoClouds, 7, 0), DataError);
  EXPECT_THROW(kmeans(kTwoClouds, 0, 0), DataError);
  Tensor<float> bad = kTwoClouds.clone();
  bad.data()[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(kmeans(bad, 2, 0), DataError);
}

TEST(Kmeans, LloydIterationsNeverIncreaseWcss) {
  Rng rng(99);
  for (int run = 0; run < 100; ++run) {
    int64_t n = 10 + int64_t(rng.uniform_index(50));
    int64_t d = 1 + int64_t(rng.uniform_index(4));
    int k = 1 + int(rng.uniform_index(std::min<int64_t>(8, n)));
    Tensor<float> pts({n, d});
    for (int64_t i = 0; i < n * d; ++i)
      pts.data()[i] = float(rng.normal(0.0, 3.0));
    auto res = kmeans(pts, k, rng.next_u64());
    for (size_t i = 1; i < res.wcss_trace.size(); ++i) {
      double prev = res.wcss_trace[i - 1];
      EXPECT_LE(res.wcss_trace[i], prev + 1e-9 * std::max(1.0, prev))
          << "run " << run << " iter " << i;
    }
  }
}

TEST(Kmeans, DeterministicForSameSeed) {
  Tensor<float> pts = gaussian_clusters({{0, 0}, {4, 4}, {8, 0}}, 30, 0.5, 5);
  auto a = kmeans_restarts(pts, 3, 123);
  auto b = kmeans_restarts(pts, 3, 123);
  ASSERT_EQ(a.assignments, b.assignments);
  ASSERT_EQ(a.centroids.numel(), b.centroids.numel());
  for (int64_t i = 0; i < a.centroids.numel(); ++i)
    EXPECT_EQ(a.centroids.data()[i], b.centroids.data()[i]);
  EXPECT_EQ(a.wcss, b.wcss);
}

TEST(WcssCurve, WeaklyDecreasingInK) {
  Tensor<float> pts = gaussian_clusters({{0, 0}, {5, 0}, {0, 5}}, 25, 0.8, 17);
  auto curve = wcss_curve(pts, {1, 2, 3, 4, 5, 6, 7, 8}, 21);
  for (size_t i = 1; i < curve.wcss.size(); ++i)
    EXPECT_LE(curve.wcss[i], curve.wcss[i - 1] * (1 + 1e-9)) << "k index " << i;
}

TEST(WcssCurve, KOneEqualsTotalScatter) {
  Tensor<float> pts = gaussian_clusters({{1, 2}, {3, 4}}, 20, 1.0, 31);
  auto curve = wcss_curve(pts, {1, 2}, 9);
  int64_t n = pts.shape()[0], d = pts.shape()[1];
  double scatter = 0;
  std::vector<double> mean(d, 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mean[j] += pts.data()[i * d + j];
  for (auto& m : mean) m /= double(n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double diff = pts.data()[i * d + j] - mean[j];
      scatter += diff * diff;
    }
  EXPECT_NEAR(curve.wcss[0], scatter, 1e-6 * scatter);
}

TEST(FindKnee, ReferenceCurvePicksThree) {
  KneeCurve curve{{1, 2, 3, 4, 5, 6}, {100, 50, 30, 28, 27, 26}};
  auto k = find_knee(curve);
  ASSERT_TRUE(k.has_value());
  EXPECT_EQ(*k, 3);
}

TEST(FindKnee, InvariantToAffineRescaling) {
  KneeCurve base{{1, 2, 3, 4, 5, 6}, {100, 50, 30, 28, 27, 26}};
  KneeCurve scaled_y = base;
  for (auto& w : scaled_y.wcss) w = 7.0 * w + 3.0;
  ASSERT_TRUE(find_knee(scaled_y).has_value());
  EXPECT_EQ(*find_knee(scaled_y), 3);

  KneeCurve scaled_x = base;
  for (auto& k : scaled_x.ks) k = 2 * k + 1;
  auto k = find_knee(scaled_x);
  ASSERT_TRUE(k.has_value());
  EXPECT_EQ(*k, scaled_x.ks[2]);
}

TEST(FindKnee, StraightLineHasNoKnee) {
  KneeCurve line{{1, 2, 3, 4, 5}, {50, 40, 30, 20, 10}};
  EXPECT_FALSE(find_knee(line).has_value());
}

TEST(FindKnee, FlatCurveHasNoKnee) {
  KneeCurve flat{{1, 2, 3, 4}, {5, 5, 5, 5}};
  EXPECT_FALSE(find_knee(flat).has_value());
}

TEST(FindKnee, RejectsMalformedCurves) {
  EXPECT_THROW(find_knee(KneeCurve{{1, 2}, {10, 5}}), DataError);
  EXPECT_THROW(find_knee(KneeCurve{{1, 3, 2}, {10, 5, 1}}), DataError);
  EXPECT_THROW(find_knee(KneeCurve{{1, 2, 3}, {10, -5, 1}}), DataError);
  EXPECT_THROW(find_knee(KneeCurve{{1, 2, 3}, {10, 5}}), DataError);
}

TEST(Silhouette, TwoTightCloudsScoreNearOne) {
  Tensor<float> pts = matrix({{0}, {0.1f}, {10}, {10.1f}});
  std::vector<int32_t> assign{0, 0, 1, 1};
  double s = silhouette(pts, assign);
  EXPECT_GT(s, 0.97);
  // mean of per-point scores: twice (9.95/10.05), twice (9.85/9.95)
  EXPECT_NEAR(s, (9.95 / 10.05 + 9.85 / 9.95) / 2.0, 1e-5);
}

TEST(Silhouette, IdenticalPointsScoreZero) {
  Tensor<float> pts = Tensor<float>::full({6, 2}, 1.0f);
  std::vector<int32_t> assign{0, 0, 0, 1, 1, 1};
  EXPECT_EQ(silhouette(pts, assign), 0.0);
}

TEST(Silhouette, SingletonClusterContributesZero) {
  Tensor<float> pts = matrix({{0}, {0.1f}, {50}});
  std::vector<int32_t> assign{0, 0, 1};
  // two clustered points score ~1, the singleton scores 0
  double expect = (2.0 * ((49.95 - 0.1) / 49.95) + 0.0) / 3.0;
  EXPECT_NEAR(silhouette(pts, assign), expect, 1e-6);
}

TEST(Silhouette, SingleClusterRejected) {
  Tensor<float> pts = matrix({{0}, {1}, {2}});
  std::vector<int32_t> assign{0, 0, 0};
  EXPECT_THROW(silhouette(pts, assign), DataError);
}

TEST(Silhouette, RandomUniformDataScoresModestly) {
  Rng rng(303);
  Tensor<float> pts({200, 2});
  for (int64_t i = 0; i < pts.numel(); ++i)
    pts.data()[i] = float(rng.uniform());
  auto res = kmeans_restarts(pts, 2, 77);
  double s = silhouette(pts, res.assignments);
  EXPECT_GT(s, -0.2);
  EXPECT_LT(s, 0.5);
}

TEST(Silhouette, SubsampleIsDeterministicAndBounded) {
  Tensor<float> pts = gaussian_clusters({{0, 0}, {6, 6}}, 120, 1.0, 41);
  std::vector<int32_t> assign(240);
  for (int i = 0; i < 240; ++i) assign[i] = i < 120 ? 0 : 1;
  double a = silhouette(pts, assign, 50, 9);
  double b = silhouette(pts, assign, 50, 9);
  EXPECT_EQ(a, b);
  EXPECT_GE(a, -1.0);
  EXPECT_LE(a, 1.0);
  EXPECT_GT(a, 0.5);  // clusters stay separated under subsampling
}

namespace {

std::array<Tensor<float>, 3> clustered_latents(int n_clusters, int per_cluster,
                                               uint64_t seed) {
  std::array<Tensor<float>, 3> latents;
  for (WaveType t : kWaveTypes) {
    std::vector<std::vector<float>> centers;
    for (int c = 0; c < n_clusters; ++c)
      centers.push_back({float(6 * c), float(int(t))});
    latents[int(t)] =
        gaussian_clusters(centers, per_cluster, 0.05f, seed + uint64_t(t));
  }
  return latents;
}

}  // namespace

TEST(Vocabulary, LayoutMatchesFixedClusterCounts) {
  auto latents = clustered_latents(4, 8, 100);
  VocabBuildSpec spec;
  spec.k_p = 13;
  spec.k_qrs = 11;
  spec.k_t = 10;
  spec.seed = 5;
  auto vocab = build_vocabulary(latents, spec);
  EXPECT_EQ(vocab.vocab_size(), 39);
  EXPECT_EQ(vocab.wave(WaveType::P).offset, 5);
  EXPECT_EQ(vocab.wave(WaveType::QRS).offset, 18);
  EXPECT_EQ(vocab.wave(WaveType::T).offset, 29);
  EXPECT_EQ(vocab.token_for(WaveType::T, 0), 29);
  EXPECT_EQ(vocab.token_for(WaveType::P, 12), 17);
  EXPECT_THROW(vocab.token_for(WaveType::T, 10), DataError);

  EXPECT_TRUE(vocab.is_special(kPadToken));
  EXPECT_TRUE(vocab.is_special(kClsReservedToken));
  EXPECT_FALSE(vocab.is_special(5));
  EXPECT_TRUE(vocab.is_wave_token(5));
  EXPECT_TRUE(vocab.is_wave_token(38));
  EXPECT_FALSE(vocab.is_wave_token(39));
  EXPECT_EQ(vocab.wave_of(17), WaveType::P);
  EXPECT_EQ(vocab.wave_of(18), WaveType::QRS);
  EXPECT_EQ(vocab.cluster_of(29), 0);
  EXPECT_THROW(vocab.wave_of(2), DataError);
}

TEST(Vocabulary, SingleClusterPerWaveGivesEightTokens) {
  auto latents = clustered_latents(2, 4, 200);
  VocabBuildSpec spec;
  spec.k_p = 1;
  spec.k_qrs = 1;
  spec.k_t = 1;
  auto vocab = build_vocabulary(latents, spec);
  EXPECT_EQ(vocab.vocab_size(), 8);
  EXPECT_EQ(vocab.wave(WaveType::P).offset, 5);
  EXPECT_EQ(vocab.wave(WaveType::QRS).offset, 6);
  EXPECT_EQ(vocab.wave(WaveType::T).offset, 7);
}

TEST(Vocabulary, BuildIsDeterministic) {
  auto latents = clustered_latents(3, 10, 300);
  VocabBuildSpec spec;
  spec.k_p = 3;
  spec.k_qrs = 3;
  spec.k_t = 3;
  spec.seed = 77;
  auto a = build_vocabulary(latents, spec);
  auto b = build_vocabulary(latents, spec);
  for (WaveType t : kWaveTypes) {
    const auto& wa = a.wave(t);
    const auto& wb = b.wave(t);
    ASSERT_EQ(wa.centroids.numel(), wb.centroids.numel());
    for (int64_t i = 0; i < wa.centroids.numel(); ++i)
      EXPECT_EQ(wa.centroids.data()[i], wb.centroids.data()[i]);
    EXPECT_EQ(wa.wcss, wb.wcss);
    EXPECT_EQ(wa.silhouette, wb.silhouette);
  }
}

TEST(Vocabulary, AutoKFindsWellSeparatedClusterCount) {
  auto latents = clustered_latents(3, 25, 400);
  VocabBuildSpec spec;  // all k unset, knee selection
  spec.seed = 11;
  auto vocab = build_vocabulary(latents, spec);
  for (WaveType t : kWaveTypes)
    EXPECT_EQ(vocab.wave(t).k, 3) << wave_name(t);
}

TEST(Vocabulary, ProvenanceRecordsCorpusAndQuality) {
  auto latents = clustered_latents(3, 20, 500);
  VocabBuildSpec spec;
  spec.k_p = 3;
  spec.k_qrs = 3;
  spec.k_t = 3;
  spec.seed = 21;
  auto vocab = build_vocabulary(latents, spec);
  EXPECT_EQ(vocab.seed, 21u);
  for (WaveType t : kWaveTypes) {
    EXPECT_EQ(vocab.wave(t).corpus_size, 60);
    EXPECT_GT(vocab.wave(t).silhouette, 0.9);
    EXPECT_GE(vocab.wave(t).wcss, 0.0);
  }
}

TEST(AssignToken, ConsistentWithTrainingAssignments) {
  WaveVocabulary vocab;
  int32_t offset = kFirstWaveToken;
  std::array<KmeansResult, 3> results;
  std::array<Tensor<float>, 3> latents = clustered_latents(4, 12, 600);
  for (WaveType t : kWaveTypes) {
    results[int(t)] = kmeans_restarts(latents[int(t)], 4, 31);
    auto& w = vocab.wave(t);
    w.centroids = results[int(t)].centroids;
    w.k = 4;
    w.offset = offset;
    offset += 4;
  }
  vocab.validate();
  for (WaveType t : kWaveTypes) {
    const auto& pts = latents[int(t)];
    int64_t d = pts.shape()[1];
    for (int64_t i = 0; i < pts.shape()[0]; ++i) {
      int32_t tok = assign_token(vocab, t, pts.data() + i * d, d);
      EXPECT_EQ(tok, vocab.wave(t).offset + results[int(t)].assignments[i]);
    }
  }
}

TEST(AssignToken, TieBreaksToLowestCluster) {
  WaveVocabulary vocab;
  int32_t offset = kFirstWaveToken;
  for (WaveType t : kWaveTypes) {
    auto& w = vocab.wave(t);
    w.centroids = matrix({{-1}, {1}});
    w.k = 2;
    w.offset = offset;
    offset += 2;
  }
  vocab.validate();
  EXPECT_EQ(assign_token(vocab, WaveType::P, std::vector<float>{0.0f}), 5);
  EXPECT_EQ(assign_token(vocab, WaveType::QRS, std::vector<float>{0.0f}), 7);
}

TEST(AssignToken, RejectsDimensionMismatch) {
  auto latents = clustered_latents(2, 6, 700);
  VocabBuildSpec spec;
  spec.k_p = 2;
  spec.k_qrs = 2;
  spec.k_t = 2;
  auto vocab = build_vocabulary(latents, spec);
  std::vector<float> wrong{1.0f, 2.0f, 3.0f};
  EXPECT_THROW(assign_token(vocab, WaveType::P, wrong), DataError);
}

TEST(VocabularyFile, RoundTripPreservesEverything) {
  auto latents = clustered_latents(3, 15, 800);
  VocabBuildSpec spec;
  spec.k_p = 3;
  spec.k_qrs = 2;
  spec.k_t = 4;
  spec.seed = 13;
  auto vocab = build_vocabulary(latents, spec);

  auto dir = std::filesystem::temp_directory_path() /
             ("ecglang_vocab_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto path = dir / "vocab.json";
  save_vocabulary(vocab, path);
  auto loaded = load_vocabulary(path);

  EXPECT_EQ(loaded.seed, vocab.seed);
  EXPECT_EQ(loaded.vocab_size(), vocab.vocab_size());
  for (WaveType t : kWaveTypes) {
    const auto& a = vocab.wave(t);
    const auto& b = loaded.wave(t);
    EXPECT_EQ(a.k, b.k);
    EXPECT_EQ(a.offset, b.offset);
    EXPECT_EQ(a.corpus_size, b.corpus_size);
    EXPECT_DOUBLE_EQ(a.wcss, b.wcss);
    EXPECT_DOUBLE_EQ(a.silhouette, b.silhouette);
    ASSERT_EQ(a.centroids.numel(), b.centroids.numel());
    for (int64_t i = 0; i < a.centroids.numel(); ++i)
      EXPECT_EQ(a.centroids.data()[i], b.centroids.data()[i]) << i;
  }
  std::filesystem::remove_all(dir);
}

TEST(VocabularyFile, MalformedFileRejected) {
  auto dir = std::filesystem::temp_directory_path() /
             ("ecglang_vocab_bad_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto path = dir / "vocab.json";
  io::write_text_atomic(path, "{\"version\": 1}\n");
  EXPECT_THROW(load_vocabulary(path), DataError);
  io::write_text_atomic(path, "not json");
  EXPECT_THROW(load_vocabulary(path), DataError);
  std::filesystem::remove_all(dir);
}
