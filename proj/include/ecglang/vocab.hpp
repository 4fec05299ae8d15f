#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecglang/common.hpp"
#include "ecglang/io.hpp"
#include "ecglang/record.hpp"
#include "ecglang/rng.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::vocab {

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct KmeansResult {
  Tensor<float> centroids;        // (k, d)
  std::vector<int32_t> assignments;
  double wcss = 0;
  std::vector<double> wcss_trace;  // per Lloyd iteration, after assignment
};

namespace detail {

template <typename A, typename B>
inline double sq_dist(const A* a, const B* b, int64_t d) {
  double acc = 0;
  for (int64_t i = 0; i < d; ++i) {
    double diff = double(a[i]) - double(b[i]);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

// Lloyd iterations from k-means++ seeds. Assignments break ties toward the
// lowest centroid index; empty clusters keep their previous centroid.
inline KmeansResult kmeans(const Tensor<float>& points, int k, uint64_t seed,
                           int max_iter = 100, double tol = 1e-7) {
  if (points.shape().size() != 2)
    throw DataError("kmeans: points must be a (n, d) matrix");
  int64_t n = points.shape()[0], d = points.shape()[1];
  if (k < 1 || n < k)
    throw DataError(str_format("kmeans: need n >= k >= 1, got n=%lld k=%d",
                               static_cast<long long>(n), k));
  if (!points.all_finite()) throw DataError("kmeans: non-finite points");

  Rng rng(seed);
  const float* pts = points.data();

  // k-means++: first seed uniform, the rest sampled with probability
  // proportional to squared distance from the nearest chosen seed
  std::vector<int64_t> seeds;
  seeds.push_back(static_cast<int64_t>(rng.uniform_index(n)));
  std::vector<double> best_d2(n);
  for (int64_t i = 0; i < n; ++i)
    best_d2[i] = detail::sq_dist(pts + i * d, pts + seeds[0] * d, d);
  while (static_cast<int>(seeds.size()) < k) {
    double total = 0;
    for (double v : best_d2) total += v;
    int64_t next;
    if (total <= 0) {
      next = static_cast<int64_t>(rng.uniform_index(n));
    } else {
      double r = rng.uniform() * total;
      next = n - 1;
      double acc = 0;
      for (int64_t i = 0; i < n; ++i) {
        acc += best_d2[i];
        if (acc >= r) {
          next = i;
          break;
        }
      }
    }
    seeds.push_back(next);
    for (int64_t i = 0; i < n; ++i)
      best_d2[i] = std::min(best_d2[i],
                            detail::sq_dist(pts + i * d, pts + next * d, d));
  }

  std::vector<double> centroids(k * d);
  for (int c = 0; c < k; ++c)
    for (int64_t j = 0; j < d; ++j)
      centroids[c * d + j] = pts[seeds[c] * d + j];

  KmeansResult out;
  out.assignments.assign(n, 0);
  std::vector<double> sums(k * d);
  std::vector<int64_t> counts(k);

  auto assign_pass = [&]() {
    double wcss = 0;
    for (int64_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = detail::sq_dist(pts + i * d, centroids.data(), d);
      for (int c = 1; c < k; ++c) {
        double dd = detail::sq_dist(pts + i * d, centroids.data() + c * d, d);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      out.assignments[i] = best;
      wcss += bd;
    }
    out.wcss_trace.push_back(wcss);
    out.wcss = wcss;
  };

  for (int iter = 0; iter < max_iter; ++iter) {
    assign_pass();
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (int64_t i = 0; i < n; ++i) {
      int c = out.assignments[i];
      ++counts[c];
      for (int64_t j = 0; j < d; ++j) sums[c * d + j] += pts[i * d + j];
    }
    double shift = 0;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (int64_t j = 0; j < d; ++j) {
        double nc = sums[c * d + j] / static_cast<double>(counts[c]);
        double diff = nc - centroids[c * d + j];
        shift += diff * diff;
        centroids[c * d + j] = nc;
      }
    }
    if (std::sqrt(shift) < tol) break;
  }

  // final pass against the exported float centroids so stored assignments
  // match assign_token exactly
  out.centroids = Tensor<float>({static_cast<int64_t>(k), d});
  for (int64_t i = 0; i < static_cast<int64_t>(k * d); ++i)
    out.centroids.data()[i] = static_cast<float>(centroids[i]);
  const float* cf = out.centroids.data();
  double wcss = 0;
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    double bd = detail::sq_dist(pts + i * d, cf, d);
    for (int c = 1; c < k; ++c) {
      double dd = detail::sq_dist(pts + i * d, cf + c * d, d);
      if (dd < bd) {
        bd = dd;
        best = c;
      }
    }
    out.assignments[i] = best;
    wcss += bd;
  }
  out.wcss_trace.push_back(wcss);
  out.wcss = wcss;
  return out;
}

// Best of `restarts` runs: lowest wcss, ties keep the earliest restart.
inline KmeansResult kmeans_restarts(const Tensor<float>& points, int k,
                                    uint64_t seed, int restarts = 5,
                                    int max_iter = 100, double tol = 1e-7) {
  Rng root(seed);
  std::optional<KmeansResult> best;
  for (int r = 0; r < restarts; ++r) {
    uint64_t rs = root.fork(static_cast<uint64_t>(r)).next_u64();
    KmeansResult res = kmeans(points, k, rs, max_iter, tol);
    if (!best || res.wcss < best->wcss) best = std::move(res);
  }
  return *best;
}

// ---------------------------------------------------------------------------
// knee selection
// ---------------------------------------------------------------------------

struct KneeCurve {
  std::vector<int> ks;
  std::vector<double> wcss;

  void validate() const {
    if (ks.size() != wcss.size())
      throw DataError("knee curve: ks and wcss lengths differ");
    for (size_t i = 1; i < ks.size(); ++i)
      if (ks[i] <= ks[i - 1]) throw DataError("knee curve: ks not increasing");
    for (double w : wcss)
      if (!(w >= 0) || !std::isfinite(w))
        throw DataError("knee curve: wcss must be finite and non-negative");
  }
};

inline KneeCurve wcss_curve(const Tensor<float>& points,
                            const std::vector<int>& ks, uint64_t seed,
                            int restarts = 5) {
  KneeCurve curve;
  Rng root(seed);
  for (size_t i = 0; i < ks.size(); ++i) {
    uint64_t ks_seed = root.fork(static_cast<uint64_t>(i)).next_u64();
    KmeansResult res = kmeans_restarts(points, ks[i], ks_seed, restarts);
    curve.ks.push_back(ks[i]);
    curve.wcss.push_back(res.wcss);
  }
  curve.validate();
  return curve;
}

// Kneedle on a decreasing convex curve: min-max normalize both axes, flip the
// y axis so the knee becomes the maximum of d = (1 - y_norm) - x_norm.
// Returns nothing when the curve is flat or a straight line.
inline std::optional<int> find_knee(const KneeCurve& curve) {
  curve.validate();
  size_t m = curve.ks.size();
  if (m < 3) throw DataError("find_knee: need at least 3 curve points");
  double wmin = *std::min_element(curve.wcss.begin(), curve.wcss.end());
  double wmax = *std::max_element(curve.wcss.begin(), curve.wcss.end());
  if (wmax - wmin <= 0) return std::nullopt;
  double x0 = curve.ks.front(), x1 = curve.ks.back();
  double best_d = 0;
  std::optional<int> best_k;
  for (size_t i = 0; i < m; ++i) {
    double xn = (curve.ks[i] - x0) / (x1 - x0);
    double yn = (curve.wcss[i] - wmin) / (wmax - wmin);
    double d = (1.0 - yn) - xn;
    if (d > best_d + 1e-12) {
      best_d = d;
      best_k = curve.ks[i];
    }
  }
  if (best_d < 1e-9) return std::nullopt;
  return best_k;
}

// ---------------------------------------------------------------------------
// silhouette
// ---------------------------------------------------------------------------

// Standard silhouette, mean over points. Singleton clusters and a = b = 0
// contribute 0. Subsamples uniformly above max_points to bound the O(n^2).
inline double silhouette(const Tensor<float>& points,
                         const std::vector<int32_t>& assignments,
                         int64_t max_points = 10000, uint64_t seed = 0) {
  if (points.shape().size() != 2)
    throw DataError("silhouette: points must be a (n, d) matrix");
  int64_t n = points.shape()[0], d = points.shape()[1];
  if (static_cast<int64_t>(assignments.size()) != n)
    throw DataError("silhouette: assignment length mismatch");
  int k = 0;
  for (int32_t a : assignments) k = std::max(k, a + 1);
  std::vector<int64_t> cluster_count(k, 0);
  for (int32_t a : assignments) ++cluster_count[a];
  int nonempty = 0;
  for (int64_t c : cluster_count) nonempty += c > 0;
  if (nonempty < 2) throw DataError("silhouette: need at least 2 clusters");

  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  if (n > max_points) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(max_points);
    std::sort(idx.begin(), idx.end());
  }
  int64_t m = static_cast<int64_t>(idx.size());
  const float* pts = points.data();

  std::vector<int64_t> sub_count(k, 0);
  for (int64_t i : idx) ++sub_count[assignments[i]];

  double total = 0;
  std::vector<double> mean_to(k);
  for (int64_t ii = 0; ii < m; ++ii) {
    int64_t i = idx[ii];
    int ci = assignments[i];
    if (sub_count[ci] <= 1) continue;  // singleton contributes 0
    std::fill(mean_to.begin(), mean_to.end(), 0.0);
    for (int64_t jj = 0; jj < m; ++jj) {
      int64_t j = idx[jj];
      if (j == i) continue;
      mean_to[assignments[j]] +=
          std::sqrt(detail::sq_dist(pts + i * d, pts + j * d, d));
    }
    double a = mean_to[ci] / static_cast<double>(sub_count[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == ci || sub_count[c] == 0) continue;
      b = std::min(b, mean_to[c] / static_cast<double>(sub_count[c]));
    }
    double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

inline constexpr int32_t kPadToken = 0;
inline constexpr int32_t kMaskToken = 1;
inline constexpr int32_t kSepToken = 2;
inline constexpr int32_t kMissToken = 3;
inline constexpr int32_t kClsReservedToken = 4;
inline constexpr int32_t kFirstWaveToken = 5;

struct WaveVocabulary {
  struct PerWave {
    Tensor<float> centroids;  // (k, d)
    int k = 0;
    int32_t offset = 0;  // token ID of cluster 0
    double wcss = 0;
    double silhouette = 0;
    int64_t corpus_size = 0;
  };
  std::array<PerWave, 3> waves;  // indexed by WaveType order P, QRS, T
  uint64_t seed = 0;

  const PerWave& wave(WaveType t) const {
    return waves[static_cast<int>(t)];
  }
  PerWave& wave(WaveType t) { return waves[static_cast<int>(t)]; }

  int32_t vocab_size() const {
    return kFirstWaveToken + waves[0].k + waves[1].k + waves[2].k;
  }
  int32_t token_for(WaveType t, int cluster) const {
    const auto& w = wave(t);
    if (cluster < 0 || cluster >= w.k)
      throw DataError(str_format("token_for: cluster %d out of range for %s",
                                 cluster, wave_name(t)));
    return w.offset + cluster;
  }
  bool is_special(int32_t id) const { return id >= 0 && id < kFirstWaveToken; }
  bool is_wave_token(int32_t id) const {
    return id >= kFirstWaveToken && id < vocab_size();
  }
  WaveType wave_of(int32_t id) const {
    for (WaveType t : kWaveTypes) {
      const auto& w = wave(t);
      if (id >= w.offset && id < w.offset + w.k) return t;
    }
    throw DataError(str_format("wave_of: token %d is not a wave token", id));
  }
  int cluster_of(int32_t id) const {
    WaveType t = wave_of(id);
    return id - wave(t).offset;
  }

  void validate() const {
    int32_t expect = kFirstWaveToken;
    for (WaveType t : kWaveTypes) {
      const auto& w = wave(t);
      if (w.k < 1)
        throw DataError(std::string("vocabulary: k < 1 for ") + wave_name(t));
      if (w.offset != expect)
        throw DataError(std::string("vocabulary: bad offset for ") +
                        wave_name(t));
      if (w.centroids.shape().size() != 2 || w.centroids.shape()[0] != w.k)
        throw DataError(std::string("vocabulary: bad centroid shape for ") +
                        wave_name(t));
      if (!w.centroids.all_finite())
        throw DataError(std::string("vocabulary: non-finite centroids for ") +
                        wave_name(t));
      expect += w.k;
    }
  }
};

struct VocabBuildSpec {
  // fixed k per wave; unset selects k automatically via the knee of the
  // wcss curve, falling back to the per-wave default when no knee exists
  std::optional<int> k_p, k_qrs, k_t;
  int default_k_p = 13;
  int default_k_qrs = 11;
  int default_k_t = 10;
  int restarts = 5;
  int auto_k_max = 40;
  uint64_t seed = 0;

  std::optional<int> fixed_k(WaveType t) const {
    switch (t) {
      case WaveType::P:
        return k_p;
      case WaveType::QRS:
        return k_qrs;
      case WaveType::T:
        return k_t;
    }
    return std::nullopt;
  }
  int default_k(WaveType t) const {
    switch (t) {
      case WaveType::P:
        return default_k_p;
      case WaveType::QRS:
        return default_k_qrs;
      case WaveType::T:
        return default_k_t;
    }
    return default_k_t;
  }
};

inline WaveVocabulary build_vocabulary(
    const std::array<Tensor<float>, 3>& latents_per_wave,
    const VocabBuildSpec& spec = {}) {
  WaveVocabulary vocab;
  vocab.seed = spec.seed;
  Rng root(spec.seed);
  int32_t offset = kFirstWaveToken;
  for (WaveType t : kWaveTypes) {
    const auto& latents = latents_per_wave[static_cast<int>(t)];
    if (latents.shape().size() != 2 || latents.shape()[0] == 0)
      throw DataError(std::string("build_vocabulary: no latents for ") +
                      wave_name(t));
    int64_t n = latents.shape()[0];
    uint64_t wave_seed = root.fork(static_cast<uint64_t>(t)).next_u64();

    int k;
    if (auto fixed = spec.fixed_k(t)) {
      k = *fixed;
    } else {
      int k_hi = static_cast<int>(
          std::min<int64_t>(spec.auto_k_max, n - 1));
      if (k_hi < 2) {
        k = 1;
      } else {
        std::vector<int> ks;
        for (int kk = 2; kk <= k_hi; ++kk) ks.push_back(kk);
        KneeCurve curve = wcss_curve(latents, ks, wave_seed, spec.restarts);
        auto knee = find_knee(curve);
        k = knee ? *knee
                 : std::min<int>(spec.default_k(t), static_cast<int>(n));
      }
    }

    KmeansResult res =
        kmeans_restarts(latents, k, wave_seed, spec.restarts);
    auto& w = vocab.wave(t);
    w.centroids = res.centroids;
    w.k = k;
    w.offset = offset;
    w.wcss = res.wcss;
    w.corpus_size = n;
    w.silhouette =
        k >= 2 ? silhouette(latents, res.assignments, 10000, wave_seed) : 0.0;
    offset += k;
  }
  vocab.validate();
  return vocab;
}

// Nearest centroid by Euclidean distance, ties to the lowest cluster index.
inline int32_t assign_token(const WaveVocabulary& vocab, WaveType t,
                            const float* z, int64_t dim) {
  const auto& w = vocab.wave(t);
  if (dim != w.centroids.shape()[1])
    throw DataError(str_format(
        "assign_token: latent dim %lld does not match %s centroids (%lld)",
        static_cast<long long>(dim), wave_name(t),
        static_cast<long long>(w.centroids.shape()[1])));
  int best = 0;
  double bd = detail::sq_dist(z, w.centroids.data(), dim);
  for (int c = 1; c < w.k; ++c) {
    double dd = detail::sq_dist(z, w.centroids.data() + c * dim, dim);
    if (dd < bd) {
      bd = dd;
      best = c;
    }
  }
  return w.offset + best;
}

inline int32_t assign_token(const WaveVocabulary& vocab, WaveType t,
                            const std::vector<float>& z) {
  return assign_token(vocab, t, z.data(), static_cast<int64_t>(z.size()));
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline nlohmann::json vocabulary_to_json(const WaveVocabulary& vocab) {
  nlohmann::json j;
  j["version"] = 1;
  j["seed"] = vocab.seed;
  for (WaveType t : kWaveTypes) {
    const auto& w = vocab.wave(t);
    nlohmann::json jw;
    jw["k"] = w.k;
    jw["dim"] = w.centroids.shape()[1];
    jw["offset"] = w.offset;
    jw["wcss"] = w.wcss;
    jw["silhouette"] = w.silhouette;
    jw["corpus_size"] = w.corpus_size;
    jw["centroids"] = std::vector<float>(
        w.centroids.data(), w.centroids.data() + w.centroids.numel());
    j["waves"][wave_name(t)] = jw;
  }
  return j;
}

inline WaveVocabulary vocabulary_from_json(const nlohmann::json& j) {
  WaveVocabulary vocab;
  try {
    if (j.at("version").get<int>() != 1)
      throw DataError("vocabulary: unsupported version");
    vocab.seed = j.at("seed").get<uint64_t>();
    for (WaveType t : kWaveTypes) {
      const auto& jw = j.at("waves").at(wave_name(t));
      auto& w = vocab.wave(t);
      w.k = jw.at("k").get<int>();
      int64_t dim = jw.at("dim").get<int64_t>();
      w.offset = jw.at("offset").get<int32_t>();
      w.wcss = jw.at("wcss").get<double>();
      w.silhouette = jw.at("silhouette").get<double>();
      w.corpus_size = jw.at("corpus_size").get<int64_t>();
      auto flat = jw.at("centroids").get<std::vector<float>>();
      if (static_cast<int64_t>(flat.size()) != w.k * dim)
        throw DataError("vocabulary: centroid size mismatch");
      w.centroids = Tensor<float>({w.k, dim});
      std::copy(flat.begin(), flat.end(), w.centroids.data());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary file: ") + e.what());
  }
  vocab.validate();
  return vocab;
}

inline void save_vocabulary(const WaveVocabulary& vocab,
                            const std::filesystem::path& path) {
  io::write_text_atomic(path, vocabulary_to_json(vocab).dump(2) + "\n");
}

inline WaveVocabulary load_vocabulary(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed vocabulary file " + path.string() + ": " +
                    e.what());
  }
  return vocabulary_from_json(j);
}

}  // namespace ecglang::vocab
