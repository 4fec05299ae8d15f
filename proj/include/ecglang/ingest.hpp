#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ecglang/common.hpp"
#include "ecglang/io.hpp"
#include "ecglang/record.hpp"
#include "ecglang/rng.hpp"

namespace ecglang::ingest {

namespace fs = std::filesystem;
using nlohmann::json;

// A dataset directory: manifest.json + signals.bin (+ labels.bin when the
// manifest declares label names).
struct Dataset {
  int fs = 500;
  LabelSet label_set;
  std::vector<EcgRecord> records;

  void validate() const {
    label_set.validate();
    std::set<std::string> ids;
    for (const auto& r : records) {
      r.validate(label_set.size());
      if (!ids.insert(r.record_id).second)
        throw DataError("duplicate record id: " + r.record_id);
      if (label_set.size() > 0 && !r.labels)
        throw DataError(r.record_id +
                        ": dataset declares labels but record has none");
    }
  }
};

inline void write_records(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  std::vector<uint8_t> signals;
  json manifest;
  manifest["version"] = 1;
  manifest["fs"] = ds.fs;
  manifest["label_names"] = ds.label_set.names;
  json recs = json::array();
  for (const auto& r : ds.records) {
    json jr;
    jr["id"] = r.record_id;
    jr["n_samples"] = r.samples.size();
    jr["offset"] = signals.size();
    if (r.fs != ds.fs) jr["fs"] = r.fs;
    recs.push_back(jr);
    for (float v : r.samples) io::append_f32le(signals, v);
  }
  manifest["records"] = recs;
  io::write_binary_atomic(dir / "signals.bin", signals.data(), signals.size());
  if (ds.label_set.size() > 0) {
    std::vector<uint8_t> labels;
    labels.reserve(ds.records.size() * ds.label_set.size());
    for (const auto& r : ds.records)
      labels.insert(labels.end(), r.labels->begin(), r.labels->end());
    io::write_binary_atomic(dir / "labels.bin", labels.data(), labels.size());
  }
  io::write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Dataset read_records(const fs::path& dir) {
  fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath))
    throw DataError("missing manifest: " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(io::read_text(mpath));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (manifest.at("version").get<int>() != 1)
      throw DataError("unsupported manifest version in " + mpath.string());
    ds.fs = manifest.at("fs").get<int>();
    ds.label_set.names =
        manifest.at("label_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  auto signals = io::read_binary(dir / "signals.bin");
  std::vector<uint8_t> labels;
  if (ds.label_set.size() > 0) labels = io::read_binary(dir / "labels.bin");

  const auto& recs = manifest.at("records");
  size_t rec_idx = 0;
  for (const auto& jr : recs) {
    EcgRecord r;
    try {
      r.record_id = jr.at("id").get<std::string>();
      r.fs = jr.contains("fs") ? jr.at("fs").get<int>() : ds.fs;
      size_t n = jr.at("n_samples").get<size_t>();
      size_t offset = jr.at("offset").get<size_t>();
      if (offset + n * 4 > signals.size())
        throw DataError(r.record_id + ": signals.bin too short at byte offset " +
                        std::to_string(offset));
      r.samples.resize(n);
      for (size_t i = 0; i < n; ++i)
        r.samples[i] = io::read_f32le(signals.data() + offset + i * 4);
    } catch (const json::exception& e) {
      throw DataError("malformed record entry " + std::to_string(rec_idx) +
                      " in " + mpath.string() + ": " + e.what());
    }
    if (ds.label_set.size() > 0) {
      size_t lw = static_cast<size_t>(ds.label_set.size());
      if ((rec_idx + 1) * lw > labels.size())
        throw DataError(r.record_id + ": labels.bin too short");
      r.labels = std::vector<uint8_t>(labels.begin() + rec_idx * lw,
                                      labels.begin() + (rec_idx + 1) * lw);
    }
    ds.records.push_back(std::move(r));
    ++rec_idx;
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

enum class RhythmClass { regular, irregular_rr, absent_p };

inline const char* rhythm_name(RhythmClass r) {
  switch (r) {
    case RhythmClass::regular:
      return "regular";
    case RhythmClass::irregular_rr:
      return "irregular_rr";
    case RhythmClass::absent_p:
      return "absent_p";
  }
  return "?";
}

inline RhythmClass rhythm_from_name(const std::string& s) {
  if (s == "regular") return RhythmClass::regular;
  if (s == "irregular_rr") return RhythmClass::irregular_rr;
  if (s == "absent_p") return RhythmClass::absent_p;
  throw ConfigError("unknown rhythm class: " + s);
}

struct SynthConfig {
  int n_records = 1;
  int fs = 500;
  double duration_s = 10.0;
  RhythmClass rhythm = RhythmClass::regular;
  uint64_t seed = 0;
  double noise_std_mv = 0.005;
  double hr_min_bpm = 50.0;
  double hr_max_bpm = 84.0;
  double amp_jitter = 0.05;
  double sigma_jitter = 0.03;
  std::string id_prefix = "synth";

  void validate() const {
    if (n_records < 1) throw ConfigError("synth: n_records must be >= 1");
    if (fs <= 0) throw ConfigError("synth: fs must be positive");
    if (duration_s * fs < fs)  // at least one second; one beat needs ~1.1 s
      throw ConfigError("synth: duration too short");
    if (hr_min_bpm <= 0 || hr_max_bpm < hr_min_bpm)
      throw ConfigError("synth: invalid heart-rate range");
    if (noise_std_mv < 0) throw ConfigError("synth: negative noise");
  }
};

namespace detail {

// Relative bump template per beat: amplitude (mV), width sigma (s), center
// offset from the R peak (s). Order: P, Q, R, S, T.
struct BumpTemplate {
  double amp, sigma, center;
};
inline constexpr BumpTemplate kBeatTemplate[5] = {
    {0.20, 0.022, -0.160},  // P
    {-0.12, 0.008, -0.030},  // Q
    {1.00, 0.012, 0.000},    // R
    {-0.18, 0.009, 0.030},   // S
    {0.35, 0.045, 0.300},    // T
};

// Margins that keep every fiducial inside the record.
inline constexpr double kLeadInS = 0.55;   // first R placed after this
inline constexpr double kLeadOutS = 0.52;  // last R needs this much tail

inline int64_t to_sample(double t_s, int fs) {
  return static_cast<int64_t>(std::llround(t_s * fs));
}

}  // namespace detail

inline std::pair<std::vector<EcgRecord>, std::vector<SyntheticGroundTruth>>
generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<EcgRecord> records;
  std::vector<SyntheticGroundTruth> truths;
  Rng root(cfg.seed);
  int64_t n_samples = static_cast<int64_t>(std::llround(cfg.duration_s * cfg.fs));

  for (int rec = 0; rec < cfg.n_records; ++rec) {
    Rng rng = root.fork(static_cast<uint64_t>(rec));
    double hr = rng.uniform(cfg.hr_min_bpm, cfg.hr_max_bpm);
    double rr = 60.0 / hr;
    double r_center = detail::kLeadInS + rng.uniform(0.0, 0.10);

    std::vector<double> signal(n_samples, 0.0);
    SyntheticGroundTruth gt;
    gt.record_id = str_format("%s-%05d", cfg.id_prefix.c_str(), rec);

    while (r_center + detail::kLeadOutS <= cfg.duration_s) {
      std::vector<GaussianBump> bumps(5);
      for (int b = 0; b < 5; ++b) {
        const auto& t = detail::kBeatTemplate[b];
        double af = std::clamp(1.0 + cfg.amp_jitter * rng.normal(), 0.8, 1.2);
        double sf = std::clamp(1.0 + cfg.sigma_jitter * rng.normal(), 0.85, 1.15);
        bumps[b] = {t.amp * af, t.sigma * sf, r_center + t.center};
      }
      bool has_p = cfg.rhythm != RhythmClass::absent_p;
      if (!has_p) bumps[0].amp_mv = 0.0;

      for (int b = 0; b < 5; ++b) {
        const auto& g = bumps[b];
        if (g.amp_mv == 0.0) continue;
        int64_t lo = std::max<int64_t>(
            0, detail::to_sample(g.center_s - 5 * g.sigma_s, cfg.fs));
        int64_t hi = std::min<int64_t>(
            n_samples - 1, detail::to_sample(g.center_s + 5 * g.sigma_s, cfg.fs));
        for (int64_t i = lo; i <= hi; ++i) {
          double dt = static_cast<double>(i) / cfg.fs - g.center_s;
          signal[i] += g.amp_mv * std::exp(-dt * dt / (2 * g.sigma_s * g.sigma_s));
        }
      }

      BeatFiducials f;
      auto mark = [&](const GaussianBump& g) {
        return Fiducial{detail::to_sample(g.center_s - 3 * g.sigma_s, cfg.fs),
                        detail::to_sample(g.center_s, cfg.fs),
                        detail::to_sample(g.center_s + 3 * g.sigma_s, cfg.fs)};
      };
      if (has_p) f.p = mark(bumps[0]);
      f.qrs = Fiducial{
          detail::to_sample(bumps[1].center_s - 3 * bumps[1].sigma_s, cfg.fs),
          detail::to_sample(bumps[2].center_s, cfg.fs),
          detail::to_sample(bumps[3].center_s + 3 * bumps[3].sigma_s, cfg.fs)};
      f.t = mark(bumps[4]);
      f.r_peak = f.qrs->peak;
      gt.beats.push_back(f);
      gt.bump_params.push_back(std::move(bumps));

      double step = rr;
      if (cfg.rhythm == RhythmClass::irregular_rr) step *= rng.uniform(0.8, 1.25);
      r_center += step;
    }

    if (cfg.noise_std_mv > 0)
      for (auto& v : signal) v += rng.normal(0.0, cfg.noise_std_mv);

    EcgRecord r;
    r.record_id = gt.record_id;
    r.fs = cfg.fs;
    r.samples.resize(n_samples);
    for (int64_t i = 0; i < n_samples; ++i)
      r.samples[i] = static_cast<float>(signal[i]);
    gt.validate(n_samples);
    r.validate();
    records.push_back(std::move(r));
    truths.push_back(std::move(gt));
  }
  return {std::move(records), std::move(truths)};
}

inline std::pair<std::vector<EcgRecord>, std::vector<SyntheticGroundTruth>>
generate_synthetic(int n_records, int fs, double duration_s,
                   RhythmClass rhythm, uint64_t seed) {
  SynthConfig cfg;
  cfg.n_records = n_records;
  cfg.fs = fs;
  cfg.duration_s = duration_s;
  cfg.rhythm = rhythm;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<std::string> train;       // after label_fraction subsampling
  std::vector<std::string> train_full;  // the full train partition
  std::vector<std::string> val;
  std::vector<std::string> test;
};

inline SplitResult make_splits(const std::vector<EcgRecord>& records,
                               const SplitSpec& spec) {
  spec.validate();
  int64_t n = static_cast<int64_t>(records.size());
  if (n < 3) throw DataError("make_splits: need at least 3 records");

  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  int64_t n_train = std::llround(spec.train * static_cast<double>(n));
  int64_t n_val = std::llround(spec.val * static_cast<double>(n));
  n_train = std::clamp<int64_t>(n_train, 0, n);
  n_val = std::clamp<int64_t>(n_val, 0, n - n_train);

  SplitResult out;
  for (int64_t i = 0; i < n_train; ++i)
    out.train_full.push_back(records[order[i]].record_id);
  for (int64_t i = n_train; i < n_train + n_val; ++i)
    out.val.push_back(records[order[i]].record_id);
  for (int64_t i = n_train + n_val; i < n; ++i)
    out.test.push_back(records[order[i]].record_id);

  int64_t keep = std::max<int64_t>(
      1, static_cast<int64_t>(
             std::ceil(spec.label_fraction * static_cast<double>(n_train) -
                       1e-9)));
  keep = std::min(keep, n_train);

  if (!spec.stratify || keep == n_train) {
    out.train.assign(out.train_full.begin(), out.train_full.begin() + keep);
    return out;
  }

  // Stratified subsample: round-robin across labels over the shuffled train
  // order, then uniform fill from what is left.
  std::vector<int64_t> train_idx(order.begin(), order.begin() + n_train);
  int64_t n_labels = 0;
  for (int64_t i : train_idx)
    if (records[i].labels)
      n_labels = std::max<int64_t>(
          n_labels, static_cast<int64_t>(records[i].labels->size()));
  std::vector<std::deque<int64_t>> by_label(std::max<int64_t>(n_labels, 1));
  for (int64_t i : train_idx) {
    if (!records[i].labels) continue;
    for (int64_t l = 0; l < static_cast<int64_t>(records[i].labels->size());
         ++l)
      if ((*records[i].labels)[l]) by_label[l].push_back(i);
  }
  std::set<int64_t> chosen;
  int64_t label = 0;
  int64_t stale = 0;
  while (static_cast<int64_t>(chosen.size()) < keep && n_labels > 0 &&
         stale < n_labels) {
    auto& q = by_label[label % n_labels];
    bool took = false;
    while (!q.empty()) {
      int64_t cand = q.front();
      q.pop_front();
      if (chosen.insert(cand).second) {
        took = true;
        break;
      }
    }
    stale = took ? 0 : stale + 1;
    ++label;
  }
  for (int64_t i : train_idx) {
    if (static_cast<int64_t>(chosen.size()) >= keep) break;
    chosen.insert(i);
  }
  for (int64_t i : train_idx)
    if (chosen.count(i)) out.train.push_back(records[i].record_id);
  return out;
}

}  // namespace ecglang::ingest
