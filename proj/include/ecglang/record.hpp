#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ecglang/common.hpp"

namespace ecglang {

enum class WaveType { P, QRS, T };

inline const char* wave_name(WaveType t) {
  switch (t) {
    case WaveType::P:
      return "P";
    case WaveType::QRS:
      return "QRS";
    case WaveType::T:
      return "T";
  }
  return "?";
}

inline WaveType wave_from_name(const std::string& s) {
  if (s == "P") return WaveType::P;
  if (s == "QRS") return WaveType::QRS;
  if (s == "T") return WaveType::T;
  throw ConfigError("unknown wave type: " + s);
}

inline constexpr WaveType kWaveTypes[] = {WaveType::P, WaveType::QRS,
                                          WaveType::T};

struct LabelSet {
  std::vector<std::string> names;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& n : names) {
      if (n.empty()) throw DataError("label set: empty label name");
      if (!seen.insert(n).second)
        throw DataError("label set: duplicate label name: " + n);
    }
  }

  int64_t size() const { return static_cast<int64_t>(names.size()); }
};

// One single-lead ECG record, samples in millivolts.
struct EcgRecord {
  std::string record_id;
  std::vector<float> samples;
  int fs = 0;
  std::optional<std::vector<uint8_t>> labels;  // multi-hot over a LabelSet

  void validate(int64_t n_labels = -1) const {
    if (record_id.empty()) throw DataError("record with empty id");
    if (samples.empty()) throw DataError(record_id + ": samples empty");
    if (fs <= 0)
      throw DataError(record_id + ": fs must be positive, got " +
                      std::to_string(fs));
    for (size_t i = 0; i < samples.size(); ++i)
      if (!std::isfinite(samples[i]))
        throw DataError(record_id + ": non-finite sample at index " +
                        std::to_string(i));
    if (labels) {
      if (n_labels >= 0 && static_cast<int64_t>(labels->size()) != n_labels)
        throw DataError(record_id + ": label vector length " +
                        std::to_string(labels->size()) +
                        " does not match label set size " +
                        std::to_string(n_labels));
      for (uint8_t v : *labels)
        if (v > 1)
          throw DataError(record_id + ": label values must be 0 or 1");
    }
  }

  double duration_s() const {
    return static_cast<double>(samples.size()) / fs;
  }
};

// Sample-index positions of one wave: onset < peak < offset.
struct Fiducial {
  int64_t onset = 0;
  int64_t peak = 0;
  int64_t offset = 0;
};

struct BeatFiducials {
  std::optional<Fiducial> p;
  std::optional<Fiducial> qrs;
  std::optional<Fiducial> t;
  int64_t r_peak = 0;

  const std::optional<Fiducial>& wave(WaveType w) const {
    switch (w) {
      case WaveType::P:
        return p;
      case WaveType::T:
        return t;
      default:
        return qrs;
    }
  }
  std::optional<Fiducial>& wave(WaveType w) {
    return const_cast<std::optional<Fiducial>&>(
        static_cast<const BeatFiducials*>(this)->wave(w));
  }

  void validate(int64_t n_samples) const {
    for (WaveType w : kWaveTypes) {
      const auto& f = wave(w);
      if (!f) continue;
      if (!(f->onset < f->peak && f->peak < f->offset))
        throw DataError(std::string("fiducials out of order for ") +
                        wave_name(w));
      if (f->onset < 0 || f->offset >= n_samples)
        throw DataError(std::string(wave_name(w)) +
                        " fiducials outside record bounds");
    }
    if (p && qrs && p->offset > qrs->onset)
      throw DataError("P offset after QRS onset");
    if (qrs && t && qrs->offset > t->onset)
      throw DataError("QRS offset after T onset");
  }
};

// A delineated wave snippet cut from a record.
struct WaveSegment {
  WaveType wave_type = WaveType::P;
  std::vector<float> samples;
  std::string record_id;
  int beat_idx = 0;
};

// Parameters of one Gaussian bump of the synthetic morphology model.
struct GaussianBump {
  double amp_mv = 0;     // signed amplitude
  double sigma_s = 0;    // width
  double center_s = 0;   // absolute position in the record
};

struct SyntheticGroundTruth {
  std::string record_id;
  std::vector<BeatFiducials> beats;
  // five bumps per beat in P, Q, R, S, T order; P slot present but zeroed
  // for absent_p records
  std::vector<std::vector<GaussianBump>> bump_params;

  void validate(int64_t n_samples) const {
    int64_t prev_r = -1;
    for (const auto& b : beats) {
      b.validate(n_samples);
      if (b.r_peak <= prev_r)
        throw DataError(record_id + ": beats not in temporal order");
      prev_r = b.r_peak;
    }
  }
};

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
  double label_fraction = 1.0;
  uint64_t seed = 0;
  bool stratify = false;

  void validate() const {
    auto in_open = [](double f) { return f > 0.0 && f < 1.0; };
    if (!in_open(train) || !in_open(val) || !in_open(test))
      throw ConfigError("split fractions must each lie in (0, 1)");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
    if (!(label_fraction > 0.0 && label_fraction <= 1.0))
      throw ConfigError("label_fraction must lie in (0, 1]");
  }
};

}  // namespace ecglang
