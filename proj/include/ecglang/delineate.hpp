#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "ecglang/common.hpp"
#include "ecglang/record.hpp"

namespace ecglang::delineate {

struct DelineateConfig {
  // R detection
  int r_scale = 2;                 // dyadic level used for R search
  double rms_window_s = 2.0;       // rolling stats window
  double rms_factor = 0.3;         // gate vs rolling RMS
  double peak_factor = 0.5;        // gate vs rolling max modulus
  double max_pair_sep_s = 0.08;    // opposite-lobe spacing of a QRS pair
  double refractory_s = 0.2;
  double refine_window_s = 0.01;   // raw-signal argmax half-window
  double score_prune_frac = 0.5;   // drop candidates below this x median score

  // wave delineation
  int qrs_scale = 2;
  int pt_scale = 4;
  double qrs_halfwin_s = 0.10;
  double gamma_on = 0.05;
  double gamma_off = 0.09;
  double lobe_threshold = 0.1;     // lobe counts toward QRS extent
  double t_start_s = 0.08;
  double t_max_end_s = 0.60;
  double t_rr_frac = 0.7;
  double p_start_s = 0.22;         // window [R - p_start, R - p_end]
  double p_end_s = 0.06;
  double min_window_s = 0.04;
  // a wave is present when its window's peak modulus clears this multiple
  // of the per-scale noise floor (noise measured at scale 1, propagated
  // through the kernel norms)
  double presence_theta = 4.0;
  double noise_floor_mult = 1.0;   // boundary scans stop at this floor too
};

// One undecimated-transform kernel: y[n] = sum_i taps[i] * x[n + offset0 + i]
// with replicate boundary handling.
struct AtrousKernel {
  int64_t offset0 = 0;
  std::vector<double> taps;

  double sum_squares() const {
    double s = 0;
    for (double t : taps) s += t * t;
    return s;
  }
};

namespace detail {

struct SparseFilter {
  std::vector<int64_t> offsets;
  std::vector<double> taps;
};

inline SparseFilter convolve(const SparseFilter& a, const SparseFilter& b) {
  int64_t lo_a = *std::min_element(a.offsets.begin(), a.offsets.end());
  int64_t hi_a = *std::max_element(a.offsets.begin(), a.offsets.end());
  int64_t lo_b = *std::min_element(b.offsets.begin(), b.offsets.end());
  int64_t hi_b = *std::max_element(b.offsets.begin(), b.offsets.end());
  int64_t lo = lo_a + lo_b, hi = hi_a + hi_b;
  std::vector<double> dense(hi - lo + 1, 0.0);
  for (size_t i = 0; i < a.offsets.size(); ++i)
    for (size_t j = 0; j < b.offsets.size(); ++j)
      dense[a.offsets[i] + b.offsets[j] - lo] += a.taps[i] * b.taps[j];
  SparseFilter out;
  for (int64_t k = 0; k < static_cast<int64_t>(dense.size()); ++k)
    if (dense[k] != 0.0) {
      out.offsets.push_back(lo + k);
      out.taps.push_back(dense[k]);
    }
  return out;
}

inline SparseFilter upsample(const SparseFilter& f, int64_t factor) {
  SparseFilter out = f;
  for (auto& o : out.offsets) o *= factor;
  return out;
}

}  // namespace detail

// Quadratic-spline derivative wavelet, a trous scheme. Smoothing filter
// h = [1,3,3,1]/8 at offsets -1..2, difference g at offsets {0,1} with taps
// {-2,+2}. Each scale's kernel is realigned so its center of mass sits at
// +0.5 samples, uniformly across scales.
inline std::vector<AtrousKernel> atrous_kernels(int n_scales) {
  if (n_scales < 1) throw ConfigError("dwt: n_scales must be >= 1");
  detail::SparseFilter h{{-1, 0, 1, 2}, {0.125, 0.375, 0.375, 0.125}};
  detail::SparseFilter g{{0, 1}, {-2.0, 2.0}};
  detail::SparseFilter smooth{{0}, {1.0}};
  std::vector<AtrousKernel> kernels;
  for (int j = 1; j <= n_scales; ++j) {
    int64_t spacing = int64_t(1) << (j - 1);
    detail::SparseFilter wj =
        detail::convolve(smooth, detail::upsample(g, spacing));
    int64_t shift = spacing - 1;  // restores the half-sample group delay
    int64_t lo = *std::min_element(wj.offsets.begin(), wj.offsets.end());
    int64_t hi = *std::max_element(wj.offsets.begin(), wj.offsets.end());
    AtrousKernel k;
    k.offset0 = lo - shift;
    k.taps.assign(hi - lo + 1, 0.0);
    for (size_t i = 0; i < wj.offsets.size(); ++i)
      k.taps[wj.offsets[i] - lo] = wj.taps[i];
    kernels.push_back(std::move(k));
    smooth = detail::convolve(smooth, detail::upsample(h, spacing));
  }
  return kernels;
}

inline std::vector<double> apply_kernel(const std::vector<double>& x,
                                        const AtrousKernel& k) {
  int64_t n = static_cast<int64_t>(x.size());
  std::vector<double> y(n, 0.0);
  if (n == 0) return y;
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0;
    for (int64_t t = 0; t < static_cast<int64_t>(k.taps.size()); ++t) {
      int64_t idx = std::clamp<int64_t>(i + k.offset0 + t, 0, n - 1);
      acc += k.taps[t] * x[idx];
    }
    y[i] = acc;
  }
  return y;
}

inline std::vector<std::vector<double>> dwt_transform(
    const std::vector<double>& x, int n_scales) {
  auto kernels = atrous_kernels(n_scales);
  std::vector<std::vector<double>> scales;
  scales.reserve(kernels.size());
  for (const auto& k : kernels) scales.push_back(apply_kernel(x, k));
  return scales;
}

inline std::vector<std::vector<double>> dwt_transform(
    const std::vector<float>& x, int n_scales) {
  return dwt_transform(std::vector<double>(x.begin(), x.end()), n_scales);
}

namespace detail {

// Half-normal median -> sigma; robust noise level of a detail sequence.
inline double noise_sigma(const std::vector<double>& w) {
  std::vector<double> mag(w.size());
  for (size_t i = 0; i < w.size(); ++i) mag[i] = std::abs(w[i]);
  if (mag.empty()) return 0.0;
  size_t mid = mag.size() / 2;
  std::nth_element(mag.begin(), mag.begin() + mid, mag.end());
  return mag[mid] / 0.6745;
}

// Noise floor per scale: sigma measured at scale 1, propagated by kernel
// L2 norms (white-noise model).
inline std::vector<double> noise_floor_per_scale(
    const std::vector<std::vector<double>>& scales,
    const std::vector<AtrousKernel>& kernels) {
  double s1 = noise_sigma(scales[0]);
  double k1 = std::sqrt(kernels[0].sum_squares());
  std::vector<double> floors(scales.size());
  for (size_t j = 0; j < scales.size(); ++j)
    floors[j] = s1 * std::sqrt(kernels[j].sum_squares()) / k1;
  return floors;
}

inline std::vector<double> rolling_rms(const std::vector<double>& w,
                                       int64_t radius) {
  int64_t n = static_cast<int64_t>(w.size());
  std::vector<double> prefix(n + 1, 0.0);
  for (int64_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + w[i] * w[i];
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) {
    int64_t lo = std::max<int64_t>(0, i - radius);
    int64_t hi = std::min<int64_t>(n - 1, i + radius);
    out[i] = std::sqrt((prefix[hi + 1] - prefix[lo]) /
                       static_cast<double>(hi - lo + 1));
  }
  return out;
}

inline std::vector<double> rolling_max_abs(const std::vector<double>& w,
                                           int64_t radius) {
  int64_t n = static_cast<int64_t>(w.size());
  std::vector<double> out(n);
  std::deque<int64_t> dq;
  int64_t hi = -1;
  for (int64_t i = 0; i < n; ++i) {
    int64_t want_hi = std::min<int64_t>(n - 1, i + radius);
    while (hi < want_hi) {
      ++hi;
      while (!dq.empty() && std::abs(w[dq.back()]) <= std::abs(w[hi]))
        dq.pop_back();
      dq.push_back(hi);
    }
    int64_t lo = std::max<int64_t>(0, i - radius);
    while (dq.front() < lo) dq.pop_front();
    out[i] = std::abs(w[dq.front()]);
  }
  return out;
}

struct Maximum {
  int64_t pos;
  double val;  // signed detail value
};

// Local maxima of |w| above a pointwise gate.
inline std::vector<Maximum> modulus_maxima(const std::vector<double>& w,
                                           const std::vector<double>& gate) {
  std::vector<Maximum> out;
  int64_t n = static_cast<int64_t>(w.size());
  for (int64_t i = 1; i + 1 < n; ++i) {
    double a = std::abs(w[i]);
    if (a >= std::abs(w[i - 1]) && a > std::abs(w[i + 1]) && a > gate[i])
      out.push_back({i, w[i]});
  }
  return out;
}

inline int64_t zero_crossing_between(const std::vector<double>& w, int64_t a,
                                     int64_t b) {
  for (int64_t i = a; i < b; ++i)
    if ((w[i] >= 0) != (w[i + 1] >= 0))
      return std::abs(w[i]) <= std::abs(w[i + 1]) ? i : i + 1;
  // no sign change (should not happen for a true pair); take the minimum
  int64_t best = a;
  for (int64_t i = a; i <= b; ++i)
    if (std::abs(w[i]) < std::abs(w[best])) best = i;
  return best;
}

}  // namespace detail

inline std::vector<int64_t> detect_r_peaks(const std::vector<float>& x, int fs,
                                           const DelineateConfig& cfg = {}) {
  int64_t n = static_cast<int64_t>(x.size());
  int64_t window = static_cast<int64_t>(std::llround(cfg.rms_window_s * fs));
  if (n < window)
    throw DataError("detect_r_peaks: signal shorter than the analysis window");
  auto kernels = atrous_kernels(cfg.r_scale);
  std::vector<double> xd(x.begin(), x.end());
  std::vector<double> w = apply_kernel(xd, kernels[cfg.r_scale - 1]);

  int64_t radius = window / 2;
  auto rms = detail::rolling_rms(w, radius);
  auto rmax = detail::rolling_max_abs(w, radius);
  std::vector<double> gate(n);
  for (int64_t i = 0; i < n; ++i)
    gate[i] = std::max({cfg.rms_factor * rms[i], cfg.peak_factor * rmax[i],
                        1e-12});
  auto maxima = detail::modulus_maxima(w, gate);

  int64_t max_sep = static_cast<int64_t>(std::llround(cfg.max_pair_sep_s * fs));
  int64_t refine = static_cast<int64_t>(std::llround(cfg.refine_window_s * fs));
  int64_t refractory = static_cast<int64_t>(std::llround(cfg.refractory_s * fs));

  struct Candidate {
    int64_t pos;
    double score;
  };
  std::vector<Candidate> accepted;
  for (size_t i = 0; i + 1 < maxima.size(); ++i) {
    const auto& m1 = maxima[i];
    const auto& m2 = maxima[i + 1];
    if ((m1.val > 0) == (m2.val > 0)) continue;
    if (m2.pos - m1.pos > max_sep) continue;
    int64_t z = detail::zero_crossing_between(w, m1.pos, m2.pos);
    int64_t lo = std::max<int64_t>(0, z - refine);
    int64_t hi = std::min<int64_t>(n - 1, z + refine);
    int64_t peak = lo;
    for (int64_t k = lo; k <= hi; ++k)
      if (std::abs(xd[k]) > std::abs(xd[peak])) peak = k;
    double score = std::min(std::abs(m1.val), std::abs(m2.val));
    // lobes are not consumed: a noise lobe pairing into a QRS lobe yields a
    // weak shifted candidate that the true pair then displaces by score
    if (!accepted.empty() && peak - accepted.back().pos < refractory) {
      if (score > accepted.back().score) accepted.back() = {peak, score};
    } else {
      accepted.push_back({peak, score});
    }
  }
  // beat-amplitude consistency: stray noise pairs score far below the
  // median accepted beat
  if (accepted.size() >= 3 && cfg.score_prune_frac > 0) {
    std::vector<double> scores;
    for (const auto& c : accepted) scores.push_back(c.score);
    size_t mid = scores.size() / 2;
    std::nth_element(scores.begin(), scores.begin() + mid, scores.end());
    double cut = cfg.score_prune_frac * scores[mid];
    std::erase_if(accepted,
                  [&](const Candidate& c) { return c.score < cut; });
  }
  std::vector<int64_t> peaks;
  peaks.reserve(accepted.size());
  for (const auto& c : accepted) peaks.push_back(c.pos);
  return peaks;
}

namespace detail {

// Scan outward from a lobe until the modulus falls to the stop level.
inline int64_t scan_boundary(const std::vector<double>& w, int64_t from,
                             int64_t limit, int step, double stop_level) {
  int64_t k = from;
  while (k != limit && std::abs(w[k]) > stop_level) k += step;
  return k;
}

struct WaveFind {
  bool present = false;
  Fiducial fid;
};

// Locate one monophasic wave inside [lo, hi]: dominant modulus maximum,
// opposite-sign partner, zero crossing as the peak, gamma-scan boundaries.
inline WaveFind find_wave(const std::vector<double>& w, int64_t lo, int64_t hi,
                          double presence_level, double stop_floor,
                          double gamma_on, double gamma_off) {
  WaveFind out;
  int64_t n = static_cast<int64_t>(w.size());
  lo = std::clamp<int64_t>(lo, 0, n - 1);
  hi = std::clamp<int64_t>(hi, 0, n - 1);
  if (hi <= lo) return out;
  // Both lobes must be interior local maxima; a monotone tail of a
  // neighboring wave entering through the window edge never qualifies.
  auto is_local_max = [&](int64_t i) {
    return i >= 1 && i <= n - 2 && std::abs(w[i]) >= std::abs(w[i - 1]) &&
           std::abs(w[i]) > std::abs(w[i + 1]);
  };
  int64_t m1 = -1;
  for (int64_t i = lo; i <= hi; ++i)
    if (is_local_max(i) && (m1 < 0 || std::abs(w[i]) > std::abs(w[m1])))
      m1 = i;
  if (m1 < 0 || std::abs(w[m1]) < presence_level) return out;
  // strongest opposite-sign local max in the window
  int64_t m2 = -1;
  for (int64_t i = lo; i <= hi; ++i) {
    if ((w[i] > 0) == (w[m1] > 0)) continue;
    if (is_local_max(i) && (m2 < 0 || std::abs(w[i]) > std::abs(w[m2])))
      m2 = i;
  }
  if (m2 < 0) return out;
  int64_t first = std::min(m1, m2), last = std::max(m1, m2);
  int64_t peak = zero_crossing_between(w, first, last);
  int64_t onset = scan_boundary(
      w, first, std::max<int64_t>(0, lo - (hi - lo)), -1,
      std::max(gamma_on * std::abs(w[first]), stop_floor));
  int64_t offset = scan_boundary(
      w, last, std::min<int64_t>(n - 1, hi + (hi - lo)), +1,
      std::max(gamma_off * std::abs(w[last]), stop_floor));
  if (!(onset < peak && peak < offset)) return out;
  out.present = true;
  out.fid = {onset, peak, offset};
  return out;
}

}  // namespace detail

inline std::vector<BeatFiducials> delineate_beats(
    const std::vector<float>& x, int fs, const std::vector<int64_t>& r_peaks,
    const DelineateConfig& cfg = {}) {
  int64_t n = static_cast<int64_t>(x.size());
  std::vector<BeatFiducials> beats;
  if (r_peaks.empty()) return beats;
  int n_scales = std::max(cfg.qrs_scale, cfg.pt_scale);
  std::vector<double> xd(x.begin(), x.end());
  auto kernels = atrous_kernels(n_scales);
  auto scales = dwt_transform(xd, n_scales);
  auto floors = detail::noise_floor_per_scale(scales, kernels);
  const auto& wq = scales[cfg.qrs_scale - 1];
  const auto& wp = scales[cfg.pt_scale - 1];
  double qrs_floor = cfg.noise_floor_mult * floors[cfg.qrs_scale - 1];
  double pt_floor = cfg.noise_floor_mult * floors[cfg.pt_scale - 1];
  double pt_presence = cfg.presence_theta * floors[cfg.pt_scale - 1];
  int64_t min_win = static_cast<int64_t>(std::llround(cfg.min_window_s * fs));

  for (size_t bi = 0; bi < r_peaks.size(); ++bi) {
    int64_t r = r_peaks[bi];
    BeatFiducials beat;
    beat.r_peak = r;

    // QRS extent: lobes above lobe_threshold x window max around R
    int64_t qlo = std::max<int64_t>(0, r - static_cast<int64_t>(std::llround(
                                            cfg.qrs_halfwin_s * fs)));
    int64_t qhi = std::min<int64_t>(
        n - 1, r + static_cast<int64_t>(std::llround(cfg.qrs_halfwin_s * fs)));
    double wmax = 0;
    for (int64_t i = qlo; i <= qhi; ++i)
      wmax = std::max(wmax, std::abs(wq[i]));
    if (wmax > 0) {
      double lobe_level = cfg.lobe_threshold * wmax;
      int64_t first = -1, last = -1;
      for (int64_t i = std::max(qlo, int64_t(1)); i <= std::min(qhi, n - 2);
           ++i) {
        double a = std::abs(wq[i]);
        if (a >= std::abs(wq[i - 1]) && a > std::abs(wq[i + 1]) &&
            a >= lobe_level) {
          if (first < 0) first = i;
          last = i;
        }
      }
      if (first >= 0 && last > first) {
        int64_t onset = detail::scan_boundary(
            wq, first, std::max<int64_t>(0, qlo - (qhi - qlo)), -1,
            std::max(cfg.gamma_on * std::abs(wq[first]), qrs_floor));
        int64_t offset = detail::scan_boundary(
            wq, last, std::min<int64_t>(n - 1, qhi + (qhi - qlo)), +1,
            std::max(cfg.gamma_off * std::abs(wq[last]), qrs_floor));
        if (onset < r && r < offset) beat.qrs = Fiducial{onset, r, offset};
      }
    }

    // T window end depends on the local RR interval
    double rr_s;
    if (bi + 1 < r_peaks.size())
      rr_s = static_cast<double>(r_peaks[bi + 1] - r) / fs;
    else if (bi > 0)
      rr_s = static_cast<double>(r - r_peaks[bi - 1]) / fs;
    else
      rr_s = cfg.t_max_end_s / cfg.t_rr_frac;
    double t_end_s = std::min(cfg.t_max_end_s, cfg.t_rr_frac * rr_s);
    int64_t tlo = r + static_cast<int64_t>(std::llround(cfg.t_start_s * fs));
    int64_t thi = r + static_cast<int64_t>(std::llround(t_end_s * fs));
    tlo = std::clamp<int64_t>(tlo, 0, n - 1);
    thi = std::clamp<int64_t>(thi, 0, n - 1);
    if (thi - tlo >= min_win) {
      auto t = detail::find_wave(wp, tlo, thi, pt_presence, pt_floor,
                                 cfg.gamma_on, cfg.gamma_off);
      if (t.present) {
        if (beat.qrs && t.fid.onset < beat.qrs->offset)
          t.fid.onset = beat.qrs->offset;
        if (t.fid.onset < t.fid.peak && t.fid.peak < t.fid.offset)
          beat.t = t.fid;
      }
    }

    int64_t plo = r - static_cast<int64_t>(std::llround(cfg.p_start_s * fs));
    int64_t phi = r - static_cast<int64_t>(std::llround(cfg.p_end_s * fs));
    plo = std::clamp<int64_t>(plo, 0, n - 1);
    phi = std::clamp<int64_t>(phi, 0, n - 1);
    if (phi - plo >= min_win) {
      auto p = detail::find_wave(wp, plo, phi, pt_presence, pt_floor,
                                 cfg.gamma_on, cfg.gamma_off);
      if (p.present) {
        if (beat.qrs && p.fid.offset > beat.qrs->onset)
          p.fid.offset = beat.qrs->onset;
        if (p.fid.onset < p.fid.peak && p.fid.peak < p.fid.offset)
          beat.p = p.fid;
      }
    }

    beats.push_back(beat);
  }
  return beats;
}

// ---------------------------------------------------------------------------
// segment extraction
// ---------------------------------------------------------------------------

struct SegmentLimits {
  double p_max_s = 0.2;
  double qrs_max_s = 0.2;
  double t_max_s = 0.4;

  double max_s(WaveType w) const {
    switch (w) {
      case WaveType::P:
        return p_max_s;
      case WaveType::QRS:
        return qrs_max_s;
      case WaveType::T:
        return t_max_s;
    }
    return t_max_s;
  }
};

struct ExtractResult {
  std::vector<WaveSegment> segments;
  int64_t n_dropped_degenerate = 0;
  int64_t n_truncated = 0;
};

// Cut [onset..offset] inclusive per present wave, truncate symmetrically
// around the peak to the per-type cap, z-score each segment.
inline ExtractResult extract_segments(const std::vector<float>& x,
                                      const std::vector<BeatFiducials>& beats,
                                      int fs, const std::string& record_id,
                                      const SegmentLimits& limits = {}) {
  ExtractResult out;
  int64_t n = static_cast<int64_t>(x.size());
  for (size_t bi = 0; bi < beats.size(); ++bi) {
    for (WaveType wt : kWaveTypes) {
      const auto& f = beats[bi].wave(wt);
      if (!f) continue;
      int64_t onset = std::clamp<int64_t>(f->onset, 0, n - 1);
      int64_t offset = std::clamp<int64_t>(f->offset, 0, n - 1);
      if (offset - onset < 2) {
        ++out.n_dropped_degenerate;
        continue;
      }
      int64_t max_len =
          static_cast<int64_t>(std::llround(limits.max_s(wt) * fs));
      max_len = std::max<int64_t>(max_len, 3);
      int64_t lo = onset, hi = offset;
      if (hi - lo + 1 > max_len) {
        ++out.n_truncated;
        int64_t peak = std::clamp<int64_t>(f->peak, lo, hi);
        lo = std::clamp<int64_t>(peak - max_len / 2, onset,
                                 offset - max_len + 1);
        hi = lo + max_len - 1;
      }
      WaveSegment seg;
      seg.wave_type = wt;
      seg.record_id = record_id;
      seg.beat_idx = static_cast<int>(bi);
      seg.samples.assign(x.begin() + lo, x.begin() + hi + 1);
      double mean = 0;
      for (float v : seg.samples) mean += v;
      mean /= static_cast<double>(seg.samples.size());
      double var = 0;
      for (float v : seg.samples) var += (v - mean) * (v - mean);
      var /= static_cast<double>(seg.samples.size());
      double sd = std::sqrt(var);
      double inv = sd > 1e-6 ? 1.0 / sd : 1.0;
      for (auto& v : seg.samples)
        v = static_cast<float>((v - mean) * inv);
      out.segments.push_back(std::move(seg));
    }
  }
  return out;
}

}  // namespace ecglang::delineate
