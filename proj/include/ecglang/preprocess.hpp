#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "ecglang/common.hpp"
#include "ecglang/record.hpp"

namespace ecglang::preprocess {

struct FilterSpec {
  double highpass_cutoff = 0.5;
  int highpass_order = 2;
  double notch_freq = 50.0;
  double notch_q = 30.0;

  void validate(int fs) const {
    if (highpass_order < 1) throw ConfigError("filter: order must be >= 1");
    if (notch_q <= 0) throw ConfigError("filter: notch q must be positive");
    if (!(0 < highpass_cutoff && highpass_cutoff < notch_freq &&
          notch_freq < fs / 2.0))
      throw ConfigError(
          "filter: need 0 < highpass_cutoff < notch_freq < fs/2");
  }
};

// One second-order section, coefficients normalized to a0 = 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;
};

using Sos = std::vector<Biquad>;

namespace detail {

// Butterworth high-pass as cascaded biquads via the bilinear transform with
// cutoff pre-warping. Analog prototype poles are paired into conjugate
// sections; odd orders add one first-order section.
inline Sos butterworth_highpass_sos(double cutoff_hz, int order, int fs) {
  if (!(cutoff_hz > 0 && cutoff_hz < fs / 2.0))
    throw ConfigError("butterworth: cutoff must lie in (0, fs/2)");
  const double pi = 3.14159265358979323846;
  double wa = std::tan(pi * cutoff_hz / fs);  // pre-warped analog cutoff
  Sos sos;
  // complex-conjugate pole pairs of the analog low-pass prototype,
  // transformed to high-pass: q = wa / p
  int n_pairs = order / 2;
  for (int k = 0; k < n_pairs; ++k) {
    double theta = pi * (2.0 * k + 1.0) / (2.0 * order) + pi / 2.0;
    std::complex<double> p(std::cos(theta), std::sin(theta));
    std::complex<double> q = wa / p;
    std::complex<double> zp = (1.0 + q) / (1.0 - q);  // bilinear pole
    Biquad s;
    s.b0 = 1, s.b1 = -2, s.b2 = 1;  // two zeros at z = 1
    s.a1 = -2.0 * zp.real();
    s.a2 = std::norm(zp);
    // normalize section gain to 1 at Nyquist (z = -1)
    double num = s.b0 - s.b1 + s.b2;
    double den = 1.0 - s.a1 + s.a2;
    double g = den / num;
    s.b0 *= g, s.b1 *= g, s.b2 *= g;
    sos.push_back(s);
  }
  if (order % 2 == 1) {
    double q = -wa;  // real prototype pole at -1 maps to -wa
    double zp = (1.0 + q) / (1.0 - q);
    Biquad s;
    s.b0 = 1, s.b1 = -1, s.b2 = 0;  // one zero at z = 1
    s.a1 = -zp;
    s.a2 = 0;
    double g = (1.0 - s.a1) / (s.b0 - s.b1);
    s.b0 *= g, s.b1 *= g;
    sos.push_back(s);
  }
  return sos;
}

// Audio-cookbook notch biquad.
inline Sos notch_sos(double freq_hz, double q, int fs) {
  if (!(freq_hz > 0 && freq_hz < fs / 2.0))
    throw ConfigError("notch: freq must lie in (0, fs/2)");
  const double pi = 3.14159265358979323846;
  double w0 = 2.0 * pi * freq_hz / fs;
  double alpha = std::sin(w0) / (2.0 * q);
  double a0 = 1.0 + alpha;
  Biquad s;
  s.b0 = 1.0 / a0;
  s.b1 = -2.0 * std::cos(w0) / a0;
  s.b2 = 1.0 / a0;
  s.a1 = -2.0 * std::cos(w0) / a0;
  s.a2 = (1.0 - alpha) / a0;
  return {s};
}

// Direct form II transposed, single pass.
inline void sos_filter_inplace(const Sos& sos, std::vector<double>& x) {
  for (const auto& s : sos) {
    double z1 = 0, z2 = 0;
    for (double& v : x) {
      double y = s.b0 * v + z1;
      z1 = s.b1 * v - s.a1 * y + z2;
      z2 = s.b2 * v - s.a2 * y;
      v = y;
    }
  }
}

// Zero-phase application: odd-reflect pad both ends, filter forward and
// backward, strip the padding.
inline std::vector<double> filtfilt(const Sos& sos,
                                    const std::vector<double>& x,
                                    int64_t pad_len) {
  int64_t n = static_cast<int64_t>(x.size());
  if (n == 0) return {};
  pad_len = std::clamp<int64_t>(pad_len, 0, n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad_len);
  for (int64_t i = pad_len; i >= 1; --i) ext.push_back(2 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (int64_t i = 1; i <= pad_len; ++i)
    ext.push_back(2 * x[n - 1] - x[n - 1 - i]);
  sos_filter_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  sos_filter_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  return std::vector<double>(ext.begin() + pad_len, ext.begin() + pad_len + n);
}

// Squared magnitude of the cascade at frequency f, one pass.
inline double sos_gain(const Sos& sos, double f_hz, int fs) {
  const double pi = 3.14159265358979323846;
  std::complex<double> z = std::polar(1.0, 2.0 * pi * f_hz / fs);
  std::complex<double> zi = 1.0 / z;
  std::complex<double> h(1.0, 0.0);
  for (const auto& s : sos)
    h *= (s.b0 + s.b1 * zi + s.b2 * zi * zi) /
         (1.0 + s.a1 * zi + s.a2 * zi * zi);
  return std::abs(h);
}

}  // namespace detail

inline std::vector<float> butterworth_highpass(const std::vector<float>& x,
                                               int fs, double cutoff_hz,
                                               int order) {
  if (order < 1) throw ConfigError("butterworth: order must be >= 1");
  Sos sos = detail::butterworth_highpass_sos(cutoff_hz, order, fs);
  std::vector<double> xd(x.begin(), x.end());
  int64_t pad = static_cast<int64_t>(
      std::llround(3.0 * order * fs / cutoff_hz));
  auto y = detail::filtfilt(sos, xd, pad);
  std::vector<float> out(y.size());
  for (size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i]);
  return out;
}

inline std::vector<float> notch_filter(const std::vector<float>& x, int fs,
                                       double freq_hz, double q) {
  if (q <= 0) throw ConfigError("notch: q must be positive");
  Sos sos = detail::notch_sos(freq_hz, q, fs);
  std::vector<double> xd(x.begin(), x.end());
  // the notch is a 2nd-order section; pad relative to its center frequency
  int64_t pad = static_cast<int64_t>(std::llround(3.0 * 2.0 * fs / freq_hz));
  auto y = detail::filtfilt(sos, xd, pad);
  std::vector<float> out(y.size());
  for (size_t i = 0; i < y.size(); ++i) out[i] = static_cast<float>(y[i]);
  return out;
}

inline EcgRecord preprocess_record(const EcgRecord& record,
                                   const FilterSpec& spec) {
  record.validate();
  spec.validate(record.fs);
  EcgRecord out = record;
  out.samples = butterworth_highpass(out.samples, out.fs,
                                     spec.highpass_cutoff,
                                     spec.highpass_order);
  out.samples = notch_filter(out.samples, out.fs, spec.notch_freq,
                             spec.notch_q);
  return out;
}

// Plain linear-interpolation resampler for mixed-rate datasets.
inline std::vector<float> resample_linear(const std::vector<float>& x,
                                          int fs_in, int fs_out) {
  if (fs_in <= 0 || fs_out <= 0)
    throw ConfigError("resample: rates must be positive");
  if (x.empty()) return {};
  if (fs_in == fs_out) return x;
  int64_t n_in = static_cast<int64_t>(x.size());
  int64_t n_out = static_cast<int64_t>(
      std::llround(static_cast<double>(n_in) * fs_out / fs_in));
  n_out = std::max<int64_t>(n_out, 1);
  std::vector<float> out(n_out);
  double ratio = static_cast<double>(fs_in) / fs_out;
  for (int64_t j = 0; j < n_out; ++j) {
    double t = j * ratio;
    int64_t i0 = static_cast<int64_t>(std::floor(t));
    i0 = std::clamp<int64_t>(i0, 0, n_in - 1);
    int64_t i1 = std::min<int64_t>(i0 + 1, n_in - 1);
    double frac = t - static_cast<double>(i0);
    out[j] = static_cast<float>((1.0 - frac) * x[i0] + frac * x[i1]);
  }
  return out;
}

}  // namespace ecglang::preprocess
