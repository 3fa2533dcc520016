#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "upmu/types.hpp"

namespace upmu::dsp {

/// One channel of synchronized waveform samples. Sample m sits at t0 + m / fs.
struct WaveformSegment {
  std::string channel_id;
  double t0 = 0.0;
  double fs = 7680.0;
  std::vector<double> samples;
};

enum class FilterKind { pclass_two_cycle, custom_fir };

struct FilterSpec {
  FilterKind kind = FilterKind::custom_fir;
  std::vector<double> taps;
  int group_delay_samples = 0;
};

/// Complex phasor stamped with its reporting tick (k / 120 s).
struct TimedPhasor {
  Tick k = 0;
  cplx value{};
};

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, kTwoPi);
  if (w <= -kPi) w += kTwoPi;
  return w;
}

inline int samples_per_cycle(double f0, double fs) {
  const double spc = fs / f0;
  const double r = std::round(spc);
  if (r < 1.0 || std::abs(spc - r) > 1e-9 * spc)
    throw InputError("sample rate " + std::to_string(fs) + " Hz is not an integer multiple of " +
                     std::to_string(f0) + " Hz");
  return static_cast<int>(r);
}

/**
 * Two-cycle triangular FIR with linear phase.
 *
 * Taps are w[n] = 1 - |n - N| / N for n = 0..2N (N samples per nominal cycle), then scaled to unit
 * DC gain. The shape is the self-convolution of an N-sample boxcar, so the response has exact nulls at
 * every multiple of f0, in particular at the 2 f0 image produced by demodulation.
 */
inline FilterSpec design_pclass_filter(double f0, double fs) {
  if (!(f0 > 0.0) || !(fs >= 16.0 * f0))
    throw InputError("P-class filter needs fs >= 16 f0");
  const int n = samples_per_cycle(f0, fs);
  FilterSpec spec;
  spec.kind = FilterKind::pclass_two_cycle;
  spec.taps.resize(static_cast<std::size_t>(2 * n + 1));
  double sum = 0.0;
  for (int i = 0; i <= 2 * n; ++i) {
    const double w = 1.0 - std::abs(i - n) / static_cast<double>(n);
    spec.taps[static_cast<std::size_t>(i)] = w;
    sum += w;
  }
  for (double& t : spec.taps) t /= sum;
  spec.group_delay_samples = n;
  return spec;
}

/// Frequency response sum_n h[n] exp(-j 2 pi f n / fs), referenced to the filter center.
inline cplx frequency_response(const FilterSpec& filt, double f, double fs) {
  cplx acc{};
  const int center = filt.group_delay_samples;
  for (std::size_t n = 0; n < filt.taps.size(); ++n) {
    const double arg = -kTwoPi * f * (static_cast<double>(n) - center) / fs;
    acc += filt.taps[n] * cplx(std::cos(arg), std::sin(arg));
  }
  return acc;
}

/**
 * Streaming demodulate-and-filter phasor estimator for one channel.
 *
 * Samples are pushed in time order with their global sample index (t = index / fs). Once a full filter
 * span is buffered, every span whose center lands on a reporting instant yields one RMS-scaled phasor
 * stamped at that instant.
 */
class PhasorExtractor {
 public:
  PhasorExtractor(FilterSpec filt, double f0, double fs, double reporting_hz = kReportingHz)
      : filt_(std::move(filt)) {
    if (filt_.taps.empty()) throw InputError("empty filter");
    spc_ = samples_per_cycle(f0, fs);
    const double dec = fs / reporting_hz;
    decimation_ = static_cast<long long>(std::llround(dec));
    if (decimation_ < 1 || std::abs(dec - static_cast<double>(decimation_)) > 1e-9 * dec)
      throw InputError("sample rate is not an integer multiple of the reporting rate");
    osc_.resize(static_cast<std::size_t>(spc_));
    for (int m = 0; m < spc_; ++m) {
      const double arg = -kTwoPi * m / spc_;
      osc_[static_cast<std::size_t>(m)] = cplx(std::cos(arg), std::sin(arg));
    }
    ring_.assign(filt_.taps.size(), 0.0);
  }

  std::size_t span() const { return filt_.taps.size(); }

  /// Push the sample at global index `index`; indices must be consecutive.
  std::optional<TimedPhasor> push(long long index, double sample) {
    if (filled_ > 0 && index != last_index_ + 1) {
      filled_ = 0;  // gap: restart warm-up
    }
    last_index_ = index;
    ring_[head_] = sample;
    head_ = (head_ + 1) % ring_.size();
    if (filled_ < ring_.size()) ++filled_;
    if (filled_ < ring_.size()) return std::nullopt;

    const long long center = index - filt_.group_delay_samples;
    if (floor_mod(center, decimation_) != 0) return std::nullopt;

    // ring_[head_] is now the oldest sample, index - (L - 1).
    const std::size_t len = ring_.size();
    cplx acc{};
    for (std::size_t n = 0; n < len; ++n) {
      const long long m = index - static_cast<long long>(n);
      const double s = ring_[(head_ + len - 1 - n) % len];
      acc += filt_.taps[n] * s * osc_[static_cast<std::size_t>(floor_mod(m, spc_))];
    }
    return TimedPhasor{center / decimation_, std::sqrt(2.0) * acc};
  }

 private:
  static long long floor_mod(long long a, long long b) {
    const long long r = a % b;
    return r < 0 ? r + b : r;
  }

  FilterSpec filt_;
  int spc_ = 0;
  long long decimation_ = 1;
  std::vector<cplx> osc_;
  std::vector<double> ring_;
  std::size_t head_ = 0;
  std::size_t filled_ = 0;
  long long last_index_ = 0;
};

/// Global sample index of the first sample of a segment; t0 must sit on the sample grid.
inline long long first_sample_index(const WaveformSegment& seg) {
  const double idx = seg.t0 * seg.fs;
  const double r = std::round(idx);
  if (std::abs(idx - r) > 1e-6) throw InputError("segment start time is not on the sample grid");
  return static_cast<long long>(r);
}

/// Phasors at every reporting instant covered by a full filter span. Shorter segments give nothing.
inline std::vector<TimedPhasor> extract_phasor_stream(const WaveformSegment& seg, const FilterSpec& filt,
                                                      double f0 = kNominalHz) {
  std::vector<TimedPhasor> out;
  if (seg.samples.size() < filt.taps.size()) return out;
  PhasorExtractor ex(filt, f0, seg.fs);
  const long long start = first_sample_index(seg);
  for (std::size_t m = 0; m < seg.samples.size(); ++m) {
    if (auto p = ex.push(start + static_cast<long long>(m), seg.samples[m])) out.push_back(*p);
  }
  return out;
}

/// Remove 2 pi jumps so successive differences lie in (-pi, pi].
inline std::vector<double> unwrap_angles(std::span<const double> angles) {
  std::vector<double> out(angles.begin(), angles.end());
  for (std::size_t i = 1; i < out.size(); ++i) {
    const double d = wrap_angle(angles[i] - angles[i - 1]);
    out[i] = out[i - 1] + d;
  }
  return out;
}

/**
 * Per-tick phase advance beta[k] = arg(p[k] conj(p[k-1])) for k >= 1, optionally smoothed with an
 * exponential window: b[k] = smoothing * b[k-1] + (1 - smoothing) * raw[k]. A zero-magnitude phasor
 * carries the previous value forward. The output has one entry per input, with beta[0] = 0.
 */
inline std::vector<double> estimate_frequency_drift(std::span<const cplx> phasors, double smoothing = 0.0) {
  if (phasors.size() < 2) throw InputError("drift estimate needs at least two phasors");
  if (smoothing < 0.0 || smoothing >= 1.0) throw InputError("smoothing constant must be in [0, 1)");
  std::vector<double> beta(phasors.size(), 0.0);
  double prev = 0.0;
  bool seeded = false;
  for (std::size_t k = 1; k < phasors.size(); ++k) {
    const cplx z = phasors[k] * std::conj(phasors[k - 1]);
    double raw = prev;
    if (std::abs(phasors[k]) > 0.0 && std::abs(phasors[k - 1]) > 0.0) raw = std::arg(z);
    const double b = seeded ? smoothing * prev + (1.0 - smoothing) * raw : raw;
    seeded = true;
    beta[k] = b;
    prev = b;
  }
  return beta;
}

}  // namespace upmu::dsp
