// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Waveform loading and the preprocessing chain that turns an arbitrary clip
// into a fixed-length, normalized, filtered signal: silence removal,
// amplitude normalization, band-pass, pre-emphasis, fixed length.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "qsn/error.hpp"
#include "qsn/wav.hpp"

namespace qsn {

struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 0;

  size_t size() const { return samples.size(); }
  bool operator==(const AudioClip&) const = default;
};

struct PrepConfig {
  int target_rate = 16000;
  int frame_len = 400;
  int frame_hop = 160;
  double vad_energy_db = -40.0;
  double band_low = 50.0;
  double band_high = 7800.0;
  double preemph = 0.97;
  double target_duration = 5.0;

  size_t TargetLength() const {
    return static_cast<size_t>(std::llround(target_duration * target_rate));
  }
  bool operator==(const PrepConfig&) const = default;
};

inline void Validate(const PrepConfig& cfg) {
  if (cfg.target_rate <= 0) Fail(ErrorCode::kInvalidConfig, "target_rate must be positive");
  if (cfg.frame_len <= 0 || cfg.frame_hop <= 0 || cfg.frame_hop > cfg.frame_len) {
    Fail(ErrorCode::kInvalidConfig, "need 0 < frame_hop <= frame_len");
  }
  if (!(cfg.preemph >= 0.0 && cfg.preemph < 1.0)) {
    Fail(ErrorCode::kInvalidConfig, "preemph must lie in [0, 1)");
  }
  if (!(cfg.band_low > 0.0 && cfg.band_low < cfg.band_high &&
        cfg.band_high < cfg.target_rate / 2.0)) {
    Fail(ErrorCode::kInvalidBand, "need 0 < band_low < band_high < target_rate/2");
  }
  if (!(cfg.target_duration > 0.0)) {
    Fail(ErrorCode::kInvalidConfig, "target_duration must be positive");
  }
}

/// Band-limited resampling with a normalized, Blackman-windowed sinc kernel
/// spanning 32 taps at the lower of the two rates.
inline AudioClip Resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) Fail(ErrorCode::kInvalidConfig, "target_rate must be positive");
  if (clip.sample_rate == target_rate) return clip;

  const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = 16.0 / cutoff;
  const auto n_in = static_cast<long>(clip.samples.size());
  const auto n_out = static_cast<size_t>(std::llround(n_in * ratio));

  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (size_t n = 0; n < n_out; ++n) {
    const double center = static_cast<double>(n) / ratio;
    const long first = static_cast<long>(std::floor(center - half_width)) + 1;
    const long last = static_cast<long>(std::ceil(center + half_width)) - 1;
    double acc = 0.0, weight_sum = 0.0;
    for (long k = first; k <= last; ++k) {
      const double d = center - static_cast<double>(k);
      const double u = d / half_width;
      if (std::abs(u) >= 1.0) continue;
      const double window = 0.42 + 0.5 * std::cos(std::numbers::pi * u) +
                            0.08 * std::cos(2.0 * std::numbers::pi * u);
      const double x = std::numbers::pi * cutoff * d;
      const double sinc = d == 0.0 ? 1.0 : std::sin(x) / x;
      const double w = cutoff * sinc * window;
      weight_sum += w;
      if (k >= 0 && k < n_in) acc += w * clip.samples[static_cast<size_t>(k)];
    }
    out.samples[n] = weight_sum != 0.0 ? acc / weight_sum : 0.0;
  }
  return out;
}

inline AudioClip ToMono(const wav::WavData& data) {
  AudioClip clip;
  clip.sample_rate = data.sample_rate;
  const size_t frames = data.frames();
  clip.samples.resize(frames);
  for (size_t i = 0; i < frames; ++i) {
    double sum = 0.0;
    for (int c = 0; c < data.channels; ++c) {
      sum += data.interleaved[i * static_cast<size_t>(data.channels) + static_cast<size_t>(c)];
    }
    clip.samples[i] = sum / data.channels;
  }
  return clip;
}

inline AudioClip LoadAudio(const std::filesystem::path& path, const PrepConfig& cfg) {
  if (!std::filesystem::exists(path)) {
    Fail(ErrorCode::kUnreadableFile, path.string() + ": no such file");
  }
  AudioClip clip = ToMono(wav::Read(path));
  if (clip.samples.empty()) Fail(ErrorCode::kEmptyAudio, path.string() + ": no samples");
  return Resample(clip, cfg.target_rate);
}

/// Start offsets of the analysis frames used for silence detection. The last
/// frame is aligned to the end of the clip so every sample is covered.
inline std::vector<size_t> FrameStarts(size_t n, size_t frame_len, size_t hop) {
  std::vector<size_t> starts;
  if (n <= frame_len) {
    starts.push_back(0);
    return starts;
  }
  for (size_t s = 0; s + frame_len <= n; s += hop) starts.push_back(s);
  if (starts.back() + frame_len < n) starts.push_back(n - frame_len);
  return starts;
}

/// Keeps the samples for which every covering analysis frame is voiced, i.e.
/// has RMS within `vad_energy_db` of the loudest frame.
inline AudioClip RemoveSilence(const AudioClip& clip, const PrepConfig& cfg) {
  const size_t n = clip.samples.size();
  if (n == 0) Fail(ErrorCode::kEmptyAudio, "empty clip");
  const size_t len = std::min<size_t>(static_cast<size_t>(cfg.frame_len), n);
  const std::vector<size_t> starts = FrameStarts(n, len, static_cast<size_t>(cfg.frame_hop));

  std::vector<double> rms(starts.size());
  double peak = 0.0;
  for (size_t f = 0; f < starts.size(); ++f) {
    double e = 0.0;
    for (size_t i = starts[f]; i < starts[f] + len; ++i) e += clip.samples[i] * clip.samples[i];
    rms[f] = std::sqrt(e / static_cast<double>(len));
    peak = std::max(peak, rms[f]);
  }
  if (peak == 0.0) Fail(ErrorCode::kAllSilent, "every frame is below the energy threshold");
  const double threshold = peak * std::pow(10.0, cfg.vad_energy_db / 20.0);

  // Difference arrays: frames covering each sample, and voiced ones among them.
  std::vector<long> covering(n + 1, 0), voiced(n + 1, 0);
  for (size_t f = 0; f < starts.size(); ++f) {
    covering[starts[f]] += 1;
    covering[starts[f] + len] -= 1;
    if (rms[f] > threshold) {
      voiced[starts[f]] += 1;
      voiced[starts[f] + len] -= 1;
    }
  }
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  long c = 0, v = 0;
  for (size_t i = 0; i < n; ++i) {
    c += covering[i];
    v += voiced[i];
    if (v == c) out.samples.push_back(clip.samples[i]);
  }
  if (out.samples.empty()) Fail(ErrorCode::kAllSilent, "no voiced samples");
  return out;
}

/// Scales the clip so that its largest magnitude is exactly 1.
inline AudioClip NormalizeAmplitude(const AudioClip& clip) {
  double peak = 0.0;
  for (double s : clip.samples) peak = std::max(peak, std::abs(s));
  if (peak == 0.0) Fail(ErrorCode::kAllZero, "cannot normalize an all-zero clip");
  AudioClip out = clip;
  // Division (not a reciprocal multiply) so the peak maps to exactly 1.0.
  for (double& s : out.samples) s /= peak;
  return out;
}

/// One direct-form-II-transposed second-order section.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  static Biquad Make(double b0, double b1, double b2, double a0, double a1, double a2) {
    return {b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0};
  }
  static Biquad HighPass(double freq, double rate, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq / rate;
    const double cw = std::cos(w0), alpha = std::sin(w0) / (2.0 * q);
    return Make((1 + cw) / 2, -(1 + cw), (1 + cw) / 2, 1 + alpha, -2 * cw, 1 - alpha);
  }
  static Biquad LowPass(double freq, double rate, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq / rate;
    const double cw = std::cos(w0), alpha = std::sin(w0) / (2.0 * q);
    return Make((1 - cw) / 2, 1 - cw, (1 - cw) / 2, 1 + alpha, -2 * cw, 1 - alpha);
  }
  static Biquad BandPass(double freq, double rate, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq / rate;
    const double cw = std::cos(w0), alpha = std::sin(w0) / (2.0 * q);
    return Make(alpha, 0, -alpha, 1 + alpha, -2 * cw, 1 - alpha);
  }

  void Apply(std::vector<double>& x) const {
    double z1 = 0, z2 = 0;
    for (double& v : x) {
      const double in = v;
      const double out = b0 * in + z1;
      z1 = b1 * in - a1 * out + z2;
      z2 = b2 * in - a2 * out;
      v = out;
    }
  }
};

/// 4th-order band-pass: Butterworth high-pass at band_low cascaded with a
/// Butterworth low-pass at band_high, zero initial state.
inline AudioClip Bandpass(const AudioClip& clip, const PrepConfig& cfg) {
  if (!(cfg.band_low > 0.0 && cfg.band_low < cfg.band_high &&
        cfg.band_high < clip.sample_rate / 2.0)) {
    Fail(ErrorCode::kInvalidBand, "band edges invalid for sample rate " +
                                      std::to_string(clip.sample_rate));
  }
  constexpr double kButterworthQ = std::numbers::sqrt2 / 2.0;
  AudioClip out = clip;
  Biquad::HighPass(cfg.band_low, clip.sample_rate, kButterworthQ).Apply(out.samples);
  Biquad::LowPass(cfg.band_high, clip.sample_rate, kButterworthQ).Apply(out.samples);
  return out;
}

inline AudioClip PreEmphasis(const AudioClip& clip, const PrepConfig& cfg) {
  if (clip.samples.empty()) Fail(ErrorCode::kEmptyAudio, "empty clip");
  AudioClip out = clip;
  for (size_t n = out.samples.size() - 1; n > 0; --n) {
    out.samples[n] = clip.samples[n] - cfg.preemph * clip.samples[n - 1];
  }
  return out;
}

/// Center-crops or symmetrically zero-pads to TargetLength() samples.
inline AudioClip FixLength(const AudioClip& clip, const PrepConfig& cfg) {
  if (clip.samples.empty()) Fail(ErrorCode::kEmptyAudio, "empty clip");
  const size_t target = cfg.TargetLength();
  const size_t n = clip.samples.size();
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  if (n >= target) {
    const size_t offset = (n - target) / 2;
    out.samples.assign(clip.samples.begin() + static_cast<long>(offset),
                       clip.samples.begin() + static_cast<long>(offset + target));
  } else {
    out.samples.assign(target, 0.0);
    std::copy(clip.samples.begin(), clip.samples.end(),
              out.samples.begin() + static_cast<long>((target - n) / 2));
  }
  return out;
}

/// The full chain in fixed order. Clips not at target_rate are resampled first.
inline AudioClip Preprocess(const AudioClip& clip, const PrepConfig& cfg) {
  Validate(cfg);
  AudioClip x = Resample(clip, cfg.target_rate);
  x = RemoveSilence(x, cfg);
  x = NormalizeAmplitude(x);
  x = Bandpass(x, cfg);
  x = PreEmphasis(x, cfg);
  return FixLength(x, cfg);
}

}  // namespace qsn
