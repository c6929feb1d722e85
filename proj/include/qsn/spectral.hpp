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

// Spectral feature extraction: STFT, log mel-spectrogram, octave-band
// spectral contrast and a log-energy envelope row, fused into one
// standardized feature map (rows = coefficients, columns = frames).

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fftw3.h>

#include "qsn/error.hpp"
#include "qsn/signal_prep.hpp"

namespace qsn {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

struct SpectralConfig {
  int sample_rate = 16000;
  int clip_samples = 80000;
  int fft_size = 512;
  int hop = 160;
  int win_length = 400;
  int mel_bands = 40;
  double mel_fmin = 0.0;
  double mel_fmax = 8000.0;
  int contrast_bands = 6;
  double contrast_fmin = 200.0;
  double contrast_quantile = 0.02;
  int envelope_rows = 1;
  double log_floor = 1e-10;

  int Bins() const { return fft_size / 2 + 1; }
  int Frames() const { return 1 + clip_samples / hop; }
  int ContrastRows() const { return contrast_bands + 1; }
  int FeatureRows() const { return mel_bands + ContrastRows() + envelope_rows; }
  bool operator==(const SpectralConfig&) const = default;
};

inline void Validate(const SpectralConfig& cfg) {
  if (cfg.fft_size < cfg.win_length || cfg.win_length <= 0 || cfg.hop <= 0) {
    Fail(ErrorCode::kInvalidConfig, "need 0 < win_length <= fft_size and hop > 0");
  }
  if (cfg.clip_samples % cfg.hop != 0) {
    Fail(ErrorCode::kInvalidConfig, "hop must divide clip_samples");
  }
  if (cfg.clip_samples <= cfg.fft_size / 2) {
    Fail(ErrorCode::kInvalidConfig, "clip shorter than reflection padding");
  }
  if (cfg.envelope_rows != 1) Fail(ErrorCode::kInvalidConfig, "envelope_rows must be 1");
  if (cfg.mel_bands < 1 || !(cfg.mel_fmin >= 0.0 && cfg.mel_fmin < cfg.mel_fmax &&
                             cfg.mel_fmax <= cfg.sample_rate / 2.0)) {
    Fail(ErrorCode::kInvalidConfig, "invalid mel band layout");
  }
  if (cfg.contrast_bands < 1 || !(cfg.contrast_quantile > 0.0 && cfg.contrast_quantile < 0.5)) {
    Fail(ErrorCode::kInvalidConfig, "invalid spectral contrast layout");
  }
  if (cfg.contrast_fmin * std::pow(2.0, cfg.contrast_bands - 1) >= cfg.sample_rate / 2.0) {
    Fail(ErrorCode::kInvalidConfig, "contrast octaves exceed Nyquist");
  }
}

using ComplexSpectrogram = Eigen::MatrixXcd;  // bins x frames

namespace internal {

/// Owns one FFTW real-to-complex plan per transform size. Plans are created
/// under a lock; execution through the new-array API is thread-safe.
class FftPlans {
 public:
  static FftPlans& Instance() {
    static FftPlans plans;
    return plans;
  }

  fftw_plan Get(int n) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    double* in = fftw_alloc_real(static_cast<size_t>(n));
    fftw_complex* out = fftw_alloc_complex(static_cast<size_t>(n / 2 + 1));
    fftw_plan plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(n, plan);
    return plan;
  }

 private:
  FftPlans() = default;
  ~FftPlans() {
    for (auto& [n, plan] : plans_) fftw_destroy_plan(plan);
  }
  std::mutex mu_;
  std::map<int, fftw_plan> plans_;
};

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

}  // namespace internal

/// Periodic Hann window of `win_length`, zero-padded to the center of an
/// `fft_size` frame.
inline std::vector<double> AnalysisWindow(const SpectralConfig& cfg) {
  std::vector<double> w(static_cast<size_t>(cfg.fft_size), 0.0);
  const int offset = (cfg.fft_size - cfg.win_length) / 2;
  for (int n = 0; n < cfg.win_length; ++n) {
    w[static_cast<size_t>(offset + n)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / cfg.win_length);
  }
  return w;
}

/// Centered STFT: column t is the windowed DFT of the frame centered on
/// sample t * hop, with reflection padding at both ends.
inline ComplexSpectrogram Stft(const AudioClip& clip, const SpectralConfig& cfg) {
  Validate(cfg);
  if (clip.samples.size() != static_cast<size_t>(cfg.clip_samples) ||
      clip.sample_rate != cfg.sample_rate) {
    Fail(ErrorCode::kWrongLength, "STFT expects " + std::to_string(cfg.clip_samples) +
                                      " samples at " + std::to_string(cfg.sample_rate) +
                                      " Hz, got " + std::to_string(clip.samples.size()) +
                                      " at " + std::to_string(clip.sample_rate));
  }
  const int n_fft = cfg.fft_size;
  const int bins = cfg.Bins();
  const int frames = cfg.Frames();
  const long n = static_cast<long>(clip.samples.size());
  const std::vector<double> window = AnalysisWindow(cfg);

  fftw_plan plan = internal::FftPlans::Instance().Get(n_fft);
  std::unique_ptr<double, internal::FftwFree> in(fftw_alloc_real(static_cast<size_t>(n_fft)));
  std::unique_ptr<fftw_complex, internal::FftwFree> out(
      fftw_alloc_complex(static_cast<size_t>(bins)));

  ComplexSpectrogram spec(bins, frames);
  for (int t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * cfg.hop - n_fft / 2;
    for (int m = 0; m < n_fft; ++m) {
      long j = start + m;
      if (j < 0) j = -j;
      if (j >= n) j = 2 * (n - 1) - j;
      in.get()[m] = clip.samples[static_cast<size_t>(j)] * window[static_cast<size_t>(m)];
    }
    fftw_execute_dft_r2c(plan, in.get(), out.get());
    for (int k = 0; k < bins; ++k) spec(k, t) = {out.get()[k][0], out.get()[k][1]};
  }
  return spec;
}

inline double HzToMel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double MelToHz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters with centers equally spaced in mel between mel_fmin and
/// mel_fmax, each scaled so its largest weight is 1.
inline Eigen::MatrixXd MelFilterbank(const SpectralConfig& cfg) {
  Validate(cfg);
  const int bins = cfg.Bins();
  const double lo = HzToMel(cfg.mel_fmin), hi = HzToMel(cfg.mel_fmax);
  std::vector<double> edges(static_cast<size_t>(cfg.mel_bands + 2));
  for (size_t i = 0; i < edges.size(); ++i) {
    edges[i] = MelToHz(lo + (hi - lo) * static_cast<double>(i) / (cfg.mel_bands + 1));
  }
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.mel_bands, bins);
  for (int m = 0; m < cfg.mel_bands; ++m) {
    const double left = edges[static_cast<size_t>(m)];
    const double center = edges[static_cast<size_t>(m) + 1];
    const double right = edges[static_cast<size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      const double rise = (f - left) / (center - left);
      const double fall = (right - f) / (right - center);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
    const double peak = fb.row(m).maxCoeff();
    if (peak > 0.0) fb.row(m) /= peak;
  }
  return fb;
}

inline Eigen::MatrixXd PowerSpectrum(const ComplexSpectrogram& spec) {
  return spec.cwiseAbs2();
}

inline Eigen::MatrixXd LogMel(const ComplexSpectrogram& spec, const SpectralConfig& cfg) {
  const Eigen::MatrixXd mel = MelFilterbank(cfg) * PowerSpectrum(spec);
  return mel.unaryExpr([&](double v) { return 10.0 * std::log10(std::max(v, cfg.log_floor)); });
}

/// Bin ranges [first, last) of the contrast sub-bands: `contrast_bands`
/// octaves starting at contrast_fmin plus the residual band up to Nyquist.
inline std::vector<std::pair<int, int>> ContrastBandBins(const SpectralConfig& cfg) {
  const int bins = cfg.Bins();
  std::vector<double> edges{0.0};
  for (int b = 0; b < cfg.contrast_bands; ++b) {
    edges.push_back(cfg.contrast_fmin * std::pow(2.0, b));
  }
  std::vector<std::pair<int, int>> ranges;
  const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.fft_size;
  for (size_t b = 0; b < edges.size(); ++b) {
    const int first = static_cast<int>(std::ceil(edges[b] / bin_hz));
    const int last = b + 1 < edges.size()
                         ? static_cast<int>(std::ceil(edges[b + 1] / bin_hz))
                         : bins;
    ranges.emplace_back(first, std::max(first + 1, last));
  }
  return ranges;
}

/// Per band and frame: mean log-magnitude (dB) of the loudest quantile of bins
/// minus that of the quietest quantile, at least one bin each.
inline Eigen::MatrixXd SpectralContrast(const ComplexSpectrogram& spec, const SpectralConfig& cfg) {
  const auto bands = ContrastBandBins(cfg);
  const long frames = spec.cols();
  Eigen::MatrixXd out(static_cast<long>(bands.size()), frames);
  std::vector<double> mags;
  for (size_t b = 0; b < bands.size(); ++b) {
    const auto [first, last] = bands[b];
    const int count = last - first;
    const int take =
        std::max(1, static_cast<int>(std::lround(cfg.contrast_quantile * count)));
    for (long t = 0; t < frames; ++t) {
      mags.clear();
      for (int k = first; k < last; ++k) {
        mags.push_back(20.0 * std::log10(std::max(std::abs(spec(k, t)), cfg.log_floor)));
      }
      std::sort(mags.begin(), mags.end());
      double valley = 0.0, peak = 0.0;
      for (int i = 0; i < take; ++i) {
        valley += mags[static_cast<size_t>(i)];
        peak += mags[static_cast<size_t>(count - 1 - i)];
      }
      out(static_cast<long>(b), t) = (peak - valley) / take;
    }
  }
  return out;
}

/// Per-frame log total energy in dB.
inline Eigen::MatrixXd SpectralEnvelope(const ComplexSpectrogram& spec, const SpectralConfig& cfg) {
  const Eigen::RowVectorXd energy = PowerSpectrum(spec).colwise().sum();
  return energy.unaryExpr([&](double v) { return 10.0 * std::log10(std::max(v, cfg.log_floor)); });
}

/// Per-row standardization statistics (typically from the training corpus).
struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  bool operator==(const NormStats&) const = default;
};

inline constexpr double kStdFloor = 1e-8;

inline Eigen::MatrixXd StackFeatures(const Eigen::MatrixXd& mel, const Eigen::MatrixXd& contrast,
                                     const Eigen::MatrixXd& envelope) {
  if (mel.cols() != contrast.cols() || mel.cols() != envelope.cols() || envelope.rows() != 1) {
    Fail(ErrorCode::kShapeMismatch, "feature blocks disagree on frame count");
  }
  Eigen::MatrixXd stacked(mel.rows() + contrast.rows() + envelope.rows(), mel.cols());
  stacked << mel, contrast, envelope;
  return stacked;
}

inline NormStats RowStats(const Eigen::MatrixXd& m) {
  NormStats s;
  s.mean = m.rowwise().mean();
  s.stddev = ((m.colwise() - s.mean).array().square().rowwise().mean()).sqrt().matrix();
  return s;
}

/// Accumulates row statistics over many raw feature maps (population moments).
class NormStatsAccumulator {
 public:
  void Add(const Eigen::MatrixXd& m) {
    if (count_ == 0) {
      sum_ = Eigen::VectorXd::Zero(m.rows());
      sum_sq_ = Eigen::VectorXd::Zero(m.rows());
    } else if (m.rows() != sum_.size()) {
      Fail(ErrorCode::kShapeMismatch, "feature maps disagree on row count");
    }
    sum_ += m.rowwise().sum();
    sum_sq_ += m.array().square().rowwise().sum().matrix();
    count_ += m.cols();
  }

  NormStats Finish() const {
    if (count_ == 0) Fail(ErrorCode::kShapeMismatch, "no feature maps accumulated");
    NormStats s;
    const double n = static_cast<double>(count_);
    s.mean = sum_ / n;
    s.stddev = (sum_sq_ / n - s.mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
    return s;
  }

 private:
  Eigen::VectorXd sum_, sum_sq_;
  long count_ = 0;
};

inline Eigen::MatrixXd Standardize(const Eigen::MatrixXd& raw, const std::optional<NormStats>& stats) {
  const NormStats s = stats ? *stats : RowStats(raw);
  if (s.mean.size() != raw.rows() || s.stddev.size() != raw.rows()) {
    Fail(ErrorCode::kShapeMismatch, "normalization stats do not match feature rows");
  }
  const Eigen::VectorXd inv = s.stddev.cwiseMax(kStdFloor).cwiseInverse();
  return (raw.colwise() - s.mean).array().colwise() * inv.array();
}

struct FeatureMap {
  Eigen::MatrixXf values;  // rows = coefficients, cols = frames
  std::string id;
};

inline FeatureMap FuseFeatures(const Eigen::MatrixXd& mel, const Eigen::MatrixXd& contrast,
                               const Eigen::MatrixXd& envelope,
                               const std::optional<NormStats>& stats, std::string id = {}) {
  FeatureMap fm;
  fm.values = Standardize(StackFeatures(mel, contrast, envelope), stats).cast<float>();
  fm.id = std::move(id);
  return fm;
}

/// Unstandardized stacked features of a preprocessed clip. This is what the
/// feature cache stores; standardization is applied with corpus statistics.
inline Eigen::MatrixXd ExtractRawFeatures(const AudioClip& clip, const SpectralConfig& cfg) {
  const ComplexSpectrogram spec = Stft(clip, cfg);
  Eigen::MatrixXd raw =
      StackFeatures(LogMel(spec, cfg), SpectralContrast(spec, cfg), SpectralEnvelope(spec, cfg));
  if (raw.rows() != cfg.FeatureRows()) Fail(ErrorCode::kShapeMismatch, "feature row budget");
  return raw;
}

// ---- QSFM feature cache files ------------------------------------------

inline constexpr char kFeatureMagic[4] = {'Q', 'S', 'F', 'M'};
inline constexpr uint32_t kFeatureVersion = 1;

inline std::string EncodeFeatureFile(const Eigen::MatrixXf& values) {
  std::string out(kFeatureMagic, 4);
  auto put_u32 = [&](uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put_u32(kFeatureVersion);
  put_u32(static_cast<uint32_t>(values.rows()));
  put_u32(static_cast<uint32_t>(values.cols()));
  // Row-major payload.
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = values;
  out.append(reinterpret_cast<const char*>(rm.data()), static_cast<size_t>(rm.size()) * 4);
  return out;
}

inline Eigen::MatrixXf DecodeFeatureFile(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    Fail(ErrorCode::kCorruptFeatureFile, origin + ": bad magic");
  }
  uint32_t version, rows, cols;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&rows, bytes.data() + 8, 4);
  std::memcpy(&cols, bytes.data() + 12, 4);
  if (version != kFeatureVersion) {
    Fail(ErrorCode::kCorruptFeatureFile, origin + ": unsupported version " + std::to_string(version));
  }
  const size_t expected = 16 + static_cast<size_t>(rows) * cols * 4;
  if (bytes.size() != expected) Fail(ErrorCode::kCorruptFeatureFile, origin + ": size mismatch");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  std::memcpy(rm.data(), bytes.data() + 16, static_cast<size_t>(rows) * cols * 4);
  for (long i = 0; i < rm.size(); ++i) {
    if (!std::isfinite(rm.data()[i])) Fail(ErrorCode::kCorruptFeatureFile, origin + ": non-finite value");
  }
  return rm;
}

inline void WriteFeatureFile(const std::filesystem::path& path, const Eigen::MatrixXf& values) {
  const std::string bytes = EncodeFeatureFile(values);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": write failed");
}

inline Eigen::MatrixXf ReadFeatureFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kIoError, path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DecodeFeatureFile(bytes, path.string());
}

}  // namespace qsn
