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

// Dataset manifests: ASVspoof-style protocol files, manifest CSVs, manifest
// validation, and a deterministic synthetic corpus of harmonic "voices"
// with three artifact-injecting spoof transforms.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qsn/error.hpp"
#include "qsn/nn.hpp"
#include "qsn/signal_prep.hpp"
#include "qsn/utterance.hpp"
#include "qsn/wav.hpp"

namespace qsn {

// ---- Protocol files ---------------------------------------------------------

/// Parses "speaker utt_id unused system_id key" lines. Audio paths become
/// audio_root / (utt_id + extension).
inline Manifest ParseProtocol(std::istream& in, const std::filesystem::path& audio_root,
                              const std::string& extension = ".wav", const std::string& source = {}) {
  Manifest m;
  m.source = source;
  std::set<std::string> seen;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> f;
    for (std::string tok; fields >> tok;) f.push_back(tok);
    if (f.empty()) continue;
    if (f.size() != 5) {
      Fail(ErrorCode::kMalformedLine, "line " + std::to_string(line_no) + ": expected 5 fields, got " +
                                          std::to_string(f.size()));
    }
    Utterance u;
    u.speaker = f[0];
    u.id = f[1];
    if (f[4] == "bonafide") {
      u.label = Label::kBonafide;
    } else if (f[4] == "spoof") {
      u.label = Label::kSpoof;
      u.attack_id = f[3];
    } else {
      Fail(ErrorCode::kMalformedLine, "line " + std::to_string(line_no) + ": unknown key '" + f[4] + "'");
    }
    if (!seen.insert(u.id).second) {
      Fail(ErrorCode::kDuplicateUttId, "line " + std::to_string(line_no) + ": " + u.id);
    }
    u.path = audio_root / (u.id + extension);
    m.utterances.push_back(std::move(u));
  }
  return m;
}

inline Manifest ParseProtocolFile(const std::filesystem::path& path, const std::filesystem::path& audio_root,
                                  const std::string& extension = ".wav") {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIoError, path.string() + ": cannot open");
  return ParseProtocol(in, audio_root, extension, path.filename().string());
}

inline void WriteProtocol(std::ostream& os, const Manifest& m) {
  for (const Utterance& u : m.utterances) {
    os << u.speaker << ' ' << u.id << " - " << u.AttackOrDash() << ' ' << LabelName(u.label) << '\n';
  }
}

// ---- Manifest CSV -------------------------------------------------------------

/// utt_id,speaker_id,label,attack_id,path. Paths are written relative to
/// `base` when they lie beneath it.
inline void WriteManifestCsv(std::ostream& os, const Manifest& m, const std::filesystem::path& base = {}) {
  os << "utt_id,speaker_id,label,attack_id,path\n";
  for (const Utterance& u : m.utterances) {
    std::filesystem::path p = u.path;
    if (!base.empty() && !p.empty()) {
      const auto rel = p.lexically_proximate(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    os << u.id << ',' << u.speaker << ',' << LabelName(u.label) << ',' << u.AttackOrDash() << ','
       << p.generic_string() << '\n';
  }
}

/// Relative paths are resolved against `base`.
inline Manifest ReadManifestCsv(std::istream& in, const std::filesystem::path& base = {},
                                const std::string& source = {}) {
  Manifest m;
  m.source = source;
  std::set<std::string> seen;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("utt_id,", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 5) {
      Fail(ErrorCode::kMalformedLine, "manifest line " + std::to_string(line_no) + ": expected 5 columns");
    }
    Utterance u;
    u.id = f[0];
    u.speaker = f[1];
    try {
      u.label = ParseLabel(f[2]);
    } catch (const Error&) {
      Fail(ErrorCode::kMalformedLine, "manifest line " + std::to_string(line_no) + ": bad label '" + f[2] + "'");
    }
    if (u.label == Label::kSpoof) u.attack_id = f[3];
    if (!f[4].empty()) {
      std::filesystem::path p(f[4]);
      u.path = p.is_relative() && !base.empty() ? base / p : p;
    }
    if (!seen.insert(u.id).second) Fail(ErrorCode::kDuplicateUttId, u.id);
    m.utterances.push_back(std::move(u));
  }
  return m;
}

inline Manifest ReadManifestFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorCode::kIoError, path.string() + ": cannot open");
  return ReadManifestCsv(in, path.parent_path(), path.filename().string());
}

inline void WriteManifestFile(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": cannot open for writing");
  WriteManifestCsv(out, m, path.parent_path());
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": write failed");
}

// ---- Validation ---------------------------------------------------------------

struct ValidationReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
  bool ok() const { return errors.empty(); }
};

/// Checks id uniqueness, audio presence (or a cached feature file when
/// `cache_dir` is given), class presence and per-class speaker counts.
inline ValidationReport ValidateManifest(const Manifest& m, const std::filesystem::path& cache_dir = {}) {
  ValidationReport r;
  std::set<std::string> ids;
  std::map<Label, std::set<std::string>> speakers;
  for (const Utterance& u : m.utterances) {
    if (!ids.insert(u.id).second) r.errors.push_back("duplicate utterance id " + u.id);
    speakers[u.label].insert(u.speaker);
    if ((u.label == Label::kBonafide) == u.attack_id.has_value()) {
      r.errors.push_back(u.id + ": attack id must be present exactly for spoofed utterances");
    }
    const bool cached = !cache_dir.empty() && std::filesystem::exists(cache_dir / (u.id + ".qsfm"));
    if (!cached && (u.path.empty() || !std::filesystem::exists(u.path))) {
      r.errors.push_back("missing audio file " + (u.path.empty() ? "<none> for " + u.id : u.path.string()));
    }
  }
  if (m.utterances.empty()) r.errors.push_back("manifest is empty");
  if (speakers.size() == 1) r.errors.push_back("one class only");
  for (const auto& [label, spk] : speakers) {
    if (spk.size() < 3) {
      r.errors.push_back(std::string(LabelName(label)) + " has " + std::to_string(spk.size()) +
                         " speakers (need at least 3 for a speaker-disjoint split)");
    }
  }
  return r;
}

// ---- Synthetic corpus -----------------------------------------------------------

struct ToySpec {
  int n_speakers = 12;
  double f0_min = 100.0;
  double f0_max = 250.0;
  int utts_per_speaker_per_class = 20;
  std::vector<std::string> attacks = {"S1", "S2", "S3"};
  double duration = 5.0;
  double noise_snr_db = 30.0;
  uint64_t seed = 7;
  int sample_rate = 16000;
};

namespace toy {
inline constexpr int kHarmonics = 8;
inline constexpr double kVibratoHz = 5.0;
inline constexpr double kVibratoDepth = 0.01;
// Slow intonation contour around the speaker's f0.
inline constexpr double kContourDepth = 0.2;
inline constexpr double kContourMinHz = 0.2;
inline constexpr double kContourMaxHz = 0.5;
inline constexpr double kModulationHz = 30.0;
inline constexpr double kBandCenterHz = 3000.0;
inline constexpr double kBlockSeconds = 0.1;
}  // namespace toy

inline void Validate(const ToySpec& s) {
  if (s.n_speakers < 3) Fail(ErrorCode::kInvalidConfig, "toy corpus needs at least 3 speakers");
  if (!(s.duration > 0)) Fail(ErrorCode::kInvalidConfig, "duration must be positive");
  if (s.utts_per_speaker_per_class < 1) Fail(ErrorCode::kInvalidConfig, "need at least one utterance");
  const double top = toy::kHarmonics * s.f0_max * (1 + toy::kContourDepth) * (1 + toy::kVibratoDepth);
  if (!(s.f0_min > 0 && s.f0_min <= s.f0_max && top < s.sample_rate / 2.0)) {
    Fail(ErrorCode::kInvalidConfig, "f0 range must keep 8 harmonics below Nyquist");
  }
  for (const std::string& a : s.attacks) {
    if (a != "S1" && a != "S2" && a != "S3") Fail(ErrorCode::kInvalidConfig, "unknown toy attack " + a);
  }
}

namespace toy {

inline uint64_t SplitMix(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t Seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return SplitMix(SplitMix(SplitMix(SplitMix(base) ^ a) ^ b) ^ c);
}

inline double Gaussian(nn::Rng& rng) {
  const double u1 = 1.0 - nn::Uniform01(rng);
  const double u2 = nn::Uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

struct Voice {
  double f0 = 0;
  double tilt = 0;
};

/// Each speaker draws its f0 from its own slice of [f0_min, f0_max]; slices
/// are assigned in seeded order so the voices cover the range evenly.
inline Voice SpeakerVoice(const ToySpec& spec, int speaker) {
  std::vector<int> slice(static_cast<size_t>(spec.n_speakers));
  std::iota(slice.begin(), slice.end(), 0);
  nn::Rng order_rng(Seed(spec.seed, 5));
  for (size_t i = slice.size(); i > 1; --i) std::swap(slice[i - 1], slice[nn::UniformIndex(order_rng, i)]);
  nn::Rng rng(Seed(spec.seed, 1, static_cast<uint64_t>(speaker)));
  const double width = (spec.f0_max - spec.f0_min) / spec.n_speakers;
  const double f0 = spec.f0_min + (slice[static_cast<size_t>(speaker)] + nn::Uniform01(rng)) * width;
  return {f0, nn::UniformRange(rng, 0.0, 0.25)};
}

/// Per-utterance pitch track: the speaker's f0 under a slow intonation
/// contour and a 5 Hz vibrato. Bona fide and spoof versions of an utterance
/// share it.
struct Intonation {
  double f0 = 0;
  double contour_hz = 0;
  double contour_phase = 0;
  double vibrato_phase = 0;

  double PitchAt(double t) const {
    return f0 * (1.0 + kContourDepth * std::sin(2 * std::numbers::pi * contour_hz * t + contour_phase)) *
           (1.0 + kVibratoDepth * std::sin(2 * std::numbers::pi * kVibratoHz * t + vibrato_phase));
  }
};

inline Intonation UtteranceIntonation(const ToySpec& spec, int speaker, int index) {
  nn::Rng rng(Seed(spec.seed, 2, static_cast<uint64_t>(speaker), static_cast<uint64_t>(index)));
  Intonation in;
  in.f0 = SpeakerVoice(spec, speaker).f0;
  in.contour_hz = nn::UniformRange(rng, kContourMinHz, kContourMaxHz);
  in.contour_phase = nn::UniformRange(rng, 0, 2 * std::numbers::pi);
  in.vibrato_phase = nn::UniformRange(rng, 0, 2 * std::numbers::pi);
  return in;
}

inline double Rms(const std::vector<double>& x) {
  double e = 0;
  for (double v : x) e += v * v;
  return std::sqrt(e / static_cast<double>(std::max<size_t>(1, x.size())));
}

/// One utterance. `attack` is empty for bona fide. The pitch track and
/// background noise depend only on (seed, speaker, index), so every spoof
/// shares them with its bona fide counterpart. Bona fide harmonics start
/// phase-aligned, which keeps the waveform shape (and so the level after
/// peak normalization) stable; S3 breaks that alignment.
inline std::vector<double> Synthesize(const ToySpec& spec, int speaker, int index, const std::string& attack) {
  const Voice voice = SpeakerVoice(spec, speaker);
  const double fs = spec.sample_rate;
  const size_t n = static_cast<size_t>(std::llround(spec.duration * fs));
  const Intonation pitch = UtteranceIntonation(spec, speaker, index);
  double phases[kHarmonics] = {};
  double amps[kHarmonics];
  for (int k = 0; k < kHarmonics; ++k) amps[k] = std::exp(-voice.tilt * k) / (k + 1);
  const uint64_t attack_tag = attack.empty() ? 0 : static_cast<uint64_t>(attack[1]);
  nn::Rng attack_rng(Seed(spec.seed, 3 + attack_tag, static_cast<uint64_t>(speaker), static_cast<uint64_t>(index)));
  const size_t block = static_cast<size_t>(std::llround(kBlockSeconds * fs));

  std::vector<double> x(n, 0.0);
  double phase = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (attack == "S3" && i % block == 0) {
      for (double& p : phases) p = nn::UniformRange(attack_rng, 0, 2 * std::numbers::pi);
    }
    const double t = static_cast<double>(i) / fs;
    double v = 0.0;
    for (int k = 0; k < kHarmonics; ++k) {
      if (attack == "S1" && (k + 1) % 2 == 0) continue;
      v += amps[k] * std::sin((k + 1) * phase + phases[k]);
    }
    x[i] = v;
    phase += 2 * std::numbers::pi * pitch.PitchAt(t) / fs;
    if (phase > 2 * std::numbers::pi * 64) phase -= 2 * std::numbers::pi * 64;
  }
  const double signal_rms = Rms(x);

  nn::Rng noise_rng(Seed(spec.seed, 4, static_cast<uint64_t>(speaker), static_cast<uint64_t>(index)));
  const double noise_rms = signal_rms * std::pow(10.0, -spec.noise_snr_db / 20.0);
  for (double& v : x) v += noise_rms * Gaussian(noise_rng);

  if (attack == "S2") {
    std::vector<double> band(n);
    for (double& v : band) v = Gaussian(attack_rng);
    const Biquad bp = Biquad::BandPass(kBandCenterHz, fs, 2.0);
    bp.Apply(band);
    bp.Apply(band);
    const double scale = 0.1 * signal_rms / std::max(Rms(band), 1e-12);
    for (size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / fs;
      x[i] += scale * band[i] * 0.5 * (1.0 + std::sin(2 * std::numbers::pi * kModulationHz * t));
    }
  }

  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0) {
    for (double& v : x) v *= 0.8 / peak;
  }
  return x;
}

inline std::string SpeakerId(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "SPK%02d", s);
  return buf;
}

inline std::string UttId(int s, int j, const std::string& attack) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "toy_%02d_%03d_%s", s, j, attack.empty() ? "bona" : attack.c_str());
  return buf;
}

}  // namespace toy

/// Writes out_dir/wav/<utt>.wav (PCM16 mono), out_dir/manifest.csv and
/// out_dir/protocol.txt. Output is a pure function of the spec.
inline Manifest GenerateToyCorpus(const ToySpec& spec, const std::filesystem::path& out_dir, int threads = 1) {
  Validate(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  if (ec) Fail(ErrorCode::kIoError, (out_dir / "wav").string() + ": " + ec.message());

  Manifest m;
  m.source = "toy";
  std::vector<std::string> classes{""};
  classes.insert(classes.end(), spec.attacks.begin(), spec.attacks.end());
  for (int s = 0; s < spec.n_speakers; ++s) {
    for (const std::string& attack : classes) {
      for (int j = 0; j < spec.utts_per_speaker_per_class; ++j) {
        Utterance u;
        u.id = toy::UttId(s, j, attack);
        u.speaker = toy::SpeakerId(s);
        u.label = attack.empty() ? Label::kBonafide : Label::kSpoof;
        if (!attack.empty()) u.attack_id = attack;
        u.path = out_dir / "wav" / (u.id + ".wav");
        m.utterances.push_back(std::move(u));
      }
    }
  }

  const long total = static_cast<long>(m.utterances.size());
  std::vector<std::string> failures(static_cast<size_t>(total));
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, threads))
  for (long i = 0; i < total; ++i) {
    const Utterance& u = m.utterances[static_cast<size_t>(i)];
    const int s = std::stoi(u.speaker.substr(3));
    const int j = std::stoi(u.id.substr(7, 3));
    try {
      wav::WritePcm16(u.path, toy::Synthesize(spec, s, j, u.attack_id.value_or("")), spec.sample_rate);
    } catch (const Error& e) {
      failures[static_cast<size_t>(i)] = e.what();
    }
  }
  for (const std::string& f : failures) {
    if (!f.empty()) Fail(ErrorCode::kIoError, f);
  }
  WriteManifestFile(out_dir / "manifest.csv", m);
  std::ofstream proto(out_dir / "protocol.txt", std::ios::trunc);
  if (!proto) Fail(ErrorCode::kIoError, (out_dir / "protocol.txt").string() + ": cannot open for writing");
  WriteProtocol(proto, m);
  return m;
}

}  // namespace qsn
