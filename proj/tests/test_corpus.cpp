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

#include <gtest/gtest.h>

#include <algorithm>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "qsn/corpus.hpp"
#include "qsn/wav.hpp"
#include "test_util.hpp"

namespace qsn {
namespace {

using testing::CodeOf;
using testing::TempDir;

std::string Slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- protocol files -----------------------------------------------------------

TEST(Protocol, ParsesDocumentedFields) {
  std::istringstream in("LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1007571 - A01 spoof\n\n");
  const Manifest m = ParseProtocol(in, "/data/flac", ".flac");
  ASSERT_EQ(m.utterances.size(), 2u);
  const Utterance& a = m.utterances[0];
  EXPECT_EQ(a.speaker, "LA_0079");
  EXPECT_EQ(a.id, "LA_T_1138215");
  EXPECT_EQ(a.label, Label::kBonafide);
  EXPECT_FALSE(a.attack_id.has_value());
  EXPECT_EQ(a.path, std::filesystem::path("/data/flac/LA_T_1138215.flac"));
  const Utterance& b = m.utterances[1];
  EXPECT_EQ(b.label, Label::kSpoof);
  EXPECT_EQ(b.attack_id, "A01");
}

TEST(Protocol, MalformedAndDuplicateLines) {
  std::istringstream three("A u1 - - bonafide\nA u2 spoof\n");
  try {
    ParseProtocol(three, "/r");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMalformedLine);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream key("A u1 - - genuine\n");
  EXPECT_EQ(CodeOf([&] { ParseProtocol(key, "/r"); }), ErrorCode::kMalformedLine);
  std::istringstream dup("A u1 - - bonafide\nB u1 - A02 spoof\n");
  EXPECT_EQ(CodeOf([&] { ParseProtocol(dup, "/r"); }), ErrorCode::kDuplicateUttId);
  EXPECT_EQ(CodeOf([] { ParseProtocolFile("/nonexistent/p.txt", "/r"); }), ErrorCode::kIoError);
}

Manifest SampleManifest(const std::filesystem::path& root) {
  Manifest m;
  for (int i = 0; i < 6; ++i) {
    Utterance u;
    u.id = "utt" + std::to_string(i);
    u.speaker = "spk" + std::to_string(i % 3);
    u.label = i % 2 ? Label::kSpoof : Label::kBonafide;
    if (i % 2) u.attack_id = "A0" + std::to_string(i);
    u.path = root / (u.id + ".wav");
    m.utterances.push_back(u);
  }
  return m;
}

TEST(Protocol, RoundTrip) {
  const Manifest m = SampleManifest("/audio");
  std::ostringstream os;
  WriteProtocol(os, m);
  std::istringstream in(os.str());
  EXPECT_EQ(ParseProtocol(in, "/audio"), m);
}

TEST(ManifestCsv, RoundTripWithRelativePaths) {
  TempDir dir("csv");
  const Manifest m = SampleManifest(dir.path() / "wav");
  WriteManifestFile(dir.path() / "m.csv", m);
  const std::string text = Slurp(dir.path() / "m.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "utt_id,speaker_id,label,attack_id,path");
  EXPECT_NE(text.find("utt1,spk1,spoof,A01,wav/utt1.wav"), std::string::npos);
  Manifest back = ReadManifestFile(dir.path() / "m.csv");
  back.source.clear();
  EXPECT_EQ(back, m);
  std::istringstream bad("utt_id,speaker_id,label,attack_id,path\nu1,s1,maybe,-,x.wav\n");
  EXPECT_EQ(CodeOf([&] { ReadManifestCsv(bad); }), ErrorCode::kMalformedLine);
}

// ---- toy corpus -------------------------------------------------------------------

ToySpec SmallSpec() {
  ToySpec s;
  s.n_speakers = 3;
  s.utts_per_speaker_per_class = 2;
  s.duration = 2.0;
  return s;
}

TEST(Toy, CountAndDeterminism) {
  TempDir a("toy_a"), b("toy_b");
  const ToySpec spec = SmallSpec();
  const Manifest ma = GenerateToyCorpus(spec, a.path());
  const Manifest mb = GenerateToyCorpus(spec, b.path(), 3);
  EXPECT_EQ(ma.utterances.size(), 3u * 2u * 4u);
  EXPECT_EQ(Slurp(a.path() / "manifest.csv"), Slurp(b.path() / "manifest.csv"));
  EXPECT_EQ(Slurp(a.path() / "protocol.txt"), Slurp(b.path() / "protocol.txt"));
  for (const Utterance& u : ma.utterances) {
    const std::string name = u.path.filename().string();
    ASSERT_EQ(Slurp(a.path() / "wav" / name), Slurp(b.path() / "wav" / name)) << name;
  }
  const wav::WavData w = wav::Read(ma.utterances[0].path);
  EXPECT_EQ(w.sample_rate, 16000);
  EXPECT_EQ(w.channels, 1);
  EXPECT_EQ(w.frames(), 32000u);
  EXPECT_TRUE(ValidateManifest(ma).ok());
  // A different seed changes the audio.
  ToySpec other = spec;
  other.seed = 8;
  TempDir c("toy_c");
  GenerateToyCorpus(other, c.path());
  EXPECT_NE(Slurp(a.path() / "wav" / ma.utterances[0].path.filename()),
            Slurp(c.path() / "wav" / ma.utterances[0].path.filename()));
}

TEST(Toy, InvalidSpec) {
  ToySpec s = SmallSpec();
  s.n_speakers = 2;
  EXPECT_EQ(CodeOf([&] { Validate(s); }), ErrorCode::kInvalidConfig);
  s = SmallSpec();
  s.duration = 0;
  EXPECT_EQ(CodeOf([&] { Validate(s); }), ErrorCode::kInvalidConfig);
  s = SmallSpec();
  s.attacks = {"S9"};
  EXPECT_EQ(CodeOf([&] { Validate(s); }), ErrorCode::kInvalidConfig);
}

/// Oracle: power of one Hann-windowed block at an arbitrary frequency,
/// evaluated by a direct DFT.
double BlockPower(const std::vector<double>& x, size_t start, size_t block, double freq) {
  std::complex<double> acc = 0;
  for (size_t n = 0; n < block; ++n) {
    const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / block);
    acc += w * x[start + n] * std::polar(1.0, -2 * std::numbers::pi * freq * n / 16000.0);
  }
  return std::norm(acc);
}

/// Frequency of maximal block power within [lo, hi]: 0.5 Hz grid, then a
/// 0.05 Hz grid around the coarse peak.
double PeakFrequency(const std::vector<double>& x, size_t start, size_t block, double lo, double hi) {
  auto search = [&](double a, double b, double step) {
    double best = a, best_p = -1;
    for (double f = a; f <= b + 1e-9; f += step) {
      const double p = BlockPower(x, start, block, f);
      if (p > best_p) {
        best_p = p;
        best = f;
      }
    }
    return best;
  };
  const double coarse = search(lo, hi, 0.5);
  return search(coarse - 0.5, coarse + 0.5, 0.05);
}

std::vector<double> Mono(const std::filesystem::path& p) { return wav::Read(p).interleaved; }

TEST(Toy, AttacksKeepFundamentalAndS1RemovesEvenHarmonics) {
  TempDir dir("toy_f0");
  ToySpec spec = SmallSpec();
  spec.utts_per_speaker_per_class = 1;
  GenerateToyCorpus(spec, dir.path());
  // 100 ms windows aligned with the S3 phase blocks.
  const size_t block = 1600;
  for (int s = 0; s < spec.n_speakers; ++s) {
    const toy::Intonation pitch = toy::UtteranceIntonation(spec, s, 0);
    auto file = [&](const std::string& attack) { return dir.path() / "wav" / (toy::UttId(s, 0, attack) + ".wav"); };
    const auto bona = Mono(file(""));
    std::map<std::string, std::vector<double>> spoofs;
    for (const std::string attack : {"S1", "S2", "S3"}) spoofs[attack] = Mono(file(attack));
    for (size_t start = 0; start + block <= bona.size(); start += 8 * block) {
      const double expected = pitch.PitchAt((start + block / 2.0) / 16000.0);
      const double lo = 0.85 * expected, hi = 1.15 * expected;
      const double f_bona = PeakFrequency(bona, start, block, lo, hi);
      // The pitch glides by a few percent within a window.
      EXPECT_NEAR(f_bona, expected, 0.04 * expected) << "speaker " << s << " at " << start;
      for (const auto& [attack, x] : spoofs) {
        EXPECT_NEAR(PeakFrequency(x, start, block, lo, hi), f_bona, 2.0) << "speaker " << s << " " << attack;
      }
      auto band_max = [&](const std::vector<double>& x) {
        double best = 0;
        for (double f = 2 * lo; f <= 2 * hi; f += 1.0) best = std::max(best, BlockPower(x, start, block, f));
        return best;
      };
      const double drop_db = 10 * std::log10(band_max(bona) / band_max(spoofs["S1"]));
      EXPECT_GE(drop_db, 20.0) << "speaker " << s << " at " << start;
    }
  }
}

TEST(Toy, SpeakersCoverTheF0RangeEvenly) {
  ToySpec spec = SmallSpec();
  spec.n_speakers = 10;
  std::vector<int> slices;
  const double width = (spec.f0_max - spec.f0_min) / spec.n_speakers;
  for (int s = 0; s < spec.n_speakers; ++s) {
    const double f0 = toy::SpeakerVoice(spec, s).f0;
    ASSERT_GE(f0, spec.f0_min);
    ASSERT_LT(f0, spec.f0_max);
    slices.push_back(static_cast<int>((f0 - spec.f0_min) / width));
  }
  std::sort(slices.begin(), slices.end());
  for (int s = 0; s < spec.n_speakers; ++s) EXPECT_EQ(slices[static_cast<size_t>(s)], s);
}

// ---- validation ---------------------------------------------------------------------

TEST(Validate, MissingFileAndSingleClass) {
  TempDir dir("validate");
  ToySpec spec = SmallSpec();
  spec.duration = 0.5;
  Manifest m = GenerateToyCorpus(spec, dir.path());
  EXPECT_TRUE(ValidateManifest(m).errors.empty());
  const auto gone = m.utterances[3].path;
  std::filesystem::remove(gone);
  const ValidationReport r = ValidateManifest(m);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_NE(r.errors[0].find(gone.string()), std::string::npos);

  Manifest bona;
  for (const Utterance& u : m.utterances) {
    if (u.label == Label::kBonafide) bona.utterances.push_back(u);
  }
  const auto errs = ValidateManifest(bona).errors;
  EXPECT_NE(std::find(errs.begin(), errs.end(), "one class only"), errs.end());
}

}  // namespace
}  // namespace qsn
